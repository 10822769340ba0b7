#pragma once

// Dynamic transformer feature enhancement for the deepest backbone map:
// two deformable convolutions followed by one pre-norm transformer block.

#include <vector>

#include "fogdet/nn.hpp"
#include "fogdet/tensor.hpp"

namespace fogdet::dtfe {

/// Bilinear interpolation of every channel of `feature` (N,C,H,W) batch item
/// `batch` at continuous (y, x). Neighbours outside the map read as zero.
std::vector<double> bilinear_sample(const Tensor& feature, int batch, double y, double x);

/// Deformable convolution (no modulation). `offsets` is (N, 2*K*K, H_out, W_out)
/// with channel 2k holding dy and 2k+1 holding dx for kernel tap k (row-major taps).
Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& weight, const Tensor& bias, int stride,
                     int padding);

/// Offset predictor (zero-initialised) + deformable conv + GroupNorm + SiLU.
class DeformConvLayer : public nn::Module {
public:
	DeformConvLayer(int in_ch, int out_ch, int kernel, Rng& rng);
	Tensor forward(const Tensor& x) const;
	Tensor offsets(const Tensor& x) const { return offset_conv_.forward(x); }

	const nn::Conv2d& offset_conv() const { return offset_conv_; }
	const Tensor& weight() const { return weight_; }
	const nn::GroupNorm& norm() const { return norm_; }
	int kernel() const { return kernel_; }

private:
	int kernel_;
	nn::Conv2d offset_conv_;
	Tensor weight_;
	nn::GroupNorm norm_;
};

class DynamicFeatureTransform : public nn::Module {
public:
	DynamicFeatureTransform(int channels, Rng& rng);
	Tensor forward(const Tensor& x) const { return second_.forward(first_.forward(x)); }

	const DeformConvLayer& first() const { return first_; }
	const DeformConvLayer& second() const { return second_; }

private:
	DeformConvLayer first_;
	DeformConvLayer second_;
};

/// Intermediate values of one attention evaluation, for inspection in tests.
struct AttentionTrace {
	Tensor attention; // (B*heads, T, T), rows are probability vectors
	Tensor values;    // (B, T, C) value projection
	Tensor context;   // (B, T, C) attention-weighted values before output projection
};

class TransformerEnhancement : public nn::Module {
public:
	/// `grid` is the expected feature-map side; maps of other sizes are rejected.
	TransformerEnhancement(int channels, int grid_h, int grid_w, int heads, int mlp_ratio, Rng& rng);
	Tensor forward(const Tensor& x, AttentionTrace* trace = nullptr) const;

	int heads() const { return heads_; }

private:
	int channels_, grid_h_, grid_w_, heads_;
	Tensor pos_embed_;
	nn::LayerNorm norm1_;
	nn::Linear q_, k_, v_, proj_;
	nn::LayerNorm norm2_;
	nn::Linear fc1_, fc2_;
};

class Dtfe : public nn::Module {
public:
	Dtfe(int channels, int grid_h, int grid_w, int heads, int mlp_ratio, Rng& rng);
	Tensor forward(const Tensor& x) const { return tfe_.forward(dft_.forward(x)); }

	const DynamicFeatureTransform& dft() const { return dft_; }
	const TransformerEnhancement& tfe() const { return tfe_; }

private:
	DynamicFeatureTransform dft_;
	TransformerEnhancement tfe_;
};

} // namespace fogdet::dtfe
