#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fogdet/dtfe.hpp"
#include "fogdet/nn.hpp"
#include "fogdet/tensor.hpp"

namespace fogdet {

/// Architecture switches and multipliers. Widths follow the small YOLOX layout
/// (64/128/256/512/1024 scaled by `width`), depths 3/9/9/3 scaled by `depth`.
struct ModelConfig {
	int num_classes{3};
	double width{0.5};
	double depth{0.33};
	int image_size{160};
	bool use_dtfe{true};
	bool use_scconv{true};
	bool use_spp{true};
	int attention_heads{4};
	int mlp_ratio{4};

	int channels(int base) const;
	int blocks(int base) const;
	int head_width() const { return channels(256); }
	/// Throws ConfigError listing every inconsistent field.
	void validate() const;
};

namespace backbone {

struct FeaturePyramid {
	Tensor c3; // stride 8
	Tensor c4; // stride 16
	Tensor c5; // stride 32, after DTFE when enabled
	std::map<std::string, Tensor> skips; // "stem" (2), "dark2" (4), "dark3" (8), "dark4" (16)
};

/// Space-to-depth on an image tensor; odd spatial dims are rejected.
Tensor focus_transform(const Tensor& x);

class Focus : public nn::Module {
public:
	Focus(int in_ch, int out_ch, int kernel, Rng& rng);
	Tensor forward(const Tensor& x) const { return conv_.forward(focus_transform(x)); }

private:
	nn::ConvNormAct conv_;
};

class Bottleneck : public nn::Module {
public:
	Bottleneck(int channels, bool shortcut, Rng& rng);
	Tensor forward(const Tensor& x) const;

	const nn::ConvNormAct& conv1() const { return conv1_; }
	const nn::ConvNormAct& conv2() const { return conv2_; }
	bool shortcut() const { return shortcut_; }

private:
	nn::ConvNormAct conv1_; // 1x1
	nn::ConvNormAct conv2_; // 3x3
	bool shortcut_;
};

/// Cross-stage-partial block: two 1x1 branches, bottlenecks on one of them,
/// concatenation and a 1x1 merge. Spatial size is preserved.
class CspBlock : public nn::Module {
public:
	CspBlock(int in_ch, int out_ch, int blocks, bool shortcut, Rng& rng);
	Tensor forward(const Tensor& x) const;

	const nn::ConvNormAct& conv1() const { return conv1_; }
	const nn::ConvNormAct& conv2() const { return conv2_; }
	const nn::ConvNormAct& conv3() const { return conv3_; }
	const std::vector<std::unique_ptr<Bottleneck>>& blocks() const { return blocks_; }

private:
	int in_ch_;
	nn::ConvNormAct conv1_, conv2_, conv3_;
	std::vector<std::unique_ptr<Bottleneck>> blocks_;
};

/// Multi-scale max pooling (5/9/13, stride 1) between two 1x1 convs.
class Spp : public nn::Module {
public:
	Spp(int in_ch, int out_ch, Rng& rng);
	Tensor forward(const Tensor& x) const;

private:
	nn::ConvNormAct conv1_, conv2_;
};

class Backbone : public nn::Module {
public:
	Backbone(const ModelConfig& cfg, Rng& rng);
	FeaturePyramid forward(const Tensor& image) const;

	const std::vector<int>& stage_channels() const { return ch_; }
	const dtfe::Dtfe* dtfe() const { return dtfe_.get(); }

private:
	ModelConfig cfg_;
	std::vector<int> ch_;
	Focus stem_;
	nn::ConvNormAct down2_, down3_, down4_, down5_;
	CspBlock csp2_, csp3_, csp4_;
	std::unique_ptr<Spp> spp_;
	CspBlock csp5_;
	std::unique_ptr<dtfe::Dtfe> dtfe_;
};

} // namespace backbone
} // namespace fogdet
