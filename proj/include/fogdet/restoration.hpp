#pragma once

// Training-only decoder that reconstructs the clean image from backbone
// features. Inference code never constructs it.

#include <array>
#include <filesystem>
#include <string>

#include "fogdet/backbone.hpp"
#include "fogdet/image.hpp"
#include "fogdet/nn.hpp"

namespace fogdet::restoration {

/// Skip keys consumed by the three deconvolution stages, deepest first.
inline const std::array<std::string, 3> kSkipKeys{"dark4", "dark3", "dark2"};

struct RestorationOutput {
	Tensor image; // (N,3,H,W), Tanh range [-1,1]
};

class RestorationDecoder : public nn::Module {
public:
	/// `stage_channels` are the backbone widths (stem, dark2..dark5).
	RestorationDecoder(const std::vector<int>& stage_channels, Rng& rng);
	/// Decodes to out_h x out_w. Throws ConfigError naming a missing skip.
	RestorationOutput forward(const backbone::FeaturePyramid& pyramid, int out_h, int out_w) const;

private:
	struct Stage {
		std::unique_ptr<nn::ConvTranspose2d> deconv;
		std::unique_ptr<nn::Conv2d> project; // 1x1 skip projection
		std::unique_ptr<nn::GroupNorm> norm;
	};
	std::array<Stage, 3> stages_;
	std::unique_ptr<nn::Conv2d> out_conv_;
};

/// Convenience wrapper matching the decoder's forward.
RestorationOutput restore_forward(const RestorationDecoder& decoder, const backbone::FeaturePyramid& pyramid, int out_h,
                                  int out_w);

/// Maps a [0,1] target to the Tanh range: 2*t - 1.
Tensor map_target(const Tensor& clean01);

/// Mean squared error between the prediction and the mapped target.
Tensor restoration_loss(const RestorationOutput& pred, const Tensor& clean01);

/// Writes batch item `index` as an 8-bit PNG after mapping back with (y+1)/2.
void dump_restored(const RestorationOutput& pred, int index, const std::filesystem::path& path);

} // namespace fogdet::restoration
