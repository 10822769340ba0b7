#include "fogdet/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace fogdet {

int ModelConfig::channels(int base) const {
	return std::max(1, static_cast<int>(std::lround(base * width)));
}

int ModelConfig::blocks(int base) const {
	return std::max(1, static_cast<int>(std::lround(base * depth)));
}

void ModelConfig::validate() const {
	std::vector<std::string> bad;
	if (num_classes < 1) bad.push_back("num_classes must be >= 1");
	if (!(width > 0)) bad.push_back("width must be > 0");
	if (!(depth > 0)) bad.push_back("depth must be > 0");
	if (image_size < 32 || image_size % 32 != 0) bad.push_back("image_size must be a positive multiple of 32");
	if (attention_heads < 1) bad.push_back("attention_heads must be >= 1");
	if (mlp_ratio < 1) bad.push_back("mlp_ratio must be >= 1");
	if (width > 0) {
		if (use_dtfe && attention_heads >= 1 && channels(1024) % attention_heads != 0) {
			bad.push_back("deepest width " + std::to_string(channels(1024)) + " is not divisible by attention_heads");
		}
		if (channels(64) % 2 != 0) bad.push_back("width gives an odd stem channel count");
	}
	if (!bad.empty()) {
		std::string msg = "invalid model config:";
		for (const auto& b : bad) msg += "\n  " + b;
		throw ConfigError(msg);
	}
}

namespace backbone {

Tensor focus_transform(const Tensor& x) {
	if (x.ndim() != 4) {
		throw ShapeError("focus_transform: expected NCHW, got " + shape_str(x.shape()));
	}
	if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
		throw InvalidArgument("focus_transform: spatial dims must be even, got " + shape_str(x.shape()));
	}
	return ops::focus(x);
}

Focus::Focus(int in_ch, int out_ch, int kernel, Rng& rng) : conv_(4 * in_ch, out_ch, kernel, 1, rng) {
	register_module("conv", conv_);
}

Bottleneck::Bottleneck(int channels, bool shortcut, Rng& rng)
    : conv1_(channels, channels, 1, 1, rng), conv2_(channels, channels, 3, 1, rng), shortcut_(shortcut) {
	register_module("conv1", conv1_);
	register_module("conv2", conv2_);
}

Tensor Bottleneck::forward(const Tensor& x) const {
	Tensor y = conv2_.forward(conv1_.forward(x));
	return shortcut_ ? ops::add(y, x) : y;
}

CspBlock::CspBlock(int in_ch, int out_ch, int blocks, bool shortcut, Rng& rng)
    : in_ch_(in_ch), conv1_(in_ch, std::max(1, out_ch / 2), 1, 1, rng), conv2_(in_ch, std::max(1, out_ch / 2), 1, 1, rng),
      conv3_(2 * std::max(1, out_ch / 2), out_ch, 1, 1, rng) {
	const int hidden = conv1_.out_channels();
	register_module("conv1", conv1_);
	register_module("conv2", conv2_);
	register_module("conv3", conv3_);
	for (int i = 0; i < blocks; ++i) {
		blocks_.push_back(std::make_unique<Bottleneck>(hidden, shortcut, rng));
		register_module("m" + std::to_string(i), *blocks_.back());
	}
}

Tensor CspBlock::forward(const Tensor& x) const {
	if (x.ndim() != 4 || x.dim(1) != in_ch_) {
		throw ShapeError("csp block expects " + std::to_string(in_ch_) + " channels, got " + shape_str(x.shape()));
	}
	Tensor a = conv1_.forward(x);
	for (const auto& b : blocks_) a = b->forward(a);
	const Tensor b = conv2_.forward(x);
	return conv3_.forward(ops::concat_channels({a, b}));
}

Spp::Spp(int in_ch, int out_ch, Rng& rng) : conv1_(in_ch, in_ch / 2, 1, 1, rng), conv2_(4 * (in_ch / 2), out_ch, 1, 1, rng) {
	register_module("conv1", conv1_);
	register_module("conv2", conv2_);
}

Tensor Spp::forward(const Tensor& x) const {
	const Tensor h = conv1_.forward(x);
	std::vector<Tensor> parts{h};
	for (int k : {5, 9, 13}) parts.push_back(ops::max_pool2d(h, k, 1, k / 2));
	return conv2_.forward(ops::concat_channels(parts));
}

namespace {
std::vector<int> stage_widths(const ModelConfig& cfg) {
	return {cfg.channels(64), cfg.channels(128), cfg.channels(256), cfg.channels(512), cfg.channels(1024)};
}
} // namespace

Backbone::Backbone(const ModelConfig& cfg, Rng& rng)
    : cfg_((cfg.validate(), cfg)), ch_(stage_widths(cfg)), stem_(3, ch_[0], 3, rng),
      down2_(ch_[0], ch_[1], 3, 2, rng), down3_(ch_[1], ch_[2], 3, 2, rng), down4_(ch_[2], ch_[3], 3, 2, rng),
      down5_(ch_[3], ch_[4], 3, 2, rng), csp2_(ch_[1], ch_[1], cfg.blocks(3), true, rng),
      csp3_(ch_[2], ch_[2], cfg.blocks(9), true, rng), csp4_(ch_[3], ch_[3], cfg.blocks(9), true, rng),
      csp5_(ch_[4], ch_[4], cfg.blocks(3), false, rng) {
	register_module("stem", stem_);
	register_module("dark2.down", down2_);
	register_module("dark2.csp", csp2_);
	register_module("dark3.down", down3_);
	register_module("dark3.csp", csp3_);
	register_module("dark4.down", down4_);
	register_module("dark4.csp", csp4_);
	register_module("dark5.down", down5_);
	if (cfg.use_spp) {
		spp_ = std::make_unique<Spp>(ch_[4], ch_[4], rng);
		register_module("dark5.spp", *spp_);
	}
	register_module("dark5.csp", csp5_);
	if (cfg.use_dtfe) {
		const int grid = cfg.image_size / 32;
		dtfe_ = std::make_unique<dtfe::Dtfe>(ch_[4], grid, grid, cfg.attention_heads, cfg.mlp_ratio, rng);
		register_module("dtfe", *dtfe_);
	}
}

FeaturePyramid Backbone::forward(const Tensor& image) const {
	if (image.ndim() != 4 || image.dim(1) != 3) {
		throw ShapeError("backbone expects [N,3,H,W], got " + shape_str(image.shape()));
	}
	if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
		throw ShapeError("backbone input dims must be divisible by 32, got " + shape_str(image.shape()));
	}
	FeaturePyramid out;
	const Tensor stem = stem_.forward(image);
	const Tensor d2 = csp2_.forward(down2_.forward(stem));
	const Tensor d3 = csp3_.forward(down3_.forward(d2));
	const Tensor d4 = csp4_.forward(down4_.forward(d3));
	Tensor d5 = down5_.forward(d4);
	if (spp_) d5 = spp_->forward(d5);
	d5 = csp5_.forward(d5);
	if (dtfe_) d5 = dtfe_->forward(d5);
	out.c3 = d3;
	out.c4 = d4;
	out.c5 = d5;
	out.skips = {{"stem", stem}, {"dark2", d2}, {"dark3", d3}, {"dark4", d4}};
	return out;
}

} // namespace backbone
} // namespace fogdet
