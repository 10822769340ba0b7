#include "fogdet/restoration.hpp"

namespace fogdet::restoration {

RestorationDecoder::RestorationDecoder(const std::vector<int>& stage_channels, Rng& rng) {
	if (stage_channels.size() != 5) {
		throw ConfigError("restoration decoder needs five backbone stage widths");
	}
	// deconv stages land on strides 16, 8, 4 and fuse dark4, dark3, dark2.
	int in_ch = stage_channels[4];
	for (int i = 0; i < 3; ++i) {
		const int out_ch = std::max(1, in_ch / 2);
		const int skip_ch = stage_channels[static_cast<std::size_t>(3 - i)];
		Stage& s = stages_[static_cast<std::size_t>(i)];
		s.deconv = std::make_unique<nn::ConvTranspose2d>(in_ch, out_ch, 4, 2, 1, rng);
		s.project = std::make_unique<nn::Conv2d>(skip_ch, out_ch, 1, 1, 0, true, rng);
		s.norm = std::make_unique<nn::GroupNorm>(out_ch);
		const std::string name = "up" + std::to_string(i);
		register_module(name + ".deconv", *s.deconv);
		register_module(name + ".skip", *s.project);
		register_module(name + ".norm", *s.norm);
		in_ch = out_ch;
	}
	out_conv_ = std::make_unique<nn::Conv2d>(in_ch, 3, 3, 1, 1, true, rng);
	register_module("out", *out_conv_);
}

RestorationOutput RestorationDecoder::forward(const backbone::FeaturePyramid& pyramid, int out_h, int out_w) const {
	if (!pyramid.c5.defined()) {
		throw ConfigError("restoration: pyramid has no c5 feature");
	}
	Tensor x = pyramid.c5;
	for (std::size_t i = 0; i < stages_.size(); ++i) {
		auto it = pyramid.skips.find(kSkipKeys[i]);
		if (it == pyramid.skips.end() || !it->second.defined()) {
			throw ConfigError("restoration: missing skip feature '" + kSkipKeys[i] + "'");
		}
		const Stage& s = stages_[i];
		const Tensor up = s.deconv->forward(x);
		const Tensor skip = s.project->forward(it->second);
		if (up.shape() != skip.shape()) {
			throw ShapeError("restoration: skip '" + kSkipKeys[i] + "' " + shape_str(skip.shape()) +
			                 " does not match decoder stage " + shape_str(up.shape()));
		}
		x = ops::silu(s.norm->forward(ops::add(up, skip)));
	}
	x = out_conv_->forward(x);
	return {ops::tanh(ops::upsample_bilinear(x, out_h, out_w))};
}

RestorationOutput restore_forward(const RestorationDecoder& decoder, const backbone::FeaturePyramid& pyramid, int out_h,
                                  int out_w) {
	return decoder.forward(pyramid, out_h, out_w);
}

Tensor map_target(const Tensor& clean01) {
	return ops::add_scalar(ops::scale(clean01.detach(), 2.0), -1.0);
}

Tensor restoration_loss(const RestorationOutput& pred, const Tensor& clean01) {
	if (pred.image.shape() != clean01.shape()) {
		throw ShapeError("restoration_loss: prediction " + shape_str(pred.image.shape()) + " vs target " +
		                 shape_str(clean01.shape()));
	}
	return ops::mse_loss(pred.image, map_target(clean01));
}

void dump_restored(const RestorationOutput& pred, int index, const std::filesystem::path& path) {
	ImageTensor img = unstack_image(pred.image, index, ValueRange::SignedUnit);
	for (double& v : img.data) v = (v + 1.0) / 2.0;
	img.range = ValueRange::Unit;
	write_image(path, img);
}

} // namespace fogdet::restoration
