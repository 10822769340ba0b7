#include "fogdet/nn.hpp"

#include <algorithm>
#include <cmath>

namespace fogdet::nn {

std::vector<NamedParameter> Module::named_parameters(const std::string& prefix) const {
	std::vector<NamedParameter> out;
	for (const auto& p : params_) {
		out.push_back({prefix + p.path, p.tensor, p.decay});
	}
	for (const auto& [name, child] : children_) {
		auto sub = child->named_parameters(prefix + name + ".");
		out.insert(out.end(), std::make_move_iterator(sub.begin()), std::make_move_iterator(sub.end()));
	}
	return out;
}

std::vector<Tensor> Module::parameters() const {
	std::vector<Tensor> out;
	for (auto& p : named_parameters()) {
		out.push_back(p.tensor);
	}
	return out;
}

std::size_t Module::parameter_count() const {
	std::size_t n = 0;
	for (auto& p : named_parameters()) {
		n += p.tensor.numel();
	}
	return n;
}

Tensor Module::register_parameter(const std::string& name, Tensor t, bool decay) {
	t.set_requires_grad(true);
	params_.push_back({name, t, decay});
	return t;
}

void Module::register_module(const std::string& name, Module& child) {
	children_.emplace_back(name, &child);
}

int default_groups(int channels) {
	int g = std::clamp(channels / 4, 1, 32);
	while (channels % g != 0) {
		--g;
	}
	return g;
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride_, int padding_, bool with_bias, Rng& rng)
    : stride(stride_), padding(padding_) {
	const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
	weight = register_parameter("weight", Tensor::uniform({out_ch, in_ch, kernel, kernel}, -bound, bound, rng), true);
	if (with_bias) {
		bias = register_parameter("bias", Tensor::uniform({out_ch}, -bound, bound, rng), false);
	}
}

Tensor Conv2d::forward(const Tensor& x) const {
	return ops::conv2d(x, weight, bias, stride, padding);
}

ConvTranspose2d::ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride_, int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
	const double bound = 1.0 / std::sqrt(static_cast<double>(out_ch * kernel * kernel));
	weight = register_parameter("weight", Tensor::uniform({in_ch, out_ch, kernel, kernel}, -bound, bound, rng), true);
	bias = register_parameter("bias", Tensor::uniform({out_ch}, -bound, bound, rng), false);
}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
	return ops::conv_transpose2d(x, weight, bias, stride, padding);
}

GroupNorm::GroupNorm(int channels, int groups_) : groups(groups_ > 0 ? groups_ : default_groups(channels)) {
	gamma = register_parameter("gamma", Tensor::full({channels}, 1.0), false);
	beta = register_parameter("beta", Tensor::zeros({channels}), false);
}

Tensor GroupNorm::forward(const Tensor& x) const {
	return ops::group_norm(x, groups, gamma, beta);
}

LayerNorm::LayerNorm(int features) {
	gamma = register_parameter("gamma", Tensor::full({features}, 1.0), false);
	beta = register_parameter("beta", Tensor::zeros({features}), false);
}

Linear::Linear(int in_f, int out_f, Rng& rng) {
	const double bound = 1.0 / std::sqrt(static_cast<double>(in_f));
	weight = register_parameter("weight", Tensor::uniform({out_f, in_f}, -bound, bound, rng), true);
	bias = register_parameter("bias", Tensor::uniform({out_f}, -bound, bound, rng), false);
}

ConvNormAct::ConvNormAct(int in_ch, int out_ch, int kernel, int stride, Rng& rng)
    : conv_(in_ch, out_ch, kernel, stride, (kernel - 1) / 2, false, rng), norm_(out_ch) {
	register_module("conv", conv_);
	register_module("norm", norm_);
}

Tensor ConvNormAct::forward(const Tensor& x) const {
	return ops::silu(norm_.forward(conv_.forward(x)));
}

void zero_parameters(const Module& m) {
	for (auto& p : m.named_parameters()) {
		Tensor t = p.tensor;
		std::fill(t.data().begin(), t.data().end(), 0.0);
	}
}

} // namespace fogdet::nn
