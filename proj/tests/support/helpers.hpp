#pragma once

#include <functional>
#include <random>
#include <vector>

#include "fogdet/ops.hpp"
#include "fogdet/tensor.hpp"
#include "support/oracles.hpp"

namespace testing {

using fogdet::Rng;
using fogdet::Shape;
using fogdet::Tensor;

inline Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
	return Tensor::uniform(std::move(s), lo, hi, rng, true);
}

// Scalar readout with fixed random weights so every output element matters.
inline Tensor readout(const Tensor& y, std::uint64_t seed = 99) {
	Rng r(seed);
	std::uniform_real_distribution<double> u(-1.0, 1.0);
	std::vector<double> w(y.numel());
	for (double& v : w) v = u(r);
	return fogdet::ops::weighted_sum(y, w);
}

// Backward once, then compare every input's gradient with central differences.
// Returns the worst relative error.
inline double check_all(const std::function<Tensor()>& build, std::vector<Tensor> inputs, double eps = 1e-6) {
	for (auto& t : inputs) t.zero_grad();
	build().backward();
	double worst = 0.0;
	auto f = [&] {
		fogdet::NoGradGuard g;
		return build().item();
	};
	for (auto& t : inputs) worst = std::max(worst, oracle::compare_grad(f, t, oracle::all_indices(t), eps).worst);
	return worst;
}

// Same, at `count` random entries of each input.
inline double check_some(const std::function<Tensor()>& build, std::vector<Tensor> inputs, int count, Rng& rng,
                         double eps = 1e-6, double floor = 1e-6) {
	for (auto& t : inputs) t.zero_grad();
	build().backward();
	double worst = 0.0;
	auto f = [&] {
		fogdet::NoGradGuard g;
		return build().item();
	};
	for (auto& t : inputs) {
		std::uniform_int_distribution<std::size_t> pick(0, t.numel() - 1);
		std::vector<std::size_t> idx;
		for (int i = 0; i < count; ++i) idx.push_back(pick(rng));
		worst = std::max(worst, oracle::compare_grad(f, t, idx, eps, floor).worst);
	}
	return worst;
}

} // namespace testing
