#include "fogdet/weathersim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace fogdet::weathersim {

DepthMap compute_depth(int width, int height) {
	if (width < 1 || height < 1) {
		throw InvalidArgument("compute_depth: dimensions must be positive, got " + std::to_string(width) + "x" +
		                      std::to_string(height));
	}
	DepthMap depth{width, height, std::vector<double>(static_cast<std::size_t>(width) * height)};
	const double cx = (width - 1) / 2.0;
	const double cy = (height - 1) / 2.0;
	const double peak = std::sqrt(static_cast<double>(std::max(width, height)));
	for (int y = 0; y < height; ++y) {
		for (int x = 0; x < width; ++x) {
			const double rho = std::hypot(x - cx, y - cy);
			depth.values[static_cast<std::size_t>(y) * width + x] = std::max(0.0, -0.04 * rho + peak);
		}
	}
	return depth;
}

TransmissionMap compute_transmission(const DepthMap& depth, double beta) {
	if (!(beta >= 0.0)) {
		throw InvalidArgument("compute_transmission: beta must be >= 0, got " + std::to_string(beta));
	}
	TransmissionMap t{depth.width, depth.height, std::vector<double>(depth.values.size())};
	std::transform(depth.values.begin(), depth.values.end(), t.values.begin(),
	               [beta](double d) { return std::exp(-beta * d); });
	return t;
}

void validate(const FogParams& params) {
	if (!(params.airlight >= 0.0 && params.airlight <= 1.0)) {
		throw InvalidArgument("fog airlight must lie in [0,1], got " + std::to_string(params.airlight));
	}
	if (!(params.beta >= 0.0)) {
		throw InvalidArgument("fog beta must be >= 0, got " + std::to_string(params.beta));
	}
}

ImageTensor apply_fog(const ImageTensor& clean, const FogParams& params) {
	validate(params);
	if (!clean.within_range() || clean.range != ValueRange::Unit) {
		throw InvalidArgument("apply_fog: clean image must hold values in [0,1]");
	}
	const auto t = compute_transmission(compute_depth(clean.width, clean.height), params.beta);
	ImageTensor out = clean;
	const std::size_t plane = clean.plane();
	for (int c = 0; c < clean.channels; ++c) {
		double* dst = out.data.data() + c * plane;
		for (std::size_t i = 0; i < plane; ++i) {
			dst[i] = dst[i] * t.values[i] + params.airlight * (1.0 - t.values[i]);
		}
	}
	return out;
}

InversionResult invert_fog(const ImageTensor& foggy, const FogParams& params) {
	validate(params);
	const auto t = compute_transmission(compute_depth(foggy.width, foggy.height), params.beta);
	InversionResult result{foggy, std::vector<bool>(foggy.plane())};
	result.image.range = ValueRange::Unit;
	const std::size_t plane = foggy.plane();
	for (std::size_t i = 0; i < plane; ++i) {
		result.trusted[i] = t.values[i] >= kTransmissionFloor;
	}
	for (int c = 0; c < foggy.channels; ++c) {
		double* dst = result.image.data.data() + c * plane;
		for (std::size_t i = 0; i < plane; ++i) {
			const double ti = t.values[i];
			dst[i] = std::clamp((dst[i] - params.airlight * (1.0 - ti)) / ti, 0.0, 1.0);
		}
	}
	return result;
}

double sample_beta(std::pair<double, double> range, Rng& rng) {
	const auto [lo, hi] = range;
	if (!(lo > 0.0) || lo > hi) {
		throw InvalidArgument("sample_beta: need 0 < lo <= hi, got (" + std::to_string(lo) + ", " + std::to_string(hi) + ")");
	}
	if (lo == hi) {
		return lo;
	}
	std::uniform_real_distribution<double> dist(lo, hi);
	return dist(rng);
}

} // namespace fogdet::weathersim
