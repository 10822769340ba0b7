#pragma once

// Atmospheric scattering fog: I = J*t + A*(1 - t), t = exp(-beta*d), with a
// radial depth that peaks at the image centre.

#include <utility>
#include <vector>

#include "fogdet/image.hpp"
#include "fogdet/tensor.hpp"

namespace fogdet::weathersim {

struct FogParams {
	double airlight{0.5}; // A, in [0,1]
	double beta{0.1};     // scattering coefficient, >= 0 (0 means no fog)
};

struct DepthMap {
	int width{0};
	int height{0};
	std::vector<double> values; // row-major
	double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct TransmissionMap {
	int width{0};
	int height{0};
	std::vector<double> values;
	double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Transmission below this is treated as untrustworthy by `invert_fog`.
inline constexpr double kTransmissionFloor = 0.05;

/// Training / test scattering ranges.
inline constexpr std::pair<double, double> kTrainBetaRange{0.07, 0.12};
inline constexpr std::pair<double, double> kTestBetaRange{0.05, 0.14};
inline constexpr double kDefaultAirlight = 0.5;

/// d = max(0, -0.04*rho + sqrt(max(w, h))), rho measured from ((w-1)/2, (h-1)/2).
DepthMap compute_depth(int width, int height);

TransmissionMap compute_transmission(const DepthMap& depth, double beta);

void validate(const FogParams& params);

/// Applies fog with one transmission value per pixel shared across channels.
ImageTensor apply_fog(const ImageTensor& clean, const FogParams& params);

struct InversionResult {
	ImageTensor image;              // clamped to [0,1]
	std::vector<bool> trusted;      // per pixel, t >= kTransmissionFloor
};

InversionResult invert_fog(const ImageTensor& foggy, const FogParams& params);

/// Uniform draw from [lo, hi].
double sample_beta(std::pair<double, double> range, Rng& rng);

} // namespace fogdet::weathersim
