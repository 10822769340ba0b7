#include <doctest.h>

#include <cmath>
#include <random>

#include "fogdet/weathersim.hpp"

using namespace fogdet;
using namespace fogdet::weathersim;

namespace {

ImageTensor random_image(int w, int h, Rng& rng) {
	std::uniform_real_distribution<double> u(0.0, 1.0);
	ImageTensor img(3, h, w);
	for (double& v : img.data) v = u(rng);
	return img;
}

// Depth by direct evaluation at one pixel.
double depth_at(int w, int h, int x, int y) {
	const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
	const double rho = std::hypot(x - cx, y - cy);
	return std::max(0.0, -0.04 * rho + std::sqrt(static_cast<double>(std::max(w, h))));
}

} // namespace

TEST_CASE("depth: centre, single pixel, corner") {
	// 101x101 has an integer centre; 100x100 centre is fractional, so check the formula there too
	const DepthMap odd = compute_depth(101, 101);
	CHECK(odd.at(50, 50) == doctest::Approx(std::sqrt(101.0)).epsilon(1e-12));
	const DepthMap one = compute_depth(1, 1);
	CHECK(one.at(0, 0) == 1.0);
	const DepthMap d = compute_depth(100, 100);
	CHECK(d.at(0, 0) == doctest::Approx(10.0 - 0.04 * std::hypot(49.5, 49.5)).epsilon(1e-12));
	// corner of a 100x100 grid is 70.0036 px from (49.5, 49.5)
	CHECK(d.at(0, 0) == doctest::Approx(7.1999).epsilon(1e-4));
	for (int y = 0; y < 100; y += 7)
		for (int x = 0; x < 100; x += 3) CHECK(d.at(y, x) == doctest::Approx(depth_at(100, 100, x, y)).epsilon(1e-12));
	CHECK_THROWS_AS(compute_depth(0, 5), InvalidArgument);
	CHECK_THROWS_AS(compute_depth(5, -1), InvalidArgument);
}

TEST_CASE("depth: clamped at zero for extreme aspect ratios, symmetric, peaked at the centre") {
	// 0.04 * 1499.5 exceeds sqrt(3000), so both ends of the strip clamp
	const DepthMap strip = compute_depth(3000, 1);
	for (double v : strip.values) CHECK(v >= 0.0);
	CHECK(strip.at(0, 0) == 0.0);
	CHECK(strip.at(0, 2999) == 0.0);
	CHECK(strip.at(0, 1500) > 0.0);
	const DepthMap d = compute_depth(31, 17);
	double peak = 0;
	for (double v : d.values) peak = std::max(peak, v);
	CHECK(d.at(8, 15) == peak);
	for (int y = 0; y < 17; ++y)
		for (int x = 0; x < 31; ++x) {
			CHECK(d.at(y, x) == doctest::Approx(d.at(y, 30 - x)).epsilon(1e-14));
			CHECK(d.at(y, x) == doctest::Approx(d.at(16 - y, x)).epsilon(1e-14));
		}
}

TEST_CASE("transmission values and monotonicity") {
	DepthMap ten{1, 1, {10.0}};
	CHECK(compute_transmission(ten, 0.1).values[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
	CHECK(compute_transmission(ten, 0.07).values[0] > compute_transmission(ten, 0.12).values[0]);
	const DepthMap d = compute_depth(40, 30);
	for (double v : compute_transmission(d, 0.0).values) CHECK(v == 1.0);
	const auto lo = compute_transmission(d, 0.05), hi = compute_transmission(d, 0.14);
	for (std::size_t i = 0; i < d.values.size(); ++i) {
		CHECK(hi.values[i] > 0.0);
		CHECK(lo.values[i] <= 1.0);
		if (d.values[i] > 0) CHECK(hi.values[i] < lo.values[i]);
	}
	CHECK_THROWS_AS(compute_transmission(d, -0.01), InvalidArgument);
}

TEST_CASE("apply_fog: scalar case, identity, fixed point, centre thickest") {
	ImageTensor white(3, 1, 1, 1.0);
	// single pixel: d = 1, choose beta so t = e^-1
	const ImageTensor out = apply_fog(white, {0.5, 1.0});
	CHECK(out.data[0] == doctest::Approx(0.683940).epsilon(1e-6));

	Rng rng(11);
	const ImageTensor img = random_image(33, 21, rng);
	const ImageTensor same = apply_fog(img, {0.5, 0.0});
	CHECK(same.data == img.data);

	ImageTensor flat(3, 21, 33, 0.42);
	for (double b : {0.05, 0.1, 0.14}) {
		const ImageTensor f = apply_fog(flat, {0.42, b});
		for (double v : f.data) CHECK(v == doctest::Approx(0.42).epsilon(1e-14));
	}

	// Black image: fog intensity A(1-t) is largest where t is smallest, i.e. the centre.
	ImageTensor black(3, 21, 33, 0.0);
	const ImageTensor f = apply_fog(black, {0.5, 0.1});
	double peak = 0;
	for (double v : f.data) peak = std::max(peak, v);
	CHECK(f.at(0, 10, 16) == peak);
	// shared transmission: every channel identical on a grey input
	for (int y = 0; y < 21; ++y)
		for (int x = 0; x < 33; ++x) CHECK(f.at(0, y, x) == f.at(2, y, x));
}

TEST_CASE("apply_fog matches a per-pixel evaluation") {
	Rng rng(12);
	const ImageTensor img = random_image(24, 18, rng);
	const FogParams p{0.5, 0.09};
	const ImageTensor f = apply_fog(img, p);
	for (int c = 0; c < 3; ++c)
		for (int y = 0; y < 18; ++y)
			for (int x = 0; x < 24; ++x) {
				const double t = std::exp(-p.beta * depth_at(24, 18, x, y));
				CHECK(f.at(c, y, x) == doctest::Approx(img.at(c, y, x) * t + p.airlight * (1 - t)).epsilon(1e-12));
			}
}

TEST_CASE("apply_fog rejects out-of-range inputs") {
	ImageTensor bad(3, 4, 4, 0.5);
	bad.data[5] = 1.2;
	CHECK_THROWS_AS(apply_fog(bad, {0.5, 0.1}), InvalidArgument);
	ImageTensor ok(3, 4, 4, 0.5);
	CHECK_THROWS_AS(apply_fog(ok, {1.5, 0.1}), InvalidArgument);
	CHECK_THROWS_AS(apply_fog(ok, {0.5, -0.1}), InvalidArgument);
}

TEST_CASE("invert_fog round trip on random images") {
	Rng rng(13);
	std::uniform_real_distribution<double> a(0.3, 0.7), b(0.05, 0.14);
	for (int i = 0; i < 5; ++i) {
		const ImageTensor img = random_image(48, 40, rng);
		const FogParams p{a(rng), b(rng)};
		const InversionResult r = invert_fog(apply_fog(img, p), p);
		for (int y = 0; y < 40; ++y)
			for (int x = 0; x < 48; ++x) {
				if (!r.trusted[static_cast<std::size_t>(y) * 48 + x]) continue;
				for (int c = 0; c < 3; ++c) CHECK(std::abs(r.image.at(c, y, x) - img.at(c, y, x)) < 1e-6);
			}
	}
	ImageTensor flat(3, 8, 8, 0.5);
	const InversionResult r = invert_fog(flat, {0.5, 0.1});
	for (double v : r.image.data) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));
	const ImageTensor img = random_image(8, 8, rng);
	CHECK(invert_fog(img, {0.5, 0.0}).image.data == img.data);
}

TEST_CASE("invert_fog masks pixels below the transmission floor") {
	// 400x400 centre depth 20; beta 0.2 gives t = e^-4 < 0.05 at the centre
	ImageTensor img(3, 400, 400, 0.5);
	const InversionResult r = invert_fog(img, {0.5, 0.2});
	CHECK_FALSE(r.trusted[200u * 400 + 200]);
	// corner: d = 20 - 0.04 * 282.1, t ~ 0.18
	CHECK(r.trusted[0]);
	for (double v : r.image.data) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("sample_beta ranges and determinism") {
	Rng a(5), b(5);
	for (int i = 0; i < 200; ++i) {
		const double x = sample_beta(kTrainBetaRange, a);
		CHECK(x == sample_beta(kTrainBetaRange, b));
		CHECK((x >= 0.07 && x <= 0.12));
		const double y = sample_beta(kTestBetaRange, a);
		sample_beta(kTestBetaRange, b);
		CHECK((y >= 0.05 && y <= 0.14));
	}
	CHECK(sample_beta({0.1, 0.1}, a) == 0.1);
	CHECK_THROWS_AS(sample_beta({0.2, 0.1}, a), InvalidArgument);
}
