#include <doctest.h>

#include <cmath>
#include <random>

#include "fogdet/dtfe.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace fogdet;
using namespace fogdet::dtfe;
using testing::check_all;
using testing::check_some;
using testing::rand_tensor;
using testing::readout;

namespace {

Tensor offsets_filled(int n, int k, int h, int w, double dy, double dx) {
	Tensor off = Tensor::zeros({n, 2 * k * k, h, w}, true);
	for (int b = 0; b < n; ++b)
		for (int t = 0; t < k * k; ++t)
			for (int i = 0; i < h * w; ++i) {
				off[((static_cast<std::size_t>(b) * 2 * k * k + 2 * t) * h * w) + i] = dy;
				off[((static_cast<std::size_t>(b) * 2 * k * k + 2 * t + 1) * h * w) + i] = dx;
			}
	return off;
}

void zero_matching(const nn::Module& m, const std::vector<std::string>& prefixes) {
	for (auto& p : m.named_parameters()) {
		for (const auto& pre : prefixes)
			if (p.path.rfind(pre, 0) == 0) {
				Tensor t = p.tensor;
				for (double& v : t.data()) v = 0.0;
			}
	}
}

void jitter(const nn::Module& m, const std::string& prefix, double scale, Rng& rng) {
	std::normal_distribution<double> n(0.0, scale);
	for (auto& p : m.named_parameters()) {
		if (p.path.rfind(prefix, 0) != 0) continue;
		Tensor t = p.tensor;
		for (double& v : t.data()) v += n(rng);
	}
}

} // namespace

TEST_CASE("bilinear_sample: integer points, centre of a 2x2, far outside, partial") {
	Tensor f = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
	auto v = bilinear_sample(f, 0, 1, 0);
	CHECK(v[0] == 3.0);
	CHECK(v[1] == 30.0);
	v = bilinear_sample(f, 0, 0.5, 0.5);
	CHECK(v[0] == doctest::Approx(2.5).epsilon(1e-15));
	CHECK(v[1] == doctest::Approx(25.0).epsilon(1e-15));
	v = bilinear_sample(f, 0, -50, 3);
	CHECK(v[0] == 0.0);
	CHECK(v[1] == 0.0);
	// half a pixel past the right edge: the missing neighbour reads as zero
	v = bilinear_sample(f, 0, 0, 1.5);
	CHECK(v[0] == doctest::Approx(1.0));
	CHECK_THROWS_AS(bilinear_sample(f, 1, 0, 0), ShapeError);
}

TEST_CASE("bilinear_sample is linear between adjacent rows") {
	Rng rng(21);
	Tensor f = rand_tensor({1, 3, 6, 7}, rng);
	std::uniform_real_distribution<double> u(0.0, 1.0);
	for (int trial = 0; trial < 20; ++trial) {
		const int y1 = trial % 5, x = trial % 7;
		const double a = u(rng);
		const auto mix = bilinear_sample(f, 0, a * y1 + (1 - a) * (y1 + 1), x);
		const auto s1 = bilinear_sample(f, 0, y1, x), s2 = bilinear_sample(f, 0, y1 + 1, x);
		for (int c = 0; c < 3; ++c) CHECK(mix[c] == doctest::Approx(a * s1[c] + (1 - a) * s2[c]).epsilon(1e-13));
	}
}

TEST_CASE("deform_conv2d with zero offsets is an ordinary convolution") {
	Rng rng(22);
	Tensor x = rand_tensor({2, 3, 6, 5}, rng);
	Tensor w = rand_tensor({4, 3, 3, 3}, rng);
	Tensor b = rand_tensor({4}, rng);
	Tensor y = deform_conv2d(x, offsets_filled(2, 3, 6, 5, 0, 0), w, b, 1, 1);
	Tensor ref = ops::conv2d(x, w, b, 1, 1);
	REQUIRE(y.shape() == ref.shape());
	for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-12);
}

TEST_CASE("deform_conv2d with a uniform (0, 1) offset convolves the left-shifted input") {
	Rng rng(23);
	const int h = 7, w = 8;
	Tensor x = rand_tensor({1, 2, h, w}, rng);
	Tensor wt = rand_tensor({3, 2, 3, 3}, rng);
	Tensor y = deform_conv2d(x, offsets_filled(1, 3, h, w, 0.0, 1.0), wt, Tensor(), 1, 1);
	Tensor shifted = Tensor::zeros({1, 2, h, w});
	for (int c = 0; c < 2; ++c)
		for (int i = 0; i < h; ++i)
			for (int j = 0; j + 1 < w; ++j)
				shifted[(static_cast<std::size_t>(c) * h + i) * w + j] = x[(static_cast<std::size_t>(c) * h + i) * w + j + 1];
	Tensor ref = ops::conv2d(shifted, wt, Tensor(), 1, 1);
	// column 0 reads x[:, :, -1 + 1] = x[:, :, 0] through the padding, which the shifted copy cannot
	for (int o = 0; o < 3; ++o)
		for (int i = 0; i < h; ++i)
			for (int j = 1; j < w; ++j) {
				const std::size_t idx = (static_cast<std::size_t>(o) * h + i) * w + j;
				CHECK(std::abs(y[idx] - ref[idx]) < 1e-12);
			}
}

TEST_CASE("deform_conv2d matches direct loops for random fractional offsets") {
	Rng rng(24);
	Tensor x = rand_tensor({2, 3, 5, 6}, rng);
	Tensor off = rand_tensor({2, 18, 5, 6}, rng, -2.0, 2.0);
	Tensor w = rand_tensor({4, 3, 3, 3}, rng);
	Tensor y = deform_conv2d(x, off, w, Tensor(), 1, 1);
	auto ref = oracle::deform_conv2d(x, off, w, 1);
	REQUIRE(ref.size() == y.numel());
	for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("deform_conv2d gradients for input, weights and offsets on 5x5 fixtures") {
	Rng rng(25);
	for (int trial = 0; trial < 3; ++trial) {
		Tensor x = rand_tensor({1, 1 + trial, 5, 5}, rng);
		Tensor off = rand_tensor({1, 18, 5, 5}, rng, -1.5, 1.5);
		Tensor w = rand_tensor({2, 1 + trial, 3, 3}, rng);
		Tensor b = rand_tensor({2}, rng);
		CHECK(check_all([&] { return readout(deform_conv2d(x, off, w, b, 1, 1)); }, {x, off, w, b}) < 1e-3);
	}
}

TEST_CASE("deform_conv2d shape errors") {
	Rng rng(26);
	Tensor x = rand_tensor({1, 2, 5, 5}, rng);
	Tensor w = rand_tensor({3, 2, 3, 3}, rng);
	CHECK_THROWS_AS(deform_conv2d(x, Tensor::zeros({1, 16, 5, 5}), w, Tensor(), 1, 1), ShapeError);
	CHECK_THROWS_AS(deform_conv2d(x, Tensor::zeros({1, 18, 4, 5}), w, Tensor(), 1, 1), ShapeError);
	CHECK_THROWS_AS(deform_conv2d(x, Tensor::zeros({1, 8, 5, 5}), rand_tensor({3, 2, 2, 2}, rng), Tensor(), 1, 1),
	                InvalidArgument);
}

TEST_CASE("dynamic feature transform: shape, zero-init equals two plain conv layers") {
	Rng rng(27);
	DynamicFeatureTransform dft(16, rng);
	Tensor x = rand_tensor({1, 16, 5, 5}, rng);
	Tensor y = dft.forward(x);
	CHECK(y.shape() == x.shape());
	auto plain = [](const DeformConvLayer& l, const Tensor& in) {
		const Tensor c = ops::conv2d(in, l.weight(), Tensor(), 1, 1);
		return ops::silu(ops::group_norm(c, l.norm().groups, l.norm().gamma, l.norm().beta));
	};
	Tensor ref = plain(dft.second(), plain(dft.first(), x));
	for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-12);
	// 128 channels at 5x5 keeps its shape as well
	DynamicFeatureTransform wide(128, rng);
	CHECK(wide.forward(rand_tensor({1, 128, 5, 5}, rng)).shape() == Shape{1, 128, 5, 5});
}

TEST_CASE("dynamic feature transform gradient spot checks with live offsets") {
	Rng rng(28);
	DynamicFeatureTransform dft(4, rng);
	jitter(dft, "deform1.offset", 0.3, rng);
	jitter(dft, "deform2.offset", 0.3, rng);
	Tensor x = rand_tensor({1, 4, 5, 5}, rng);
	std::vector<Tensor> inputs{x};
	for (auto& p : dft.named_parameters()) inputs.push_back(p.tensor);
	CHECK(check_some([&] { return readout(dft.forward(x)); }, inputs, 8, rng) < 1e-2);
}

TEST_CASE("attention rows are probability vectors") {
	Rng rng(29);
	TransformerEnhancement tfe(16, 4, 3, 4, 4, rng);
	AttentionTrace trace;
	tfe.forward(rand_tensor({2, 16, 4, 3}, rng, -3, 3), &trace);
	const int rows = trace.attention.dim(0) * trace.attention.dim(1), t = trace.attention.dim(2);
	CHECK(trace.attention.dim(0) == 2 * 4);
	for (int r = 0; r < rows; ++r) {
		double s = 0;
		for (int j = 0; j < t; ++j) {
			const double p = trace.attention[static_cast<std::size_t>(r) * t + j];
			CHECK(p >= 0.0);
			s += p;
		}
		CHECK(std::abs(s - 1.0) <= 1e-6);
	}
}

TEST_CASE("zeroed attention and MLP leave only the residual path") {
	Rng rng(30);
	TransformerEnhancement tfe(8, 3, 3, 2, 4, rng);
	zero_matching(tfe, {"q.", "k.", "v.", "proj.", "fc1.", "fc2."});
	Tensor x = rand_tensor({2, 8, 3, 3}, rng);
	// the positional embedding still rides along on the residual
	Tensor y = tfe.forward(x);
	const Tensor pos = tfe.named_parameters()[0].tensor;
	REQUIRE(tfe.named_parameters()[0].path == "pos_embed");
	for (int b = 0; b < 2; ++b)
		for (int c = 0; c < 8; ++c)
			for (int p = 0; p < 9; ++p) {
				const std::size_t i = (static_cast<std::size_t>(b) * 8 + c) * 9 + p;
				CHECK(y[i] == doctest::Approx(x[i] + pos[static_cast<std::size_t>(p) * 8 + c]).epsilon(1e-14));
			}
	zero_matching(tfe, {"pos_embed"});
	Tensor y0 = tfe.forward(x);
	for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y0[i] == x[i]);
}

TEST_CASE("a single token attends only to itself") {
	Rng rng(31);
	TransformerEnhancement tfe(8, 1, 1, 2, 2, rng);
	AttentionTrace trace;
	Tensor x = rand_tensor({3, 8, 1, 1}, rng);
	tfe.forward(x, &trace);
	for (double p : trace.attention.data()) CHECK(p == doctest::Approx(1.0).epsilon(1e-15));
	REQUIRE(trace.context.numel() == trace.values.numel());
	for (std::size_t i = 0; i < trace.values.numel(); ++i)
		CHECK(trace.context[i] == doctest::Approx(trace.values[i]).epsilon(1e-14));
}

TEST_CASE("transformer block configuration and input checks") {
	Rng rng(32);
	CHECK_THROWS_AS(TransformerEnhancement(10, 2, 2, 4, 4, rng), ConfigError);
	TransformerEnhancement tfe(8, 2, 2, 2, 4, rng);
	CHECK_THROWS_AS(tfe.forward(rand_tensor({1, 8, 3, 3}, rng)), ShapeError);
}

TEST_CASE("DTFE: composition, determinism, batch permutation, gradients") {
	Rng rng(33);
	Dtfe block(8, 3, 3, 2, 2, rng);
	// zero offsets sit on bilinear kinks where only one-sided derivatives exist,
	// so move both predictors off zero before any finite-difference check
	jitter(block, "dft.deform1.offset", 0.3, rng);
	jitter(block, "dft.deform2.offset", 0.3, rng);
	Tensor x = rand_tensor({2, 8, 3, 3}, rng);
	Tensor y = block.forward(x);
	CHECK(y.shape() == x.shape());
	Tensor composed = block.tfe().forward(block.dft().forward(x));
	Tensor again = block.forward(x);
	for (std::size_t i = 0; i < y.numel(); ++i) {
		CHECK(y[i] == composed[i]);
		CHECK(y[i] == again[i]);
	}
	// swap the two batch items
	const std::size_t half = x.numel() / 2;
	Tensor swapped = Tensor::zeros(x.shape());
	for (std::size_t i = 0; i < half; ++i) {
		swapped[i] = x[i + half];
		swapped[i + half] = x[i];
	}
	Tensor ys = block.forward(swapped);
	for (std::size_t i = 0; i < half; ++i) {
		CHECK(ys[i] == doctest::Approx(y[i + half]).epsilon(1e-12));
		CHECK(ys[i + half] == doctest::Approx(y[i]).epsilon(1e-12));
	}
	std::vector<Tensor> inputs{x};
	for (auto& p : block.named_parameters()) inputs.push_back(p.tensor);
	CHECK(check_some([&] { return readout(block.forward(x)); }, inputs, 8, rng) < 1e-2);
}
