#include <doctest.h>

#include <random>

#include "fogdet/ops.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace fogdet;

using testing::check_all;
using testing::rand_tensor;
using testing::readout;

TEST_CASE("conv2d matches direct loops, with and without padding/stride") {
	Rng rng(1);
	for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, std::tuple{2, 1, 3}, std::tuple{1, 0, 1}, std::tuple{2, 0, 2}}) {
		Tensor x = rand_tensor({2, 3, 7, 6}, rng);
		Tensor w = rand_tensor({4, 3, k, k}, rng);
		Tensor b = rand_tensor({4}, rng);
		Tensor y = ops::conv2d(x, w, b, stride, pad);
		int oh = 0, ow = 0;
		auto ref = oracle::conv2d(x, w, std::vector<double>(b.data().begin(), b.data().end()), stride, pad, oh, ow);
		REQUIRE(y.shape() == Shape{2, 4, oh, ow});
		for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
	}
}

TEST_CASE("conv2d gradients") {
	Rng rng(2);
	Tensor x = rand_tensor({2, 2, 5, 5}, rng);
	Tensor w = rand_tensor({3, 2, 3, 3}, rng);
	Tensor b = rand_tensor({3}, rng);
	CHECK(check_all([&] { return readout(ops::conv2d(x, w, b, 2, 1)); }, {x, w, b}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::conv2d(x, w, b, 1, 1)); }, {x, w, b}) < 1e-6);
}

TEST_CASE("conv_transpose2d gradients and output size") {
	Rng rng(3);
	Tensor x = rand_tensor({1, 3, 3, 4}, rng);
	Tensor w = rand_tensor({3, 2, 4, 4}, rng);
	Tensor b = rand_tensor({2}, rng);
	Tensor y = ops::conv_transpose2d(x, w, b, 2, 1);
	CHECK(y.shape() == Shape{1, 2, 6, 8});
	CHECK(check_all([&] { return readout(ops::conv_transpose2d(x, w, b, 2, 1)); }, {x, w, b}) < 1e-6);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
	// <conv(x), y> == <x, conv_T(y)> with shared weights and no bias
	Rng rng(4);
	Tensor x = rand_tensor({1, 2, 8, 8}, rng);
	Tensor w = rand_tensor({3, 2, 4, 4}, rng);
	Tensor cx = ops::conv2d(x, w, Tensor(), 2, 1);
	Tensor y = rand_tensor(cx.shape(), rng);
	Tensor ty = ops::conv_transpose2d(y, w, Tensor(), 2, 1);
	double lhs = 0, rhs = 0;
	for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
	for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
	CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("elementwise, activation and reduction gradients") {
	Rng rng(5);
	Tensor a = rand_tensor({2, 3, 4}, rng);
	Tensor b = rand_tensor({2, 3, 4}, rng);
	Tensor p = rand_tensor({3, 4}, rng);
	CHECK(check_all([&] { return readout(ops::mul(ops::add(a, b), ops::sub(a, b))); }, {a, b}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::sigmoid(a)); }, {a}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::tanh(a)); }, {a}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::silu(a)); }, {a}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::gelu(a)); }, {a}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::add_broadcast(a, p)); }, {a, p}) < 1e-6);
	CHECK(check_all([&] { return ops::mean(ops::mul(a, a)); }, {a}) < 1e-6);
	CHECK(check_all([&] { return ops::mse_loss(a, b); }, {a, b}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::add_scalar(ops::scale(a, -2.5), 0.3)); }, {a}) < 1e-6);
}

TEST_CASE("attention building blocks") {
	Rng rng(6);
	Tensor x = rand_tensor({2, 5, 8}, rng);
	Tensor w = rand_tensor({6, 8}, rng);
	Tensor bias = rand_tensor({6}, rng);
	Tensor g = rand_tensor({8}, rng);
	Tensor be = rand_tensor({8}, rng);
	CHECK(check_all([&] { return readout(ops::linear(x, w, bias)); }, {x, w, bias}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::layer_norm(x, g, be)); }, {x, g, be}) < 1e-5);
	CHECK(check_all([&] { return readout(ops::softmax_lastdim(x)); }, {x}) < 1e-6);
	Tensor q = rand_tensor({4, 5, 3}, rng);
	Tensor k = rand_tensor({4, 5, 3}, rng);
	CHECK(check_all([&] { return readout(ops::bmm(q, k, true)); }, {q, k}) < 1e-6);
	Tensor v = rand_tensor({4, 3, 2}, rng);
	CHECK(check_all([&] { return readout(ops::bmm(q, v)); }, {q, v}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::merge_heads(ops::split_heads(x, 2), 2)); }, {x}) < 1e-6);
	// split/merge is an exact round trip
	Tensor round = ops::merge_heads(ops::split_heads(x, 4), 4);
	for (std::size_t i = 0; i < x.numel(); ++i) CHECK(round[i] == x[i]);
	CHECK_THROWS_AS(ops::split_heads(x, 3), ConfigError);
}

TEST_CASE("normalisation, pooling and resampling gradients") {
	Rng rng(7);
	Tensor x = rand_tensor({2, 4, 5, 6}, rng);
	Tensor g = rand_tensor({4}, rng);
	Tensor b = rand_tensor({4}, rng);
	CHECK(check_all([&] { return readout(ops::group_norm(x, 2, g, b)); }, {x, g, b}) < 1e-5);
	CHECK_THROWS_AS(ops::group_norm(x, 3, g, b), ConfigError);
	CHECK(check_all([&] { return readout(ops::avg_pool2d(x, 4)); }, {x}) < 1e-6);
	// piecewise linear, so a wide step is exact away from ties and keeps round-off down
	CHECK(check_all([&] { return readout(ops::max_pool2d(x, 3, 1, 1)); }, {x}, 1e-4) < 1e-6);
	CHECK(check_all([&] { return readout(ops::upsample_nearest(x, 10, 12)); }, {x}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::upsample_bilinear(x, 9, 13)); }, {x}) < 1e-6);
	CHECK(check_all([&] { return readout(ops::concat_channels({x, ops::slice_channels(x, 1, 3)})); }, {x}) < 1e-6);
}

TEST_CASE("avg_pool2d with ceil mode averages only valid cells") {
	Tensor x = Tensor::from_data({1, 1, 5, 5}, std::vector<double>(25, 0.0));
	for (int i = 0; i < 25; ++i) x[static_cast<std::size_t>(i)] = i;
	Tensor y = ops::avg_pool2d(x, 4);
	REQUIRE(y.shape() == Shape{1, 1, 2, 2});
	// bottom-right window holds only (4,4) = 24
	CHECK(y[3] == doctest::Approx(24.0));
	// top-right: column 4 rows 0..3 -> 4, 9, 14, 19
	CHECK(y[1] == doctest::Approx(11.5));
}

TEST_CASE("upsample_bilinear on a constant map stays constant") {
	Tensor x = Tensor::full({1, 2, 3, 3}, 0.7);
	Tensor y = ops::upsample_bilinear(x, 12, 12);
	for (double v : y.data()) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("backward releases the graph and accumulates into leaves") {
	Rng rng(8);
	Tensor a = rand_tensor({3}, rng);
	Tensor y = ops::sum(ops::mul(a, a));
	y.backward();
	for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad()[i] == doctest::Approx(2 * a[i]));
	// a second, independent graph adds on top
	ops::sum(a).backward();
	for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad()[i] == doctest::Approx(2 * a[i] + 1));
	{
		NoGradGuard g;
		CHECK_FALSE(ops::sum(a).requires_grad());
	}
}

TEST_CASE("gemm agrees with a direct sum in every transpose mode at conv-sized shapes") {
	// guards against a mis-selected BLAS kernel, which once made every conv wrong
	Rng rng(9);
	std::uniform_real_distribution<double> u(-1.0, 1.0);
	for (auto [m, n, k] : {std::tuple{32, 1600, 144}, std::tuple{144, 1600, 32}, std::tuple{5, 3, 700}}) {
		std::vector<double> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n);
		for (double& v : a) v = u(rng);
		for (double& v : b) v = u(rng);
		for (int mode = 0; mode < 4; ++mode) {
			const bool ta = mode & 1, tb = mode & 2;
			std::vector<double> c(static_cast<std::size_t>(m) * n, 0.5);
			ops::detail::gemm(ta, tb, m, n, k, 2.0, a.data(), b.data(), -1.0, c.data());
			double worst = 0;
			for (int i = 0; i < m; i += 3)
				for (int j = 0; j < n; j += 7) {
					double ref = 0;
					for (int p = 0; p < k; ++p) {
						const double av = ta ? a[static_cast<std::size_t>(p) * m + i] : a[static_cast<std::size_t>(i) * k + p];
						const double bv = tb ? b[static_cast<std::size_t>(j) * k + p] : b[static_cast<std::size_t>(p) * n + j];
						ref += av * bv;
					}
					worst = std::max(worst, std::abs(2 * ref - 0.5 - c[static_cast<std::size_t>(i) * n + j]));
				}
			CHECK(worst < 1e-10);
		}
	}
	CHECK_FALSE(ops::blas_backend().empty());
}

TEST_CASE("conv2d at a realistic size matches direct loops") {
	Rng rng(10);
	Tensor x = rand_tensor({1, 16, 40, 40}, rng);
	Tensor w = rand_tensor({32, 16, 3, 3}, rng);
	Tensor y = ops::conv2d(x, w, Tensor(), 1, 1);
	int oh = 0, ow = 0;
	auto ref = oracle::conv2d(x, w, {}, 1, 1, oh, ow);
	double worst = 0;
	for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
	CHECK(worst < 1e-10);
}
