#include "fogdet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <cblas.h>

// Runtime core re-selection. Weak, so a static or non-dynamic OpenBLAS still links.
extern "C" {
void gotoblas_dynamic_init(void) __attribute__((weak));
void gotoblas_dynamic_quit(void) __attribute__((weak));
char* openblas_get_corename(void) __attribute__((weak));
}

namespace fogdet::ops {

namespace {

// Some OpenBLAS builds pick a kernel for this CPU that returns wrong products
// (0.3.20 on Cooper Lake parts is one). Everything below exists to catch that.

enum class Backend { Unchecked, OpenBlas, Builtin };

Backend g_backend = Backend::Unchecked;
std::string g_backend_name = "unchecked";
std::once_flag g_once;

double a_at(const double* a, bool t, int m, int k, int i, int p) {
	return t ? a[static_cast<std::size_t>(p) * m + i] : a[static_cast<std::size_t>(i) * k + p];
}
double b_at(const double* b, bool t, int k, int n, int p, int j) {
	return t ? b[static_cast<std::size_t>(j) * k + p] : b[static_cast<std::size_t>(p) * n + j];
}

void cblas(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, const double* b, double beta,
           double* c) {
	cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a,
	            ta ? m : k, b, tb ? k : n, beta, c, n);
}

bool cblas_agrees() {
	struct Case {
		int m, n, k;
	};
	// shapes seen in conv forward / backward at desk scale, plus a tiny one
	const Case cases[] = {{32, 1600, 144}, {144, 1600, 32}, {64, 400, 288}, {7, 13, 5}};
	std::mt19937_64 rng(17);
	std::uniform_real_distribution<double> u(-1.0, 1.0);
	for (const Case& cs : cases) {
		for (int t = 0; t < 4; ++t) {
			const bool ta = t & 1, tb = t & 2;
			std::vector<double> a(static_cast<std::size_t>(cs.m) * cs.k), b(static_cast<std::size_t>(cs.k) * cs.n);
			for (double& v : a) v = u(rng);
			for (double& v : b) v = u(rng);
			std::vector<double> c(static_cast<std::size_t>(cs.m) * cs.n, 0.0);
			cblas(ta, tb, cs.m, cs.n, cs.k, 1.0, a.data(), b.data(), 0.0, c.data());
			// spot-check a stride of entries against the direct sum
			for (std::size_t idx = 0; idx < c.size(); idx += 37) {
				const int i = static_cast<int>(idx) / cs.n, j = static_cast<int>(idx) % cs.n;
				double ref = 0.0;
				for (int p = 0; p < cs.k; ++p) ref += a_at(a.data(), ta, cs.m, cs.k, i, p) * b_at(b.data(), tb, cs.k, cs.n, p, j);
				if (std::abs(ref - c[idx]) > 1e-9 * (1.0 + std::abs(ref))) return false;
			}
		}
	}
	return true;
}

std::string corename() {
	if (openblas_get_corename) {
		if (const char* n = openblas_get_corename()) return n;
	}
	return "?";
}

void choose_backend() {
	if (cblas_agrees()) {
		g_backend = Backend::OpenBlas;
		g_backend_name = "openblas:" + corename();
		return;
	}
	const std::string bad = corename();
	if (gotoblas_dynamic_init && gotoblas_dynamic_quit) {
		const char* prev = std::getenv("OPENBLAS_CORETYPE");
		const std::optional<std::string> saved = prev ? std::optional<std::string>(prev) : std::nullopt;
		for (const char* core : {"SkylakeX", "Haswell", "Sandybridge", "Nehalem"}) {
			setenv("OPENBLAS_CORETYPE", core, 1);
			gotoblas_dynamic_quit();
			gotoblas_dynamic_init();
			if (cblas_agrees()) {
				g_backend = Backend::OpenBlas;
				g_backend_name = "openblas:" + corename();
				std::cerr << "fogdet: OpenBLAS kernel '" << bad << "' failed its self-check; using '" << corename()
				          << "'\n";
				break;
			}
		}
		if (saved) {
			setenv("OPENBLAS_CORETYPE", saved->c_str(), 1);
		} else {
			unsetenv("OPENBLAS_CORETYPE");
		}
	}
	if (g_backend != Backend::OpenBlas) {
		g_backend = Backend::Builtin;
		g_backend_name = "builtin";
		std::cerr << "fogdet: OpenBLAS kernel '" << bad << "' failed its self-check; using the builtin gemm\n";
	}
}

// Row-major C = alpha*A*B + beta*C with A (m,k) and B (k,n) already untransposed.
void builtin_nn(int m, int n, int k, double alpha, const double* a, const double* b, double beta, double* c) {
	const std::size_t mn = static_cast<std::size_t>(m) * n;
	if (beta == 0.0) {
		std::fill_n(c, mn, 0.0);
	} else if (beta != 1.0) {
		for (std::size_t i = 0; i < mn; ++i) c[i] *= beta;
	}
	constexpr int kKb = 128, kNb = 512;
	for (int k0 = 0; k0 < k; k0 += kKb) {
		const int k1 = std::min(k, k0 + kKb);
		for (int j0 = 0; j0 < n; j0 += kNb) {
			const int j1 = std::min(n, j0 + kNb);
			for (int i = 0; i < m; ++i) {
				double* ci = c + static_cast<std::size_t>(i) * n;
				const double* ai = a + static_cast<std::size_t>(i) * k;
				int p = k0;
				for (; p + 3 < k1; p += 4) {
					const double a0 = alpha * ai[p], a1 = alpha * ai[p + 1], a2 = alpha * ai[p + 2], a3 = alpha * ai[p + 3];
					const double* b0 = b + static_cast<std::size_t>(p) * n;
					const double* b1 = b0 + n;
					const double* b2 = b1 + n;
					const double* b3 = b2 + n;
					for (int j = j0; j < j1; ++j) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
				}
				for (; p < k1; ++p) {
					const double ap = alpha * ai[p];
					const double* bp = b + static_cast<std::size_t>(p) * n;
					for (int j = j0; j < j1; ++j) ci[j] += ap * bp[j];
				}
			}
		}
	}
}

void builtin(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, const double* b, double beta,
             double* c) {
	std::vector<double> pa, pb;
	if (ta) {
		pa.resize(static_cast<std::size_t>(m) * k);
		for (int p = 0; p < k; ++p)
			for (int i = 0; i < m; ++i) pa[static_cast<std::size_t>(i) * k + p] = a[static_cast<std::size_t>(p) * m + i];
		a = pa.data();
	}
	if (tb) {
		pb.resize(static_cast<std::size_t>(k) * n);
		for (int j = 0; j < n; ++j)
			for (int p = 0; p < k; ++p) pb[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
		b = pb.data();
	}
	builtin_nn(m, n, k, alpha, a, b, beta, c);
}

void ensure_backend() {
	std::call_once(g_once, choose_backend);
}

} // namespace

namespace detail {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, const double* b,
          double beta, double* c) {
	if (m == 0 || n == 0) {
		return;
	}
	ensure_backend();
	if (g_backend == Backend::OpenBlas) {
		cblas(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
	} else {
		builtin(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
	}
}

} // namespace detail

void set_blas_threads(int threads) {
	ensure_backend();
	openblas_set_num_threads(std::max(1, threads));
}

std::string blas_backend() {
	ensure_backend();
	return g_backend_name;
}

} // namespace fogdet::ops
