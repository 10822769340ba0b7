#include "fogdet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fogdet::ops {

using autograd::make_result;
using autograd::wants_grad;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
	if (a.shape() != b.shape()) {
		throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
	}
}

void require_ndim(const Tensor& x, int n, const char* op) {
	if (x.ndim() != n) {
		throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d tensor, got " + shape_str(x.shape()));
	}
}

// Elementwise unary op given f(x) and f'(x, y).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D df) {
	std::vector<double> out(x.numel());
	const auto in = x.data();
	for (std::size_t i = 0; i < out.size(); ++i) {
		out[i] = f(in[i]);
	}
	return make_result(x.shape(), std::move(out), {x}, [df](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) {
			return;
		}
		double* g = p->grad_buffer();
		for (std::size_t i = 0; i < self.data.size(); ++i) {
			g[i] += self.grad[i] * df(p->data[i], self.data[i]);
		}
	});
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "add");
	std::vector<double> out(a.numel());
	std::transform(a.data().begin(), a.data().end(), b.data().begin(), out.begin(), std::plus<>());
	return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
		for (auto& p : self.parents) {
			if (wants_grad(p)) {
				double* g = p->grad_buffer();
				for (std::size_t i = 0; i < self.grad.size(); ++i) {
					g[i] += self.grad[i];
				}
			}
		}
	});
}

Tensor sub(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "sub");
	std::vector<double> out(a.numel());
	std::transform(a.data().begin(), a.data().end(), b.data().begin(), out.begin(), std::minus<>());
	return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
		for (int k = 0; k < 2; ++k) {
			auto& p = self.parents[static_cast<std::size_t>(k)];
			if (wants_grad(p)) {
				const double sign = k == 0 ? 1.0 : -1.0;
				double* g = p->grad_buffer();
				for (std::size_t i = 0; i < self.grad.size(); ++i) {
					g[i] += sign * self.grad[i];
				}
			}
		}
	});
}

Tensor mul(const Tensor& a, const Tensor& b) {
	require_same_shape(a, b, "mul");
	std::vector<double> out(a.numel());
	std::transform(a.data().begin(), a.data().end(), b.data().begin(), out.begin(), std::multiplies<>());
	return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
		auto& pa = self.parents[0];
		auto& pb = self.parents[1];
		if (wants_grad(pa)) {
			double* g = pa->grad_buffer();
			for (std::size_t i = 0; i < self.grad.size(); ++i) {
				g[i] += self.grad[i] * pb->data[i];
			}
		}
		if (wants_grad(pb)) {
			double* g = pb->grad_buffer();
			for (std::size_t i = 0; i < self.grad.size(); ++i) {
				g[i] += self.grad[i] * pa->data[i];
			}
		}
	});
}

Tensor scale(const Tensor& x, double factor) {
	return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
	return unary(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
	const Shape& sa = a.shape();
	Shape core = b.shape();
	while (!core.empty() && core.front() == 1 && core.size() > 1) {
		core.erase(core.begin());
	}
	const bool fits = core.size() <= sa.size() && std::equal(core.begin(), core.end(), sa.end() - static_cast<long>(core.size()));
	if (!fits) {
		throw ShapeError("add_broadcast: " + shape_str(b.shape()) + " does not broadcast to " + shape_str(sa));
	}
	const std::size_t period = b.numel();
	std::vector<double> out(a.data().begin(), a.data().end());
	for (std::size_t i = 0; i < out.size(); ++i) {
		out[i] += b[i % period];
	}
	return make_result(sa, std::move(out), {a, b}, [period](TensorImpl& self) {
		auto& pa = self.parents[0];
		auto& pb = self.parents[1];
		if (wants_grad(pa)) {
			double* g = pa->grad_buffer();
			for (std::size_t i = 0; i < self.grad.size(); ++i) {
				g[i] += self.grad[i];
			}
		}
		if (wants_grad(pb)) {
			double* g = pb->grad_buffer();
			for (std::size_t i = 0; i < self.grad.size(); ++i) {
				g[i % period] += self.grad[i];
			}
		}
	});
}

Tensor sigmoid(const Tensor& x) {
	return unary(
	    x, [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
	    [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
	return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor silu(const Tensor& x) {
	return unary(
	    x,
	    [](double v) { return v / (1.0 + std::exp(-v)); },
	    [](double v, double) {
		    const double s = 1.0 / (1.0 + std::exp(-v));
		    return s * (1.0 + v * (1.0 - s));
	    });
}

Tensor gelu(const Tensor& x) {
	constexpr double inv_sqrt2 = 0.70710678118654752440;
	constexpr double inv_sqrt2pi = 0.39894228040143267794;
	return unary(
	    x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
	    [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

Tensor sum(const Tensor& x) {
	const double total = std::accumulate(x.data().begin(), x.data().end(), 0.0);
	return make_result({1}, {total}, {x}, [](TensorImpl& self) {
		auto& p = self.parents[0];
		if (wants_grad(p)) {
			double* g = p->grad_buffer();
			for (std::size_t i = 0; i < p->data.size(); ++i) {
				g[i] += self.grad[0];
			}
		}
	});
}

Tensor mean(const Tensor& x) {
	if (x.numel() == 0) {
		throw ShapeError("mean of empty tensor");
	}
	return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
	if (weights.size() != x.numel()) {
		throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " + shape_str(x.shape()));
	}
	double total = 0.0;
	for (std::size_t i = 0; i < weights.size(); ++i) {
		total += weights[i] * x[i];
	}
	std::vector<double> w(weights.begin(), weights.end());
	return make_result({1}, {total}, {x}, [w = std::move(w)](TensorImpl& self) {
		auto& p = self.parents[0];
		if (wants_grad(p)) {
			double* g = p->grad_buffer();
			for (std::size_t i = 0; i < w.size(); ++i) {
				g[i] += self.grad[0] * w[i];
			}
		}
	});
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
	require_same_shape(pred, target, "mse_loss");
	const std::size_t n = pred.numel();
	if (n == 0) {
		throw ShapeError("mse_loss on empty tensors");
	}
	double acc = 0.0;
	for (std::size_t i = 0; i < n; ++i) {
		const double d = pred[i] - target[i];
		acc += d * d;
	}
	return make_result({1}, {acc / static_cast<double>(n)}, {pred, target}, [n](TensorImpl& self) {
		auto& pp = self.parents[0];
		auto& pt = self.parents[1];
		const double c = 2.0 * self.grad[0] / static_cast<double>(n);
		if (wants_grad(pp)) {
			double* g = pp->grad_buffer();
			for (std::size_t i = 0; i < n; ++i) {
				g[i] += c * (pp->data[i] - pt->data[i]);
			}
		}
		if (wants_grad(pt)) {
			double* g = pt->grad_buffer();
			for (std::size_t i = 0; i < n; ++i) {
				g[i] -= c * (pp->data[i] - pt->data[i]);
			}
		}
	});
}

Tensor reshape(const Tensor& x, Shape shape) {
	if (shape_numel(shape) != x.numel()) {
		throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
	}
	std::vector<double> out(x.data().begin(), x.data().end());
	return make_result(std::move(shape), std::move(out), {x}, [](TensorImpl& self) {
		auto& p = self.parents[0];
		if (wants_grad(p)) {
			double* g = p->grad_buffer();
			for (std::size_t i = 0; i < self.grad.size(); ++i) {
				g[i] += self.grad[i];
			}
		}
	});
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
	if (parts.empty()) {
		throw ShapeError("concat_channels of nothing");
	}
	const Tensor& first = parts.front();
	require_ndim(first, 4, "concat_channels");
	const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
	int total_c = 0;
	std::vector<int> offsets;
	for (const Tensor& p : parts) {
		require_ndim(p, 4, "concat_channels");
		if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
			throw ShapeError("concat_channels: " + shape_str(p.shape()) + " vs " + shape_str(first.shape()));
		}
		offsets.push_back(total_c);
		total_c += p.dim(1);
	}
	const std::size_t plane = static_cast<std::size_t>(h) * w;
	std::vector<double> out(static_cast<std::size_t>(n) * total_c * plane);
	for (std::size_t k = 0; k < parts.size(); ++k) {
		const int c = parts[k].dim(1);
		const auto src = parts[k].data();
		for (int b = 0; b < n; ++b) {
			std::copy_n(src.begin() + static_cast<long>(static_cast<std::size_t>(b) * c * plane), c * plane,
			            out.begin() + static_cast<long>((static_cast<std::size_t>(b) * total_c + offsets[k]) * plane));
		}
	}
	std::vector<int> channels;
	for (const Tensor& p : parts) {
		channels.push_back(p.dim(1));
	}
	return make_result({n, total_c, h, w}, std::move(out), parts,
	                   [offsets, channels, n, total_c, plane](TensorImpl& self) {
		                   for (std::size_t k = 0; k < self.parents.size(); ++k) {
			                   auto& p = self.parents[k];
			                   if (!wants_grad(p)) {
				                   continue;
			                   }
			                   double* g = p->grad_buffer();
			                   const std::size_t c = static_cast<std::size_t>(channels[k]);
			                   for (int b = 0; b < n; ++b) {
				                   const double* src = self.grad.data() + (static_cast<std::size_t>(b) * total_c + offsets[k]) * plane;
				                   double* dst = g + static_cast<std::size_t>(b) * c * plane;
				                   for (std::size_t i = 0; i < c * plane; ++i) {
					                   dst[i] += src[i];
				                   }
			                   }
		                   }
	                   });
}

Tensor slice_channels(const Tensor& x, int begin, int end) {
	require_ndim(x, 4, "slice_channels");
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	if (begin < 0 || end > c || begin >= end) {
		throw ShapeError("slice_channels [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
	}
	const int oc = end - begin;
	const std::size_t plane = static_cast<std::size_t>(h) * w;
	std::vector<double> out(static_cast<std::size_t>(n) * oc * plane);
	const auto src = x.data();
	for (int b = 0; b < n; ++b) {
		std::copy_n(src.begin() + static_cast<long>((static_cast<std::size_t>(b) * c + begin) * plane), oc * plane,
		            out.begin() + static_cast<long>(static_cast<std::size_t>(b) * oc * plane));
	}
	return make_result({n, oc, h, w}, std::move(out), {x}, [n, c, oc, begin, plane](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) {
			return;
		}
		double* g = p->grad_buffer();
		for (int b = 0; b < n; ++b) {
			const double* src = self.grad.data() + static_cast<std::size_t>(b) * oc * plane;
			double* dst = g + (static_cast<std::size_t>(b) * c + begin) * plane;
			for (std::size_t i = 0; i < oc * plane; ++i) {
				dst[i] += src[i];
			}
		}
	});
}

namespace {

// Generic 3-axis permutation used by the token/head reshuffles. `perm_index`
// maps an output flat index to the input flat index.
Tensor permute_copy(const Tensor& x, Shape out_shape, std::vector<std::size_t> index_map) {
	std::vector<double> out(index_map.size());
	const auto src = x.data();
	for (std::size_t i = 0; i < out.size(); ++i) {
		out[i] = src[index_map[i]];
	}
	return make_result(std::move(out_shape), std::move(out), {x}, [map = std::move(index_map)](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) {
			return;
		}
		double* g = p->grad_buffer();
		for (std::size_t i = 0; i < map.size(); ++i) {
			g[map[i]] += self.grad[i];
		}
	});
}

} // namespace

Tensor to_tokens(const Tensor& x) {
	require_ndim(x, 4, "to_tokens");
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	const std::size_t t = static_cast<std::size_t>(h) * w;
	std::vector<std::size_t> map(x.numel());
	std::size_t o = 0;
	for (int b = 0; b < n; ++b) {
		for (std::size_t tok = 0; tok < t; ++tok) {
			for (int ch = 0; ch < c; ++ch) {
				map[o++] = (static_cast<std::size_t>(b) * c + ch) * t + tok;
			}
		}
	}
	return permute_copy(x, {n, static_cast<int>(t), c}, std::move(map));
}

Tensor from_tokens(const Tensor& tokens, int height, int width) {
	require_ndim(tokens, 3, "from_tokens");
	const int n = tokens.dim(0), t = tokens.dim(1), c = tokens.dim(2);
	if (t != height * width) {
		throw ShapeError("from_tokens: " + std::to_string(t) + " tokens for " + std::to_string(height) + "x" + std::to_string(width));
	}
	std::vector<std::size_t> map(tokens.numel());
	std::size_t o = 0;
	for (int b = 0; b < n; ++b) {
		for (int ch = 0; ch < c; ++ch) {
			for (int tok = 0; tok < t; ++tok) {
				map[o++] = (static_cast<std::size_t>(b) * t + tok) * c + ch;
			}
		}
	}
	return permute_copy(tokens, {n, c, height, width}, std::move(map));
}

Tensor split_heads(const Tensor& x, int heads) {
	require_ndim(x, 3, "split_heads");
	const int n = x.dim(0), t = x.dim(1), c = x.dim(2);
	if (heads <= 0 || c % heads != 0) {
		throw ConfigError("split_heads: width " + std::to_string(c) + " not divisible by " + std::to_string(heads) + " heads");
	}
	const int d = c / heads;
	std::vector<std::size_t> map(x.numel());
	std::size_t o = 0;
	for (int b = 0; b < n; ++b) {
		for (int hd = 0; hd < heads; ++hd) {
			for (int tok = 0; tok < t; ++tok) {
				for (int k = 0; k < d; ++k) {
					map[o++] = (static_cast<std::size_t>(b) * t + tok) * c + hd * d + k;
				}
			}
		}
	}
	return permute_copy(x, {n * heads, t, d}, std::move(map));
}

Tensor merge_heads(const Tensor& x, int heads) {
	require_ndim(x, 3, "merge_heads");
	const int nh = x.dim(0), t = x.dim(1), d = x.dim(2);
	if (heads <= 0 || nh % heads != 0) {
		throw ShapeError("merge_heads: leading dim " + std::to_string(nh) + " not divisible by " + std::to_string(heads));
	}
	const int n = nh / heads;
	const int c = d * heads;
	std::vector<std::size_t> map(x.numel());
	std::size_t o = 0;
	for (int b = 0; b < n; ++b) {
		for (int tok = 0; tok < t; ++tok) {
			for (int hd = 0; hd < heads; ++hd) {
				for (int k = 0; k < d; ++k) {
					map[o++] = ((static_cast<std::size_t>(b) * heads + hd) * t + tok) * d + k;
				}
			}
		}
	}
	return permute_copy(x, {n, t, c}, std::move(map));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
	require_ndim(weight, 2, "linear");
	const int out_f = weight.dim(0), in_f = weight.dim(1);
	if (x.ndim() < 1 || x.dim(-1) != in_f) {
		throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
	}
	if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_f)) {
		throw ShapeError("linear: bias " + shape_str(bias.shape()));
	}
	const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in_f));
	Shape out_shape = x.shape();
	out_shape.back() = out_f;
	std::vector<double> out(static_cast<std::size_t>(rows) * out_f, 0.0);
	if (bias.defined()) {
		for (int r = 0; r < rows; ++r) {
			std::copy(bias.data().begin(), bias.data().end(), out.begin() + static_cast<long>(r) * out_f);
		}
	}
	detail::gemm(false, true, rows, out_f, in_f, 1.0, x.data().data(), weight.data().data(), 1.0, out.data());
	return make_result(std::move(out_shape), std::move(out), {x, weight, bias}, [rows, in_f, out_f](TensorImpl& self) {
		auto& px = self.parents[0];
		auto& pw = self.parents[1];
		auto& pb = self.parents[2];
		const double* gy = self.grad.data();
		if (wants_grad(px)) {
			detail::gemm(false, false, rows, in_f, out_f, 1.0, gy, pw->data.data(), 1.0, px->grad_buffer());
		}
		if (wants_grad(pw)) {
			detail::gemm(true, false, out_f, in_f, rows, 1.0, gy, px->data.data(), 1.0, pw->grad_buffer());
		}
		if (wants_grad(pb)) {
			double* g = pb->grad_buffer();
			for (int r = 0; r < rows; ++r) {
				for (int o = 0; o < out_f; ++o) {
					g[o] += gy[static_cast<std::size_t>(r) * out_f + o];
				}
			}
		}
	});
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
	require_ndim(a, 3, "bmm");
	require_ndim(b, 3, "bmm");
	const int groups = a.dim(0), m = a.dim(1), k = a.dim(2);
	const int n = transpose_b ? b.dim(1) : b.dim(2);
	const int kb = transpose_b ? b.dim(2) : b.dim(1);
	if (b.dim(0) != groups || kb != k) {
		throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + (transpose_b ? "^T" : ""));
	}
	const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
	                  sc = static_cast<std::size_t>(m) * n;
	std::vector<double> out(static_cast<std::size_t>(groups) * sc, 0.0);
	for (int g = 0; g < groups; ++g) {
		detail::gemm(false, transpose_b, m, n, k, 1.0, a.data().data() + g * sa, b.data().data() + g * sb, 0.0,
		             out.data() + g * sc);
	}
	return make_result({groups, m, n}, std::move(out), {a, b},
	                   [groups, m, n, k, sa, sb, sc, transpose_b](TensorImpl& self) {
		                   auto& pa = self.parents[0];
		                   auto& pb = self.parents[1];
		                   for (int g = 0; g < groups; ++g) {
			                   const double* gy = self.grad.data() + g * sc;
			                   if (wants_grad(pa)) {
				                   // dA = dY B^T (B stored KxN) or dY B (B stored NxK)
				                   detail::gemm(false, !transpose_b, m, k, n, 1.0, gy, pb->data.data() + g * sb, 1.0,
				                                pa->grad_buffer() + g * sa);
			                   }
			                   if (wants_grad(pb)) {
				                   if (transpose_b) {
					                   // B is NxK: dB = dY^T A
					                   detail::gemm(true, false, n, k, m, 1.0, gy, pa->data.data() + g * sa, 1.0,
					                                pb->grad_buffer() + g * sb);
				                   } else {
					                   detail::gemm(true, false, k, n, m, 1.0, pa->data.data() + g * sa, gy, 1.0,
					                                pb->grad_buffer() + g * sb);
				                   }
			                   }
		                   }
	                   });
}

Tensor softmax_lastdim(const Tensor& x) {
	const int d = x.dim(-1);
	const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
	std::vector<double> out(x.numel());
	const auto in = x.data();
	for (std::size_t r = 0; r < rows; ++r) {
		const double* src = in.data() + r * d;
		double* dst = out.data() + r * d;
		const double mx = *std::max_element(src, src + d);
		double z = 0.0;
		for (int i = 0; i < d; ++i) {
			dst[i] = std::exp(src[i] - mx);
			z += dst[i];
		}
		for (int i = 0; i < d; ++i) {
			dst[i] /= z;
		}
	}
	return make_result(x.shape(), std::move(out), {x}, [rows, d](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) {
			return;
		}
		double* g = p->grad_buffer();
		for (std::size_t r = 0; r < rows; ++r) {
			const double* y = self.data.data() + r * d;
			const double* gy = self.grad.data() + r * d;
			double dot = 0.0;
			for (int i = 0; i < d; ++i) {
				dot += y[i] * gy[i];
			}
			for (int i = 0; i < d; ++i) {
				g[r * d + i] += y[i] * (gy[i] - dot);
			}
		}
	});
}

namespace {

// Normalised activations and per-block 1/sigma kept for the backward pass.
struct NormSaved {
	std::vector<double> xhat;
	std::vector<double> inv_std;
};

} // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
	const int d = x.dim(-1);
	if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d)) {
		throw ShapeError("layer_norm: affine size vs " + shape_str(x.shape()));
	}
	const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
	auto saved = std::make_shared<NormSaved>();
	saved->xhat.resize(x.numel());
	saved->inv_std.resize(rows);
	std::vector<double> out(x.numel());
	for (std::size_t r = 0; r < rows; ++r) {
		const double* src = x.data().data() + r * d;
		double mu = 0.0;
		for (int i = 0; i < d; ++i) {
			mu += src[i];
		}
		mu /= d;
		double var = 0.0;
		for (int i = 0; i < d; ++i) {
			var += (src[i] - mu) * (src[i] - mu);
		}
		var /= d;
		const double inv = 1.0 / std::sqrt(var + eps);
		saved->inv_std[r] = inv;
		for (int i = 0; i < d; ++i) {
			const double xh = (src[i] - mu) * inv;
			saved->xhat[r * d + i] = xh;
			out[r * d + i] = xh * gamma[static_cast<std::size_t>(i)] + beta[static_cast<std::size_t>(i)];
		}
	}
	return make_result(x.shape(), std::move(out), {x, gamma, beta}, [saved, rows, d](TensorImpl& self) {
		auto& px = self.parents[0];
		auto& pg = self.parents[1];
		auto& pb = self.parents[2];
		const double* gy = self.grad.data();
		if (wants_grad(pg) || wants_grad(pb)) {
			double* gg = wants_grad(pg) ? pg->grad_buffer() : nullptr;
			double* gb = wants_grad(pb) ? pb->grad_buffer() : nullptr;
			for (std::size_t r = 0; r < rows; ++r) {
				for (int i = 0; i < d; ++i) {
					if (gg) gg[i] += gy[r * d + i] * saved->xhat[r * d + i];
					if (gb) gb[i] += gy[r * d + i];
				}
			}
		}
		if (wants_grad(px)) {
			double* gx = px->grad_buffer();
			for (std::size_t r = 0; r < rows; ++r) {
				double s1 = 0.0, s2 = 0.0;
				for (int i = 0; i < d; ++i) {
					const double dxh = gy[r * d + i] * pg->data[static_cast<std::size_t>(i)];
					s1 += dxh;
					s2 += dxh * saved->xhat[r * d + i];
				}
				for (int i = 0; i < d; ++i) {
					const double dxh = gy[r * d + i] * pg->data[static_cast<std::size_t>(i)];
					gx[r * d + i] += saved->inv_std[r] / d * (d * dxh - s1 - saved->xhat[r * d + i] * s2);
				}
			}
		}
	});
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
	require_ndim(x, 4, "group_norm");
	const int n = x.dim(0), c = x.dim(1);
	if (groups <= 0 || c % groups != 0) {
		throw ConfigError("group_norm: " + std::to_string(c) + " channels in " + std::to_string(groups) + " groups");
	}
	if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c)) {
		throw ShapeError("group_norm: affine size vs " + shape_str(x.shape()));
	}
	const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
	const int cpg = c / groups;
	const std::size_t block = cpg * plane;
	const std::size_t blocks = static_cast<std::size_t>(n) * groups;
	auto saved = std::make_shared<NormSaved>();
	saved->xhat.resize(x.numel());
	saved->inv_std.resize(blocks);
	std::vector<double> out(x.numel());
	for (std::size_t bk = 0; bk < blocks; ++bk) {
		const double* src = x.data().data() + bk * block;
		double mu = 0.0;
		for (std::size_t i = 0; i < block; ++i) {
			mu += src[i];
		}
		mu /= static_cast<double>(block);
		double var = 0.0;
		for (std::size_t i = 0; i < block; ++i) {
			var += (src[i] - mu) * (src[i] - mu);
		}
		var /= static_cast<double>(block);
		const double inv = 1.0 / std::sqrt(var + eps);
		saved->inv_std[bk] = inv;
		const int g = static_cast<int>(bk % groups);
		for (std::size_t i = 0; i < block; ++i) {
			const std::size_t ch = static_cast<std::size_t>(g * cpg) + i / plane;
			const double xh = (src[i] - mu) * inv;
			saved->xhat[bk * block + i] = xh;
			out[bk * block + i] = xh * gamma[ch] + beta[ch];
		}
	}
	return make_result(x.shape(), std::move(out), {x, gamma, beta},
	                   [saved, blocks, block, groups, cpg, plane](TensorImpl& self) {
		                   auto& px = self.parents[0];
		                   auto& pg = self.parents[1];
		                   auto& pb = self.parents[2];
		                   const double* gy = self.grad.data();
		                   double* gg = wants_grad(pg) ? pg->grad_buffer() : nullptr;
		                   double* gb = wants_grad(pb) ? pb->grad_buffer() : nullptr;
		                   double* gx = wants_grad(px) ? px->grad_buffer() : nullptr;
		                   const double m = static_cast<double>(block);
		                   for (std::size_t bk = 0; bk < blocks; ++bk) {
			                   const int g = static_cast<int>(bk % groups);
			                   double s1 = 0.0, s2 = 0.0;
			                   for (std::size_t i = 0; i < block; ++i) {
				                   const std::size_t ch = static_cast<std::size_t>(g * cpg) + i / plane;
				                   const std::size_t idx = bk * block + i;
				                   if (gg) gg[ch] += gy[idx] * saved->xhat[idx];
				                   if (gb) gb[ch] += gy[idx];
				                   const double dxh = gy[idx] * pg->data[ch];
				                   s1 += dxh;
				                   s2 += dxh * saved->xhat[idx];
			                   }
			                   if (!gx) {
				                   continue;
			                   }
			                   const double inv = saved->inv_std[bk];
			                   for (std::size_t i = 0; i < block; ++i) {
				                   const std::size_t ch = static_cast<std::size_t>(g * cpg) + i / plane;
				                   const std::size_t idx = bk * block + i;
				                   const double dxh = gy[idx] * pg->data[ch];
				                   gx[idx] += inv / m * (m * dxh - s1 - saved->xhat[idx] * s2);
			                   }
		                   }
	                   });
}

} // namespace fogdet::ops
