#include "fogdet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fogdet::ops {

using autograd::make_result;
using autograd::wants_grad;

namespace detail {

void im2col(const double* img, int channels, int height, int width, int kernel, int stride, int padding, int out_h,
            int out_w, double* col) {
	const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
	for (int c = 0; c < channels; ++c) {
		for (int ky = 0; ky < kernel; ++ky) {
			for (int kx = 0; kx < kernel; ++kx) {
				double* row = col + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * cols;
				for (int oy = 0; oy < out_h; ++oy) {
					const int iy = oy * stride - padding + ky;
					double* dst = row + static_cast<std::size_t>(oy) * out_w;
					if (iy < 0 || iy >= height) {
						std::fill_n(dst, out_w, 0.0);
						continue;
					}
					const double* src = img + (static_cast<std::size_t>(c) * height + iy) * width;
					for (int ox = 0; ox < out_w; ++ox) {
						const int ix = ox * stride - padding + kx;
						dst[ox] = (ix >= 0 && ix < width) ? src[ix] : 0.0;
					}
				}
			}
		}
	}
}

void col2im(const double* col, int channels, int height, int width, int kernel, int stride, int padding, int out_h,
            int out_w, double* img) {
	const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
	for (int c = 0; c < channels; ++c) {
		for (int ky = 0; ky < kernel; ++ky) {
			for (int kx = 0; kx < kernel; ++kx) {
				const double* row = col + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * cols;
				for (int oy = 0; oy < out_h; ++oy) {
					const int iy = oy * stride - padding + ky;
					if (iy < 0 || iy >= height) {
						continue;
					}
					double* dst = img + (static_cast<std::size_t>(c) * height + iy) * width;
					const double* src = row + static_cast<std::size_t>(oy) * out_w;
					for (int ox = 0; ox < out_w; ++ox) {
						const int ix = ox * stride - padding + kx;
						if (ix >= 0 && ix < width) {
							dst[ix] += src[ox];
						}
					}
				}
			}
		}
	}
}

} // namespace detail

namespace {

void require_4d(const Tensor& x, const char* op) {
	if (x.ndim() != 4) {
		throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + shape_str(x.shape()));
	}
}

struct ConvGeometry {
	int n, c, h, w, o, k, out_h, out_w, stride, padding;
	bool pointwise() const { return k == 1 && stride == 1 && padding == 0; }
	std::size_t in_plane() const { return static_cast<std::size_t>(h) * w; }
	std::size_t out_plane() const { return static_cast<std::size_t>(out_h) * out_w; }
	std::size_t patch() const { return static_cast<std::size_t>(c) * k * k; }
};

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
	require_4d(x, "conv2d");
	require_4d(weight, "conv2d weight");
	if (weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3)) {
		throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
	}
	if (stride < 1 || padding < 0) {
		throw InvalidArgument("conv2d: stride must be >= 1 and padding >= 0");
	}
	ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), 0, 0, stride, padding};
	g.out_h = (g.h + 2 * padding - g.k) / stride + 1;
	g.out_w = (g.w + 2 * padding - g.k) / stride + 1;
	if (g.out_h <= 0 || g.out_w <= 0) {
		throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
	}
	if (bias.defined() && bias.numel() != static_cast<std::size_t>(g.o)) {
		throw ShapeError("conv2d: bias " + shape_str(bias.shape()));
	}

	std::vector<double> out(static_cast<std::size_t>(g.n) * g.o * g.out_plane(), 0.0);
	std::vector<double> col(g.pointwise() ? 0 : g.patch() * g.out_plane());
	for (int b = 0; b < g.n; ++b) {
		const double* img = x.data().data() + static_cast<std::size_t>(b) * g.c * g.in_plane();
		const double* cols = img;
		if (!g.pointwise()) {
			detail::im2col(img, g.c, g.h, g.w, g.k, stride, padding, g.out_h, g.out_w, col.data());
			cols = col.data();
		}
		double* dst = out.data() + static_cast<std::size_t>(b) * g.o * g.out_plane();
		if (bias.defined()) {
			for (int o = 0; o < g.o; ++o) {
				std::fill_n(dst + static_cast<std::size_t>(o) * g.out_plane(), g.out_plane(), bias[static_cast<std::size_t>(o)]);
			}
		}
		detail::gemm(false, false, g.o, static_cast<int>(g.out_plane()), static_cast<int>(g.patch()), 1.0,
		             weight.data().data(), cols, 1.0, dst);
	}

	return make_result({g.n, g.o, g.out_h, g.out_w}, std::move(out), {x, weight, bias}, [g](TensorImpl& self) {
		auto& px = self.parents[0];
		auto& pw = self.parents[1];
		auto& pb = self.parents[2];
		const int plane = static_cast<int>(g.out_plane());
		const int patch = static_cast<int>(g.patch());
		std::vector<double> col(g.pointwise() ? 0 : g.patch() * g.out_plane());
		for (int b = 0; b < g.n; ++b) {
			const double* gy = self.grad.data() + static_cast<std::size_t>(b) * g.o * g.out_plane();
			if (wants_grad(pb)) {
				double* gb = pb->grad_buffer();
				for (int o = 0; o < g.o; ++o) {
					double s = 0.0;
					for (int i = 0; i < plane; ++i) {
						s += gy[static_cast<std::size_t>(o) * plane + i];
					}
					gb[o] += s;
				}
			}
			const double* img = px->data.data() + static_cast<std::size_t>(b) * g.c * g.in_plane();
			if (wants_grad(pw)) {
				const double* cols = img;
				if (!g.pointwise()) {
					detail::im2col(img, g.c, g.h, g.w, g.k, g.stride, g.padding, g.out_h, g.out_w, col.data());
					cols = col.data();
				}
				detail::gemm(false, true, g.o, patch, plane, 1.0, gy, cols, 1.0, pw->grad_buffer());
			}
			if (wants_grad(px)) {
				double* gx = px->grad_buffer() + static_cast<std::size_t>(b) * g.c * g.in_plane();
				if (g.pointwise()) {
					detail::gemm(true, false, patch, plane, g.o, 1.0, pw->data.data(), gy, 1.0, gx);
				} else {
					detail::gemm(true, false, patch, plane, g.o, 1.0, pw->data.data(), gy, 0.0, col.data());
					detail::col2im(col.data(), g.c, g.h, g.w, g.k, g.stride, g.padding, g.out_h, g.out_w, gx);
				}
			}
		}
	});
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
	require_4d(x, "conv_transpose2d");
	require_4d(weight, "conv_transpose2d weight");
	if (weight.dim(0) != x.dim(1) || weight.dim(2) != weight.dim(3)) {
		throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
	}
	// Geometry of the equivalent forward conv: its input is our output.
	const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
	const int cout = weight.dim(1), k = weight.dim(2);
	const int out_h = (h - 1) * stride - 2 * padding + k;
	const int out_w = (w - 1) * stride - 2 * padding + k;
	if (out_h <= 0 || out_w <= 0) {
		throw ShapeError("conv_transpose2d: empty output for " + shape_str(x.shape()));
	}
	if (bias.defined() && bias.numel() != static_cast<std::size_t>(cout)) {
		throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape()));
	}
	const std::size_t in_plane = static_cast<std::size_t>(h) * w;
	const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
	const int patch = cout * k * k;

	std::vector<double> out(static_cast<std::size_t>(n) * cout * out_plane, 0.0);
	std::vector<double> col(static_cast<std::size_t>(patch) * in_plane);
	for (int b = 0; b < n; ++b) {
		const double* src = x.data().data() + static_cast<std::size_t>(b) * cin * in_plane;
		detail::gemm(true, false, patch, static_cast<int>(in_plane), cin, 1.0, weight.data().data(), src, 0.0, col.data());
		double* dst = out.data() + static_cast<std::size_t>(b) * cout * out_plane;
		detail::col2im(col.data(), cout, out_h, out_w, k, stride, padding, h, w, dst);
		if (bias.defined()) {
			for (int o = 0; o < cout; ++o) {
				for (std::size_t i = 0; i < out_plane; ++i) {
					dst[o * out_plane + i] += bias[static_cast<std::size_t>(o)];
				}
			}
		}
	}
	return make_result({n, cout, out_h, out_w}, std::move(out), {x, weight, bias},
	                   [=](TensorImpl& self) {
		                   auto& px = self.parents[0];
		                   auto& pw = self.parents[1];
		                   auto& pb = self.parents[2];
		                   std::vector<double> col(static_cast<std::size_t>(patch) * in_plane);
		                   for (int b = 0; b < n; ++b) {
			                   const double* gy = self.grad.data() + static_cast<std::size_t>(b) * cout * out_plane;
			                   if (wants_grad(pb)) {
				                   double* gb = pb->grad_buffer();
				                   for (int o = 0; o < cout; ++o) {
					                   for (std::size_t i = 0; i < out_plane; ++i) {
						                   gb[o] += gy[o * out_plane + i];
					                   }
				                   }
			                   }
			                   if (!wants_grad(px) && !wants_grad(pw)) {
				                   continue;
			                   }
			                   detail::im2col(gy, cout, out_h, out_w, k, stride, padding, h, w, col.data());
			                   if (wants_grad(px)) {
				                   double* gx = px->grad_buffer() + static_cast<std::size_t>(b) * cin * in_plane;
				                   detail::gemm(false, false, cin, static_cast<int>(in_plane), patch, 1.0, pw->data.data(),
				                                col.data(), 1.0, gx);
			                   }
			                   if (wants_grad(pw)) {
				                   const double* src = px->data.data() + static_cast<std::size_t>(b) * cin * in_plane;
				                   detail::gemm(false, true, cin, patch, static_cast<int>(in_plane), 1.0, src, col.data(),
				                                1.0, pw->grad_buffer());
			                   }
		                   }
	                   });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
	require_4d(x, "max_pool2d");
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	const int out_h = (h + 2 * padding - kernel) / stride + 1;
	const int out_w = (w + 2 * padding - kernel) / stride + 1;
	if (out_h <= 0 || out_w <= 0) {
		throw ShapeError("max_pool2d: empty output for " + shape_str(x.shape()));
	}
	std::vector<double> out(static_cast<std::size_t>(n) * c * out_h * out_w);
	std::vector<std::size_t> argmax(out.size());
	const auto src = x.data();
	std::size_t o = 0;
	for (int nc = 0; nc < n * c; ++nc) {
		const std::size_t base = static_cast<std::size_t>(nc) * h * w;
		for (int oy = 0; oy < out_h; ++oy) {
			for (int ox = 0; ox < out_w; ++ox, ++o) {
				double best = -std::numeric_limits<double>::infinity();
				std::size_t best_i = base;
				for (int ky = 0; ky < kernel; ++ky) {
					const int iy = oy * stride - padding + ky;
					if (iy < 0 || iy >= h) continue;
					for (int kx = 0; kx < kernel; ++kx) {
						const int ix = ox * stride - padding + kx;
						if (ix < 0 || ix >= w) continue;
						const std::size_t idx = base + static_cast<std::size_t>(iy) * w + ix;
						if (src[idx] > best) {
							best = src[idx];
							best_i = idx;
						}
					}
				}
				out[o] = best;
				argmax[o] = best_i;
			}
		}
	}
	return make_result({n, c, out_h, out_w}, std::move(out), {x}, [argmax = std::move(argmax)](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) return;
		double* g = p->grad_buffer();
		for (std::size_t i = 0; i < argmax.size(); ++i) {
			g[argmax[i]] += self.grad[i];
		}
	});
}

Tensor avg_pool2d(const Tensor& x, int kernel) {
	require_4d(x, "avg_pool2d");
	if (kernel < 1) {
		throw InvalidArgument("avg_pool2d: kernel must be >= 1");
	}
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	const int out_h = (h + kernel - 1) / kernel;
	const int out_w = (w + kernel - 1) / kernel;
	std::vector<double> out(static_cast<std::size_t>(n) * c * out_h * out_w, 0.0);
	const auto src = x.data();
	auto cell_count = [=](int oy, int ox) {
		return static_cast<double>((std::min(h, (oy + 1) * kernel) - oy * kernel) * (std::min(w, (ox + 1) * kernel) - ox * kernel));
	};
	for (int nc = 0; nc < n * c; ++nc) {
		for (int y = 0; y < h; ++y) {
			for (int xx = 0; xx < w; ++xx) {
				out[(static_cast<std::size_t>(nc) * out_h + y / kernel) * out_w + xx / kernel] +=
				    src[(static_cast<std::size_t>(nc) * h + y) * w + xx];
			}
		}
		for (int oy = 0; oy < out_h; ++oy) {
			for (int ox = 0; ox < out_w; ++ox) {
				out[(static_cast<std::size_t>(nc) * out_h + oy) * out_w + ox] /= cell_count(oy, ox);
			}
		}
	}
	return make_result({n, c, out_h, out_w}, std::move(out), {x}, [=](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) return;
		double* g = p->grad_buffer();
		for (int nc = 0; nc < n * c; ++nc) {
			for (int y = 0; y < h; ++y) {
				for (int xx = 0; xx < w; ++xx) {
					const int oy = y / kernel, ox = xx / kernel;
					g[(static_cast<std::size_t>(nc) * h + y) * w + xx] +=
					    self.grad[(static_cast<std::size_t>(nc) * out_h + oy) * out_w + ox] / cell_count(oy, ox);
				}
			}
		}
	});
}

Tensor upsample_nearest(const Tensor& x, int out_h, int out_w) {
	require_4d(x, "upsample_nearest");
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	std::vector<std::size_t> src_index(static_cast<std::size_t>(n) * c * out_h * out_w);
	std::size_t o = 0;
	for (int nc = 0; nc < n * c; ++nc) {
		for (int oy = 0; oy < out_h; ++oy) {
			const int iy = static_cast<int>(static_cast<long>(oy) * h / out_h);
			for (int ox = 0; ox < out_w; ++ox) {
				const int ix = static_cast<int>(static_cast<long>(ox) * w / out_w);
				src_index[o++] = (static_cast<std::size_t>(nc) * h + iy) * w + ix;
			}
		}
	}
	std::vector<double> out(src_index.size());
	for (std::size_t i = 0; i < out.size(); ++i) {
		out[i] = x[src_index[i]];
	}
	return make_result({n, c, out_h, out_w}, std::move(out), {x}, [idx = std::move(src_index)](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) return;
		double* g = p->grad_buffer();
		for (std::size_t i = 0; i < idx.size(); ++i) {
			g[idx[i]] += self.grad[i];
		}
	});
}

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
	require_4d(x, "upsample_bilinear");
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	struct Tap {
		int lo, hi;
		double frac;
	};
	auto taps = [](int in, int out) {
		std::vector<Tap> t(static_cast<std::size_t>(out));
		const double scale = static_cast<double>(in) / out;
		for (int i = 0; i < out; ++i) {
			double s = (i + 0.5) * scale - 0.5;
			s = std::max(s, 0.0);
			int lo = std::min(static_cast<int>(s), in - 1);
			int hi = std::min(lo + 1, in - 1);
			t[static_cast<std::size_t>(i)] = {lo, hi, s - lo};
		}
		return t;
	};
	const auto ty = taps(h, out_h);
	const auto tx = taps(w, out_w);
	std::vector<double> out(static_cast<std::size_t>(n) * c * out_h * out_w);
	const auto src = x.data();
	std::size_t o = 0;
	for (int nc = 0; nc < n * c; ++nc) {
		const double* plane = src.data() + static_cast<std::size_t>(nc) * h * w;
		for (const Tap& a : ty) {
			for (const Tap& b : tx) {
				const double top = plane[a.lo * w + b.lo] * (1 - b.frac) + plane[a.lo * w + b.hi] * b.frac;
				const double bot = plane[a.hi * w + b.lo] * (1 - b.frac) + plane[a.hi * w + b.hi] * b.frac;
				out[o++] = top * (1 - a.frac) + bot * a.frac;
			}
		}
	}
	return make_result({n, c, out_h, out_w}, std::move(out), {x}, [=](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) return;
		double* g = p->grad_buffer();
		std::size_t o = 0;
		for (int nc = 0; nc < n * c; ++nc) {
			double* plane = g + static_cast<std::size_t>(nc) * h * w;
			for (const Tap& a : ty) {
				for (const Tap& b : tx) {
					const double gy = self.grad[o++];
					plane[a.lo * w + b.lo] += gy * (1 - a.frac) * (1 - b.frac);
					plane[a.lo * w + b.hi] += gy * (1 - a.frac) * b.frac;
					plane[a.hi * w + b.lo] += gy * a.frac * (1 - b.frac);
					plane[a.hi * w + b.hi] += gy * a.frac * b.frac;
				}
			}
		}
	});
}

namespace {

// Flat-index map for space-to-depth; out[i] = in[map[i]].
std::vector<std::size_t> focus_map(int n, int c, int h, int w) {
	const int oh = h / 2, ow = w / 2;
	std::vector<std::size_t> map(static_cast<std::size_t>(n) * c * h * w);
	constexpr int dy[4] = {0, 0, 1, 1};
	constexpr int dx[4] = {0, 1, 0, 1};
	std::size_t o = 0;
	for (int b = 0; b < n; ++b) {
		for (int part = 0; part < 4; ++part) {
			for (int ch = 0; ch < c; ++ch) {
				for (int y = 0; y < oh; ++y) {
					for (int x = 0; x < ow; ++x) {
						map[o++] = ((static_cast<std::size_t>(b) * c + ch) * h + 2 * y + dy[part]) * w + 2 * x + dx[part];
					}
				}
			}
		}
	}
	return map;
}

Tensor gather(const Tensor& x, Shape shape, std::vector<std::size_t> map) {
	std::vector<double> out(map.size());
	for (std::size_t i = 0; i < map.size(); ++i) {
		out[i] = x[map[i]];
	}
	return make_result(std::move(shape), std::move(out), {x}, [map = std::move(map)](TensorImpl& self) {
		auto& p = self.parents[0];
		if (!wants_grad(p)) return;
		double* g = p->grad_buffer();
		for (std::size_t i = 0; i < map.size(); ++i) {
			g[map[i]] += self.grad[i];
		}
	});
}

} // namespace

Tensor focus(const Tensor& x) {
	require_4d(x, "focus");
	const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
	if (h % 2 != 0 || w % 2 != 0) {
		throw InvalidArgument("focus: spatial dims must be even, got " + shape_str(x.shape()));
	}
	return gather(x, {n, 4 * c, h / 2, w / 2}, focus_map(n, c, h, w));
}

Tensor unfocus(const Tensor& x) {
	require_4d(x, "unfocus");
	const int n = x.dim(0), c4 = x.dim(1), oh = x.dim(2), ow = x.dim(3);
	if (c4 % 4 != 0) {
		throw InvalidArgument("unfocus: channel count must be a multiple of 4, got " + shape_str(x.shape()));
	}
	const int c = c4 / 4, h = oh * 2, w = ow * 2;
	const auto forward = focus_map(n, c, h, w);
	std::vector<std::size_t> inverse(forward.size());
	for (std::size_t i = 0; i < forward.size(); ++i) {
		inverse[forward[i]] = i;
	}
	return gather(x, {n, c, h, w}, std::move(inverse));
}

} // namespace fogdet::ops
