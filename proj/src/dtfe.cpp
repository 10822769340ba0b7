#include "fogdet/dtfe.hpp"

#include <cmath>

namespace fogdet::dtfe {

using autograd::make_result;
using autograd::wants_grad;

namespace {

struct Bilinear {
	int y0, x0;
	double ly, lx;
};

inline Bilinear bilinear_setup(double y, double x) {
	const double fy = std::floor(y), fx = std::floor(x);
	return {static_cast<int>(fy), static_cast<int>(fx), y - fy, x - fx};
}

inline double plane_at(const double* plane, int h, int w, int y, int x) {
	return (y >= 0 && y < h && x >= 0 && x < w) ? plane[static_cast<std::size_t>(y) * w + x] : 0.0;
}

inline bool fully_outside(double y, double x, int h, int w) {
	return y <= -1.0 || y >= h || x <= -1.0 || x >= w || !std::isfinite(y) || !std::isfinite(x);
}

inline double sample_plane(const double* plane, int h, int w, double y, double x) {
	if (fully_outside(y, x, h, w)) {
		return 0.0;
	}
	const Bilinear b = bilinear_setup(y, x);
	return (1 - b.ly) * (1 - b.lx) * plane_at(plane, h, w, b.y0, b.x0) +
	       (1 - b.ly) * b.lx * plane_at(plane, h, w, b.y0, b.x0 + 1) +
	       b.ly * (1 - b.lx) * plane_at(plane, h, w, b.y0 + 1, b.x0) +
	       b.ly * b.lx * plane_at(plane, h, w, b.y0 + 1, b.x0 + 1);
}

// Adds g * d(sample)/d(plane) into gplane and returns (d sample/dy, d sample/dx) * g.
inline std::pair<double, double> sample_plane_backward(const double* plane, double* gplane, int h, int w, double y,
                                                       double x, double g) {
	if (fully_outside(y, x, h, w)) {
		return {0.0, 0.0};
	}
	const Bilinear b = bilinear_setup(y, x);
	const double v00 = plane_at(plane, h, w, b.y0, b.x0);
	const double v01 = plane_at(plane, h, w, b.y0, b.x0 + 1);
	const double v10 = plane_at(plane, h, w, b.y0 + 1, b.x0);
	const double v11 = plane_at(plane, h, w, b.y0 + 1, b.x0 + 1);
	if (gplane) {
		auto add = [&](int yy, int xx, double wgt) {
			if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
				gplane[static_cast<std::size_t>(yy) * w + xx] += g * wgt;
			}
		};
		add(b.y0, b.x0, (1 - b.ly) * (1 - b.lx));
		add(b.y0, b.x0 + 1, (1 - b.ly) * b.lx);
		add(b.y0 + 1, b.x0, b.ly * (1 - b.lx));
		add(b.y0 + 1, b.x0 + 1, b.ly * b.lx);
	}
	const double dy = (1 - b.lx) * (v10 - v00) + b.lx * (v11 - v01);
	const double dx = (1 - b.ly) * (v01 - v00) + b.ly * (v11 - v10);
	return {g * dy, g * dx};
}

struct DeformGeometry {
	int n, c, h, w, o, k, out_h, out_w, stride, padding;
	std::size_t out_plane() const { return static_cast<std::size_t>(out_h) * out_w; }
	std::size_t patch() const { return static_cast<std::size_t>(c) * k * k; }
};

// Deformable im2col for batch item b: col is (C*K*K, out_h*out_w).
void deform_im2col(const DeformGeometry& g, const double* img, const double* off, double* col) {
	const std::size_t plane_out = g.out_plane();
	const std::size_t plane_in = static_cast<std::size_t>(g.h) * g.w;
	for (int ky = 0; ky < g.k; ++ky) {
		for (int kx = 0; kx < g.k; ++kx) {
			const int tap = ky * g.k + kx;
			const double* dy = off + static_cast<std::size_t>(2 * tap) * plane_out;
			const double* dx = off + static_cast<std::size_t>(2 * tap + 1) * plane_out;
			for (int oy = 0; oy < g.out_h; ++oy) {
				for (int ox = 0; ox < g.out_w; ++ox) {
					const std::size_t p = static_cast<std::size_t>(oy) * g.out_w + ox;
					const double sy = oy * g.stride - g.padding + ky + dy[p];
					const double sx = ox * g.stride - g.padding + kx + dx[p];
					for (int ch = 0; ch < g.c; ++ch) {
						col[(static_cast<std::size_t>(ch) * g.k * g.k + tap) * plane_out + p] =
						    sample_plane(img + ch * plane_in, g.h, g.w, sy, sx);
					}
				}
			}
		}
	}
}

} // namespace

std::vector<double> bilinear_sample(const Tensor& feature, int batch, double y, double x) {
	if (feature.ndim() != 4 || batch < 0 || batch >= feature.dim(0)) {
		throw ShapeError("bilinear_sample: bad batch index for " + shape_str(feature.shape()));
	}
	const int c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
	std::vector<double> out(static_cast<std::size_t>(c));
	const double* base = feature.data().data() + static_cast<std::size_t>(batch) * c * h * w;
	for (int ch = 0; ch < c; ++ch) {
		out[static_cast<std::size_t>(ch)] = sample_plane(base + static_cast<std::size_t>(ch) * h * w, h, w, y, x);
	}
	return out;
}

Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& weight, const Tensor& bias, int stride,
                     int padding) {
	if (x.ndim() != 4 || weight.ndim() != 4 || offsets.ndim() != 4) {
		throw ShapeError("deform_conv2d: expected 4-d input, offsets and weight");
	}
	DeformGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), 0, 0, stride, padding};
	if (weight.dim(1) != g.c || weight.dim(3) != g.k) {
		throw ShapeError("deform_conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
	}
	if (g.k % 2 == 0) {
		throw InvalidArgument("deform_conv2d: kernel size must be odd");
	}
	g.out_h = (g.h + 2 * padding - g.k) / stride + 1;
	g.out_w = (g.w + 2 * padding - g.k) / stride + 1;
	if (offsets.dim(0) != g.n || offsets.dim(1) != 2 * g.k * g.k || offsets.dim(2) != g.out_h || offsets.dim(3) != g.out_w) {
		throw ShapeError("deform_conv2d: offsets " + shape_str(offsets.shape()) + " need [" + std::to_string(g.n) + "," +
		                 std::to_string(2 * g.k * g.k) + "," + std::to_string(g.out_h) + "," + std::to_string(g.out_w) + "]");
	}
	if (bias.defined() && bias.numel() != static_cast<std::size_t>(g.o)) {
		throw ShapeError("deform_conv2d: bias " + shape_str(bias.shape()));
	}

	const std::size_t in_sz = static_cast<std::size_t>(g.c) * g.h * g.w;
	const std::size_t off_sz = static_cast<std::size_t>(2 * g.k * g.k) * g.out_plane();
	const std::size_t out_sz = static_cast<std::size_t>(g.o) * g.out_plane();
	std::vector<double> out(static_cast<std::size_t>(g.n) * out_sz, 0.0);
	std::vector<double> col(g.patch() * g.out_plane());
	for (int b = 0; b < g.n; ++b) {
		deform_im2col(g, x.data().data() + b * in_sz, offsets.data().data() + b * off_sz, col.data());
		double* dst = out.data() + b * out_sz;
		if (bias.defined()) {
			for (int o = 0; o < g.o; ++o) {
				std::fill_n(dst + static_cast<std::size_t>(o) * g.out_plane(), g.out_plane(), bias[static_cast<std::size_t>(o)]);
			}
		}
		ops::detail::gemm(false, false, g.o, static_cast<int>(g.out_plane()), static_cast<int>(g.patch()), 1.0,
		                  weight.data().data(), col.data(), 1.0, dst);
	}

	return make_result({g.n, g.o, g.out_h, g.out_w}, std::move(out), {x, offsets, weight, bias},
	                   [g, in_sz, off_sz, out_sz](TensorImpl& self) {
		                   auto& px = self.parents[0];
		                   auto& poff = self.parents[1];
		                   auto& pw = self.parents[2];
		                   auto& pb = self.parents[3];
		                   const int plane = static_cast<int>(g.out_plane());
		                   const int patch = static_cast<int>(g.patch());
		                   const std::size_t plane_in = static_cast<std::size_t>(g.h) * g.w;
		                   std::vector<double> col(g.patch() * g.out_plane());
		                   for (int b = 0; b < g.n; ++b) {
			                   const double* gy = self.grad.data() + b * out_sz;
			                   const double* img = px->data.data() + b * in_sz;
			                   const double* off = poff->data.data() + b * off_sz;
			                   if (wants_grad(pb)) {
				                   double* gb = pb->grad_buffer();
				                   for (int o = 0; o < g.o; ++o) {
					                   for (int i = 0; i < plane; ++i) gb[o] += gy[static_cast<std::size_t>(o) * plane + i];
				                   }
			                   }
			                   if (wants_grad(pw)) {
				                   deform_im2col(g, img, off, col.data());
				                   ops::detail::gemm(false, true, g.o, patch, plane, 1.0, gy, col.data(), 1.0, pw->grad_buffer());
			                   }
			                   if (!wants_grad(px) && !wants_grad(poff)) {
				                   continue;
			                   }
			                   // gcol = W^T gy, then route each column entry back through its bilinear sample.
			                   ops::detail::gemm(true, false, patch, plane, g.o, 1.0, pw->data.data(), gy, 0.0, col.data());
			                   double* gx = wants_grad(px) ? px->grad_buffer() + b * in_sz : nullptr;
			                   double* goff = wants_grad(poff) ? poff->grad_buffer() + b * off_sz : nullptr;
			                   for (int ky = 0; ky < g.k; ++ky) {
				                   for (int kx = 0; kx < g.k; ++kx) {
					                   const int tap = ky * g.k + kx;
					                   const double* dy = off + static_cast<std::size_t>(2 * tap) * plane;
					                   const double* dx = off + static_cast<std::size_t>(2 * tap + 1) * plane;
					                   for (int oy = 0; oy < g.out_h; ++oy) {
						                   for (int ox = 0; ox < g.out_w; ++ox) {
							                   const std::size_t p = static_cast<std::size_t>(oy) * g.out_w + ox;
							                   const double sy = oy * g.stride - g.padding + ky + dy[p];
							                   const double sx = ox * g.stride - g.padding + kx + dx[p];
							                   double acc_y = 0.0, acc_x = 0.0;
							                   for (int ch = 0; ch < g.c; ++ch) {
								                   const double gc = col[(static_cast<std::size_t>(ch) * g.k * g.k + tap) * plane + p];
								                   if (gc == 0.0) continue;
								                   auto [ddy, ddx] = sample_plane_backward(img + ch * plane_in,
								                                                           gx ? gx + ch * plane_in : nullptr,
								                                                           g.h, g.w, sy, sx, gc);
								                   acc_y += ddy;
								                   acc_x += ddx;
							                   }
							                   if (goff) {
								                   goff[static_cast<std::size_t>(2 * tap) * plane + p] += acc_y;
								                   goff[static_cast<std::size_t>(2 * tap + 1) * plane + p] += acc_x;
							                   }
						                   }
					                   }
				                   }
			                   }
		                   }
	                   });
}

DeformConvLayer::DeformConvLayer(int in_ch, int out_ch, int kernel, Rng& rng)
    : kernel_(kernel), offset_conv_(in_ch, 2 * kernel * kernel, 3, 1, 1, true, rng), norm_(out_ch) {
	// Zero offsets at start: the layer begins as a plain convolution.
	nn::zero_parameters(offset_conv_);
	const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
	weight_ = register_parameter("weight", Tensor::uniform({out_ch, in_ch, kernel, kernel}, -bound, bound, rng), true);
	register_module("offset", offset_conv_);
	register_module("norm", norm_);
}

Tensor DeformConvLayer::forward(const Tensor& x) const {
	const Tensor off = offset_conv_.forward(x);
	return ops::silu(norm_.forward(deform_conv2d(x, off, weight_, Tensor(), 1, kernel_ / 2)));
}

DynamicFeatureTransform::DynamicFeatureTransform(int channels, Rng& rng)
    : first_(channels, channels, 3, rng), second_(channels, channels, 3, rng) {
	register_module("deform1", first_);
	register_module("deform2", second_);
}

TransformerEnhancement::TransformerEnhancement(int channels, int grid_h, int grid_w, int heads, int mlp_ratio, Rng& rng)
    : channels_(channels), grid_h_(grid_h), grid_w_(grid_w), heads_(heads), norm1_(channels), q_(channels, channels, rng),
      k_(channels, channels, rng), v_(channels, channels, rng), proj_(channels, channels, rng), norm2_(channels),
      fc1_(channels, channels * mlp_ratio, rng), fc2_(channels * mlp_ratio, channels, rng) {
	if (heads <= 0 || channels % heads != 0) {
		throw ConfigError("transformer width " + std::to_string(channels) + " is not divisible by " +
		                  std::to_string(heads) + " heads");
	}
	pos_embed_ = register_parameter("pos_embed", Tensor::normal({1, grid_h * grid_w, channels}, 0.02, rng), false);
	register_module("norm1", norm1_);
	register_module("q", q_);
	register_module("k", k_);
	register_module("v", v_);
	register_module("proj", proj_);
	register_module("norm2", norm2_);
	register_module("fc1", fc1_);
	register_module("fc2", fc2_);
}

Tensor TransformerEnhancement::forward(const Tensor& x, AttentionTrace* trace) const {
	if (x.ndim() != 4 || x.dim(1) != channels_ || x.dim(2) != grid_h_ || x.dim(3) != grid_w_) {
		throw ShapeError("transformer block expects [N," + std::to_string(channels_) + "," + std::to_string(grid_h_) + "," +
		                 std::to_string(grid_w_) + "], got " + shape_str(x.shape()));
	}
	const int d = channels_ / heads_;
	Tensor tokens = ops::add_broadcast(ops::to_tokens(x), pos_embed_);

	const Tensor h = norm1_.forward(tokens);
	const Tensor values = v_.forward(h);
	const Tensor q = ops::split_heads(q_.forward(h), heads_);
	const Tensor k = ops::split_heads(k_.forward(h), heads_);
	const Tensor v = ops::split_heads(values, heads_);
	const Tensor attn = ops::softmax_lastdim(ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d))));
	const Tensor context = ops::merge_heads(ops::bmm(attn, v), heads_);
	tokens = ops::add(tokens, proj_.forward(context));

	const Tensor mlp = fc2_.forward(ops::gelu(fc1_.forward(norm2_.forward(tokens))));
	tokens = ops::add(tokens, mlp);

	if (trace) {
		*trace = {attn, values, context};
	}
	return ops::from_tokens(tokens, grid_h_, grid_w_);
}

Dtfe::Dtfe(int channels, int grid_h, int grid_w, int heads, int mlp_ratio, Rng& rng)
    : dft_(channels, rng), tfe_(channels, grid_h, grid_w, heads, mlp_ratio, rng) {
	register_module("dft", dft_);
	register_module("tfe", tfe_);
}

} // namespace fogdet::dtfe
