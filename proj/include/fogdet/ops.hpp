#pragma once

// Differentiable tensor operations. Image-like tensors are NCHW; token
// tensors are (batch, tokens, channels).

#include <span>
#include <string>
#include <vector>

#include "fogdet/tensor.hpp"

namespace fogdet::ops {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// a + b where b's shape equals a's trailing dims with leading 1s (e.g. a positional table).
Tensor add_broadcast(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Scalar sum_i weights[i] * x[i].
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, int begin, int end);

/// (B,C,H,W) -> (B,H*W,C) and back.
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& tokens, int height, int width);
/// (B,T,C) -> (B*heads,T,C/heads) and back.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x, int heads);

/// y = x W^T + b over the last dim. weight is (out, in); bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Batched (G,M,K) x (G,K,N); with transpose_b the second operand is (G,N,K).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor softmax_lastdim(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// weight (O,C,k,k); bias (O) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride = 1, int padding = 0);
/// weight (C_in,C_out,k,k). Output side = (in-1)*stride - 2*padding + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);
/// Non-overlapping kernel x kernel average with ceil mode; partial windows average valid cells.
Tensor avg_pool2d(const Tensor& x, int kernel);
/// out[i] = in[floor(i * in_size / out_size)].
Tensor upsample_nearest(const Tensor& x, int out_h, int out_w);
/// Half-pixel-centred bilinear resize (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);

/// Space-to-depth: (B,C,H,W) -> (B,4C,H/2,W/2), parity blocks ordered
/// (even row, even col), (even row, odd col), (odd row, even col), (odd row, odd col).
Tensor focus(const Tensor& x);
/// Exact inverse of `focus`.
Tensor unfocus(const Tensor& x);

/// Worker threads used by the BLAS backend. One thread gives bitwise-reproducible sums.
void set_blas_threads(int threads);
/// Which matrix-multiply backend is in use, e.g. "openblas:SkylakeX" or "builtin".
std::string blas_backend();

namespace detail {
// Raw im2col helpers shared with deformable convolution.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, const double* b,
          double beta, double* c);
void im2col(const double* img, int channels, int height, int width, int kernel, int stride, int padding,
            int out_h, int out_w, double* col);
void col2im(const double* col, int channels, int height, int width, int kernel, int stride, int padding,
            int out_h, int out_w, double* img);
} // namespace detail

} // namespace fogdet::ops
