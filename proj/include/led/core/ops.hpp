#pragma once

#include <cstddef>
#include <vector>

#include "led/core/tensor.hpp"

namespace led {

// Element-wise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// Unary maps.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);

// Gate non-linearity: tanh kept strictly inside (-1, 1) even where double
// rounding would saturate to +-1.
Tensor tanh_gate(const Tensor& g);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false);

// Matrix product. Rank-2 x rank-2, or batched [..., m, k] x [..., k, n] with
// identical leading dims, or batched x rank-2 (weights broadcast).
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., in] W[in, out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
// Softmax along the last axis; `allowed` has x.numel() entries, 0 = masked
// (weight exactly 0). A fully masked slice raises DegenerateInputError.
Tensor masked_softmax(const Tensor& x, const std::vector<unsigned char>& allowed);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Shape manipulation (zero FLOPs).
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, std::size_t i, std::size_t j);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Rows of table[V, d] selected by ids; result [ids.size(), d].
Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids);
// out[r] = x[r, idx[r]] over the last axis; result drops the last axis.
Tensor pick(const Tensor& x, const std::vector<std::size_t>& idx);

// Cross-correlation, x[B,C,H,W] * kernel[C',C,kh,kw]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);

// Space-to-depth: [B,C,H,W] -> [B, C*r*r, H/r, W/r]; output channel
// c*r*r + i*r + j holds input (c, y*r+i, x*r+j).
Tensor pixel_unshuffle(const Tensor& x, std::size_t r);
// Exact inverse of pixel_unshuffle.
Tensor pixel_shuffle(const Tensor& x, std::size_t r);

// Rotary embedding on x[B,T,h,d_h]; pair (2i, 2i+1) at position p rotates by
// p * base^(-2i/d_h).
Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions,
                  double base = 10000.0);

}  // namespace led
