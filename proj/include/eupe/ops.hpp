#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "eupe/tensor.hpp"

// Differentiable tensor operations. Every op records a backward closure on
// the active GradientTape when one of its inputs requires grad; outside a
// tape they are plain value computations.
namespace eupe {

inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr float kCosineEps = 1e-8f;
inline constexpr float kSmoothL1Beta = 1.0f;
inline constexpr float kCubicA = -0.5f;

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
// x [..., d] + row [d]
Tensor add_row(const Tensor& x, const Tensor& row);
// x [k*m, d] + tile [m, d], tile repeated k times along rows.
Tensor add_tiled(const Tensor& x, const Tensor& tile);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);

// x @ weight (+ bias). weight is [in, out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

// Normalizes over the last dimension, then applies gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = kLayerNormEps);

// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);

// Fused multi-head self-attention over packed projections.
// qkv is [batch*tokens, 3*dim] with q, k, v in consecutive column blocks;
// returns [batch*tokens, dim] with heads concatenated along columns.
Tensor multi_head_attention(const Tensor& qkv, std::size_t batch, std::size_t heads);

// Mean over rows of (1 - cos(pred_row, target_row)). Rank-1 inputs count as
// one row. The target is treated as a constant.
Tensor cosine_loss(const Tensor& pred, const Tensor& target, float eps = kCosineEps);

// Mean over elements of the Huber-style penalty with transition beta.
// The target is treated as a constant.
Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target, float beta = kSmoothL1Beta);

// Separable bicubic resampling of [h,w,d] or [batch,h,w,d] grids
// (Catmull-Rom, a = -0.5, half-pixel centers, edge clamped).
Tensor bicubic_resize(const Tensor& grid, std::size_t out_h, std::size_t out_w);

// Four clamped taps of the cubic kernel for one output coordinate.
struct CubicTaps {
  std::array<std::size_t, 4> index;
  std::array<float, 4> weight;
};
float cubic_kernel(float x, float a = kCubicA);
std::vector<CubicTaps> cubic_taps(std::size_t in_size, std::size_t out_size);

}  // namespace eupe
