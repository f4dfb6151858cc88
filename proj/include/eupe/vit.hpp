#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eupe/tensor.hpp"

namespace eupe {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t num_registers = 0;
  float mlp_ratio = 4.0f;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t mlp_hidden() const;
  std::size_t patch_values() const { return 3 * patch_size * patch_size; }

  bool operator==(const ViTConfig&) const = default;
};

std::size_t count_params(const ViTConfig& config);

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;
  Tensor proj_weight, proj_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

// Pre-norm ViT with learned absolute positional embeddings for the patch grid,
// a class token and optional register tokens.
struct EncoderParams {
  ViTConfig config;
  Tensor patch_weight;  // [3*p*p, dim]
  Tensor patch_bias;    // [dim]
  Tensor pos_embed;     // [grid*grid, dim]
  Tensor cls_token;     // [1, dim]
  Tensor registers;     // [num_registers, dim], undefined when there are none
  std::vector<BlockParams> blocks;
  Tensor norm_gain, norm_bias;

  // Stable names, used by checkpoints and the optimizer.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> parameters() const;
  std::size_t size() const;
  EncoderParams clone() const;
  void set_requires_grad(bool value);
  void zero_grad();
};

// Truncated-normal(0.02) weights, zero biases, unit norm gains.
EncoderParams init_params(const ViTConfig& config, std::uint64_t seed);

struct GridSize {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t count() const { return rows * cols; }
  bool operator==(const GridSize&) const = default;
};

// Class token and patch tokens of one forward pass; register tokens are not
// part of the output. For a single image class_token is [d] and patch_tokens
// [N, d]; batched encodes give [B, d] and [B*N, d] with images contiguous.
struct EncoderOutput {
  Tensor class_token;
  Tensor patch_tokens;
  GridSize grid;
  std::size_t batch = 1;
};

// [H, W, 3] -> [N, 3*p*p], patches in row-major grid order, values inside a
// patch ordered (row, col, channel). Differentiable.
Tensor patchify(const Tensor& image, std::size_t patch_size);

// Bicubic resize of a [rows*cols, d] embedding table laid out on a grid.
Tensor resize_pos_embed(const Tensor& pos_embed, GridSize from, GridSize to);

EncoderOutput vit_forward(const EncoderParams& params, const Tensor& image);
EncoderOutput encode_batch(const EncoderParams& params, std::span<const Tensor> images);

}  // namespace eupe
