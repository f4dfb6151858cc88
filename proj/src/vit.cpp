#include "eupe/vit.hpp"

#include <cmath>

#include "eupe/error.hpp"
#include "eupe/ops.hpp"
#include "eupe/rng.hpp"
#include "eupe/tape.hpp"

namespace eupe {

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ParameterError("ViTConfig: image_size " + std::to_string(image_size) +
                         " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ParameterError("ViTConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                         std::to_string(heads));
  }
  if (!(mlp_ratio > 0.0f) || mlp_hidden() == 0) throw ParameterError("ViTConfig: mlp_ratio must be positive");
}

std::size_t ViTConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(dim) * mlp_ratio));
}

std::size_t count_params(const ViTConfig& c) {
  c.validate();
  const std::size_t d = c.dim;
  const std::size_t h = c.mlp_hidden();
  const std::size_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
  return c.patch_values() * d + d + c.num_patches() * d + d + c.num_registers * d + c.depth * block + 2 * d;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_weight", patch_weight);
  out.emplace_back("patch_bias", patch_bias);
  out.emplace_back("pos_embed", pos_embed);
  out.emplace_back("cls_token", cls_token);
  if (registers.defined()) out.emplace_back("registers", registers);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1_gain", b.ln1_gain);
    out.emplace_back(p + "ln1_bias", b.ln1_bias);
    out.emplace_back(p + "qkv_weight", b.qkv_weight);
    out.emplace_back(p + "qkv_bias", b.qkv_bias);
    out.emplace_back(p + "proj_weight", b.proj_weight);
    out.emplace_back(p + "proj_bias", b.proj_bias);
    out.emplace_back(p + "ln2_gain", b.ln2_gain);
    out.emplace_back(p + "ln2_bias", b.ln2_bias);
    out.emplace_back(p + "fc1_weight", b.fc1_weight);
    out.emplace_back(p + "fc1_bias", b.fc1_bias);
    out.emplace_back(p + "fc2_weight", b.fc2_weight);
    out.emplace_back(p + "fc2_bias", b.fc2_bias);
  }
  out.emplace_back("norm_gain", norm_gain);
  out.emplace_back("norm_bias", norm_bias);
  return out;
}

std::vector<Tensor> EncoderParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::size_t EncoderParams::size() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

EncoderParams EncoderParams::clone() const {
  EncoderParams p = *this;
  auto copy = [](Tensor& t) {
    if (t.defined()) t = t.clone();
  };
  copy(p.patch_weight);
  copy(p.patch_bias);
  copy(p.pos_embed);
  copy(p.cls_token);
  copy(p.registers);
  for (auto& b : p.blocks) {
    for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.qkv_weight, &b.qkv_bias, &b.proj_weight, &b.proj_bias,
                      &b.ln2_gain, &b.ln2_bias, &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias}) {
      copy(*t);
    }
  }
  copy(p.norm_gain);
  copy(p.norm_bias);
  return p;
}

void EncoderParams::set_requires_grad(bool value) {
  for (auto& t : parameters()) t.set_requires_grad(value);
}

void EncoderParams::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

EncoderParams init_params(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto weight = [&rng](Shape shape) {
    Tensor t(std::move(shape));
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.truncated_normal(0.02));
    return t;
  };
  const std::size_t d = config.dim;
  const std::size_t h = config.mlp_hidden();
  EncoderParams p;
  p.config = config;
  p.patch_weight = weight({config.patch_values(), d});
  p.patch_bias = Tensor(Shape{d});
  p.pos_embed = weight({config.num_patches(), d});
  p.cls_token = weight({1, d});
  if (config.num_registers > 0) p.registers = weight({config.num_registers, d});
  for (std::size_t i = 0; i < config.depth; ++i) {
    BlockParams b;
    b.ln1_gain = Tensor(Shape{d}, 1.0f);
    b.ln1_bias = Tensor(Shape{d});
    b.qkv_weight = weight({d, 3 * d});
    b.qkv_bias = Tensor(Shape{3 * d});
    b.proj_weight = weight({d, d});
    b.proj_bias = Tensor(Shape{d});
    b.ln2_gain = Tensor(Shape{d}, 1.0f);
    b.ln2_bias = Tensor(Shape{d});
    b.fc1_weight = weight({d, h});
    b.fc1_bias = Tensor(Shape{h});
    b.fc2_weight = weight({h, d});
    b.fc2_bias = Tensor(Shape{d});
    p.blocks.push_back(std::move(b));
  }
  p.norm_gain = Tensor(Shape{d}, 1.0f);
  p.norm_bias = Tensor(Shape{d});
  return p;
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("patchify expects an [H,W,3] image, got " + shape_str(image.shape()));
  }
  const std::size_t H = image.dim(0), W = image.dim(1), p = patch_size;
  if (p == 0 || H % p != 0 || W % p != 0) {
    throw DimensionError("patchify: image " + shape_str(image.shape()) + " not divisible by patch size " +
                         std::to_string(p));
  }
  const std::size_t gr = H / p, gc = W / p, n = 3 * p * p;
  // src index for every output element
  std::vector<std::size_t> gather(gr * gc * n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < gr; ++i)
    for (std::size_t j = 0; j < gc; ++j)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < 3; ++c) gather[k++] = ((i * p + y) * W + (j * p + x)) * 3 + c;

  Tensor out(Shape{gr * gc, n});
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t e = 0; e < gather.size(); ++e) dst[e] = src[gather[e]];
  GradientTape* tape = GradientTape::active();
  if (tape != nullptr && image.requires_grad()) {
    out.set_requires_grad();
    tape->record(out, [image, out, gather = std::move(gather)]() {
      auto g = out.grad();
      auto gi = image.grad_buffer();
      for (std::size_t e = 0; e < gather.size(); ++e) gi[gather[e]] += g[e];
    });
  }
  return out;
}

Tensor resize_pos_embed(const Tensor& pos_embed, GridSize from, GridSize to) {
  if (from == to) return pos_embed;
  const std::size_t d = pos_embed.dim(1);
  Tensor grid = reshape(pos_embed, Shape{from.rows, from.cols, d});
  return reshape(bicubic_resize(grid, to.rows, to.cols), Shape{to.count(), d});
}

EncoderOutput encode_batch(const EncoderParams& params, std::span<const Tensor> images) {
  const ViTConfig& c = params.config;
  if (images.empty()) throw ParameterError("encode_batch: empty batch");
  const Shape& s0 = images.front().shape();
  if (s0.size() != 3 || s0[2] != 3 || s0[0] % c.patch_size != 0 || s0[1] % c.patch_size != 0) {
    throw DimensionError("image " + shape_str(s0) + " incompatible with patch size " +
                         std::to_string(c.patch_size));
  }
  const GridSize grid{s0[0] / c.patch_size, s0[1] / c.patch_size};
  const std::size_t B = images.size();
  const std::size_t N = grid.count();
  const std::size_t R = c.num_registers;
  const std::size_t T = 1 + R + N;

  std::vector<Tensor> patches;
  patches.reserve(B);
  for (const auto& img : images) {
    if (img.shape() != s0) {
      throw DimensionError("encode_batch: mixed image shapes " + shape_str(s0) + " and " + shape_str(img.shape()));
    }
    patches.push_back(patchify(img, c.patch_size));
  }
  Tensor x = linear(concat_rows(patches), params.patch_weight, params.patch_bias);
  x = add_tiled(x, resize_pos_embed(params.pos_embed, GridSize{c.grid(), c.grid()}, grid));

  std::vector<Tensor> pieces{params.cls_token};
  if (R > 0) pieces.push_back(params.registers);
  pieces.push_back(x);
  Tensor pool = concat_rows(pieces);
  std::vector<std::size_t> order;
  order.reserve(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < 1 + R; ++t) order.push_back(t);
    for (std::size_t t = 0; t < N; ++t) order.push_back(1 + R + b * N + t);
  }
  Tensor h = take_rows(pool, order);

  for (const auto& blk : params.blocks) {
    Tensor a = layer_norm(h, blk.ln1_gain, blk.ln1_bias);
    Tensor att = multi_head_attention(linear(a, blk.qkv_weight, blk.qkv_bias), B, c.heads);
    h = add(h, linear(att, blk.proj_weight, blk.proj_bias));
    Tensor m = layer_norm(h, blk.ln2_gain, blk.ln2_bias);
    m = linear(gelu(linear(m, blk.fc1_weight, blk.fc1_bias)), blk.fc2_weight, blk.fc2_bias);
    h = add(h, m);
  }
  Tensor out = layer_norm(h, params.norm_gain, params.norm_bias);

  std::vector<std::size_t> cls_rows(B), patch_rows;
  patch_rows.reserve(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    cls_rows[b] = b * T;
    for (std::size_t t = 0; t < N; ++t) patch_rows.push_back(b * T + 1 + R + t);
  }
  EncoderOutput result;
  result.class_token = take_rows(out, cls_rows);
  result.patch_tokens = take_rows(out, patch_rows);
  result.grid = grid;
  result.batch = B;
  return result;
}

EncoderOutput vit_forward(const EncoderParams& params, const Tensor& image) {
  EncoderOutput out = encode_batch(params, std::span<const Tensor>(&image, 1));
  out.class_token = reshape(out.class_token, Shape{params.config.dim});
  return out;
}

}  // namespace eupe
