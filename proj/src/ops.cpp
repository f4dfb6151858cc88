#include "eupe/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "eupe/error.hpp"
#include "eupe/tape.hpp"

namespace eupe {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

GradientTape* tape_for(std::initializer_list<const Tensor*> inputs) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("expected at least rank 1, got a scalar");
  return x.shape().back();
}

// Rows/cols view of a tensor treated as [numel/d, d].
std::pair<std::size_t, std::size_t> as_rows(const Tensor& x) {
  if (x.rank() == 1) return {1, x.dim(0)};
  const std::size_t d = last_dim(x);
  return {d == 0 ? 0 : x.numel() / d, d};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor out(Shape{a.dim(0), b.dim(1)});
  MatMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  if (auto* tape = tape_for({&a, &b})) {
    out.set_requires_grad();
    tape->record(out, [a, b, out, m, k, n]() mutable {
      ConstMatMap dc(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap(a.grad_buffer().data(), m, k).noalias() +=
            dc * ConstMatMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap(b.grad_buffer().data(), k, n).noalias() +=
            ConstMatMap(a.data().data(), m, k).transpose() * dc;
      }
    });
  }
  return out;
}

namespace {

template <typename Fwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd) {
  require_same_shape(a, b, name);
  Tensor out(a.shape());
  auto da = a.data();
  auto db = b.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(da[i], db[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_elementwise(a, b, "add", [](float x, float y) { return x + y; });
  if (auto* tape = tape_for({&a, &b})) {
    out.set_requires_grad();
    tape->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_elementwise(a, b, "sub", [](float x, float y) { return x - y; });
  if (auto* tape = tape_for({&a, &b})) {
    out.set_requires_grad();
    tape->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_elementwise(a, b, "mul", [](float x, float y) { return x * y; });
  if (auto* tape = tape_for({&a, &b})) {
    out.set_requires_grad();
    tape->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      auto da = a.data();
      auto db = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, float factor) {
  Tensor out(x.shape());
  auto dx = x.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = dx[i] * factor;
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad();
    tape->record(out, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  const std::size_t d = last_dim(x);
  if (row.rank() != 1 || row.dim(0) != d) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  Tensor out(x.shape());
  auto dx = x.data();
  auto dr = row.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = dx[i] + dr[i % d];
  if (auto* tape = tape_for({&x, &row})) {
    out.set_requires_grad();
    tape->record(out, [x, row, out, d]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (row.requires_grad()) {
        auto gr = row.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gr[i % d] += g[i];
      }
    });
  }
  return out;
}

Tensor add_tiled(const Tensor& x, const Tensor& tile) {
  if (x.rank() != 2 || tile.rank() != 2 || x.dim(1) != tile.dim(1) || tile.dim(0) == 0 ||
      x.dim(0) % tile.dim(0) != 0) {
    throw DimensionError("add_tiled: cannot tile " + shape_str(tile.shape()) + " over " +
                         shape_str(x.shape()));
  }
  const std::size_t period = tile.numel();
  Tensor out(x.shape());
  auto dx = x.data();
  auto dt = tile.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = dx[i] + dt[i % period];
  if (auto* tape = tape_for({&x, &tile})) {
    out.set_requires_grad();
    tape->record(out, [x, tile, out, period]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (tile.requires_grad()) {
        auto gt = tile.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i % period] += g[i];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad();
    tape->record(out, [x, out]() mutable {
      const float g = out.grad()[0];
      for (float& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  const float inv = 1.0f / static_cast<float>(x.numel());
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(x.numel())));
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad();
    tape->record(out, [x, out, inv]() mutable {
      const float g = out.grad()[0] * inv;
      for (float& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) { return x.view(std::move(shape)); }

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("take_rows expects a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0);
  const std::size_t d = x.dim(1);
  Tensor out(Shape{rows.size(), d});
  auto dx = x.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) {
      throw DimensionError("take_rows: row " + std::to_string(rows[r]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(dx.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape->record(out, [x, out, idx = std::move(idx), d]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) gx[idx[r] * d + c] += g[r * d + c];
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t d = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != d) {
      throw DimensionError("concat_rows: part " + shape_str(p.shape()) + " incompatible with width " +
                           std::to_string(d));
    }
    rows += p.dim(0);
    any_grad = any_grad || p.requires_grad();
  }
  Tensor out(Shape{rows, d});
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  GradientTape* tape = GradientTape::active();
  if (tape != nullptr && any_grad) {
    out.set_requires_grad();
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape->record(out, [inputs = std::move(inputs), out]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : inputs) {
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (!(eps > 0.0f)) throw ParameterError("layer_norm: eps must be positive");
  const auto [rows, d] = as_rows(x);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match last dim of " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<float> xhat(x.numel());
  std::vector<float> inv_std(rows);
  auto dx = x.data();
  auto dg = gain.data();
  auto db = bias.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = dx.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double e = xr[c] - mu;
      var += e * e;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[r] = static_cast<float>(is);
    for (std::size_t c = 0; c < d; ++c) {
      const float h = static_cast<float>((xr[c] - mu) * is);
      xhat[r * d + c] = h;
      o[r * d + c] = h * dg[c] + db[c];
    }
  }
  if (auto* tape = tape_for({&x, &gain, &bias})) {
    out.set_requires_grad();
    tape->record(out, [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                       d]() mutable {
      auto g = out.grad();
      auto dgain = gain.data();
      if (gain.requires_grad()) {
        auto gg = gain.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0;
          double m2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = static_cast<double>(g[r * d + c]) * dgain[c];
            m1 += gh;
            m2 += gh * xhat[r * d + c];
          }
          m1 *= inv_d;
          m2 *= inv_d;
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = static_cast<double>(g[r * d + c]) * dgain[c];
            gx[r * d + c] += static_cast<float>(inv_std[r] * (gh - m1 - xhat[r * d + c] * m2));
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Tensor out(x.shape());
  auto dx = x.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = dx[i];
    o[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad();
    tape->record(out, [x, out]() mutable {
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      auto g = out.grad();
      auto dx = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = dx[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += static_cast<float>(g[i] * (cdf + v * pdf));
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ParameterError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = len == 0 ? 0 : x.numel() / (len * inner);
  Tensor out(x.shape());
  auto dx = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      float mx = dx[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, dx[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const float e = std::exp(dx[base + k * inner] - mx);
        o[base + k * inner] = e;
        z += e;
      }
      const float inv = static_cast<float>(1.0 / z);
      for (std::size_t k = 0; k < len; ++k) o[base + k * inner] *= inv;
    }
  }
  if (auto* tape = tape_for({&x})) {
    out.set_requires_grad();
    tape->record(out, [x, out, outer, inner, len]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t b = 0; b < inner; ++b) {
          const std::size_t base = a * len * inner + b;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += static_cast<float>(y[i] * (g[i] - dot));
          }
        }
      }
    });
  }
  return out;
}

Tensor multi_head_attention(const Tensor& qkv, std::size_t batch, std::size_t heads) {
  if (qkv.rank() != 2 || batch == 0 || heads == 0 || qkv.dim(0) % batch != 0 ||
      qkv.dim(1) % (3 * heads) != 0) {
    throw DimensionError("multi_head_attention: packed input " + shape_str(qkv.shape()) +
                         " incompatible with batch " + std::to_string(batch) + " and " +
                         std::to_string(heads) + " heads");
  }
  const auto tokens = static_cast<Eigen::Index>(qkv.dim(0) / batch);
  const auto dim = static_cast<Eigen::Index>(qkv.dim(1) / 3);
  const auto head_dim = dim / static_cast<Eigen::Index>(heads);
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(head_dim));
  const Eigen::Index in_stride = 3 * dim;

  Tensor out(Shape{qkv.dim(0), static_cast<std::size_t>(dim)});
  std::vector<float> probs(batch * heads * static_cast<std::size_t>(tokens * tokens));
  const float* src = qkv.data().data();
  float* dst = out.mutable_data().data();

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const float* base = src + static_cast<Eigen::Index>(b) * tokens * in_stride +
                          static_cast<Eigen::Index>(h) * head_dim;
      ConstStridedMap q(base, tokens, head_dim, Eigen::OuterStride<>(in_stride));
      ConstStridedMap k(base + dim, tokens, head_dim, Eigen::OuterStride<>(in_stride));
      ConstStridedMap v(base + 2 * dim, tokens, head_dim, Eigen::OuterStride<>(in_stride));
      MatMap p(probs.data() + (b * heads + h) * static_cast<std::size_t>(tokens * tokens), tokens,
               tokens);
      p.noalias() = (q * k.transpose()) * scale_factor;
      for (Eigen::Index r = 0; r < tokens; ++r) {
        const float mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      StridedMap o(dst + static_cast<Eigen::Index>(b) * tokens * dim + static_cast<Eigen::Index>(h) * head_dim,
                   tokens, head_dim, Eigen::OuterStride<>(dim));
      o.noalias() = p * v;
    }
  }

  if (auto* tape = tape_for({&qkv})) {
    out.set_requires_grad();
    tape->record(out, [qkv, out, probs = std::move(probs), batch, heads, tokens, dim, head_dim,
                       in_stride, scale_factor]() mutable {
      const float* src = qkv.data().data();
      float* gsrc = qkv.grad_buffer().data();
      const float* gout = out.grad().data();
      RowMat dp(tokens, tokens);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const Eigen::Index off = static_cast<Eigen::Index>(b) * tokens * in_stride +
                                   static_cast<Eigen::Index>(h) * head_dim;
          ConstStridedMap q(src + off, tokens, head_dim, Eigen::OuterStride<>(in_stride));
          ConstStridedMap k(src + off + dim, tokens, head_dim, Eigen::OuterStride<>(in_stride));
          ConstStridedMap v(src + off + 2 * dim, tokens, head_dim, Eigen::OuterStride<>(in_stride));
          StridedMap gq(gsrc + off, tokens, head_dim, Eigen::OuterStride<>(in_stride));
          StridedMap gk(gsrc + off + dim, tokens, head_dim, Eigen::OuterStride<>(in_stride));
          StridedMap gv(gsrc + off + 2 * dim, tokens, head_dim, Eigen::OuterStride<>(in_stride));
          ConstMatMap p(probs.data() + (b * heads + h) * static_cast<std::size_t>(tokens * tokens),
                        tokens, tokens);
          ConstStridedMap go(gout + static_cast<Eigen::Index>(b) * tokens * dim +
                                 static_cast<Eigen::Index>(h) * head_dim,
                             tokens, head_dim, Eigen::OuterStride<>(dim));
          gv.noalias() += p.transpose() * go;
          dp.noalias() = go * v.transpose();
          for (Eigen::Index r = 0; r < tokens; ++r) {
            const float dot = dp.row(r).dot(p.row(r));
            dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
          }
          dp *= scale_factor;
          gq.noalias() += dp * k;
          gk.noalias() += dp.transpose() * q;
        }
      }
    });
  }
  return out;
}

Tensor cosine_loss(const Tensor& pred, const Tensor& target, float eps) {
  require_same_shape(pred, target, "cosine_loss");
  if (!(eps > 0.0f)) throw ParameterError("cosine_loss: eps must be positive");
  const auto [rows, d] = as_rows(pred);
  if (rows == 0) throw DimensionError("cosine_loss: no rows");
  auto p = pred.data();
  auto t = target.data();
  std::vector<double> dots(rows), pn(rows), tn(rows);
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, pp = 0.0, tt = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double a = p[r * d + c];
      const double b = t[r * d + c];
      dot += a * b;
      pp += a * a;
      tt += b * b;
    }
    dots[r] = dot;
    pn[r] = std::sqrt(pp);
    tn[r] = std::sqrt(tt);
    acc += 1.0 - dot / std::max(pn[r] * tn[r], static_cast<double>(eps));
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(rows)));
  if (auto* tape = tape_for({&pred})) {
    out.set_requires_grad();
    tape->record(out, [pred, target, out, rows, d, eps, dots = std::move(dots), pn = std::move(pn),
                       tn = std::move(tn)]() mutable {
      const double g = out.grad()[0] / static_cast<double>(rows);
      auto p = pred.data();
      auto t = target.data();
      auto gp = pred.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double denom = pn[r] * tn[r];
        for (std::size_t c = 0; c < d; ++c) {
          double dcos;
          if (denom > eps) {
            const double cosv = dots[r] / denom;
            dcos = t[r * d + c] / denom - cosv * p[r * d + c] / (pn[r] * pn[r]);
          } else {
            dcos = t[r * d + c] / eps;
          }
          gp[r * d + c] += static_cast<float>(-g * dcos);
        }
      }
    });
  }
  return out;
}

Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target, float beta) {
  require_same_shape(pred, target, "smooth_l1_loss");
  if (!(beta > 0.0f)) throw ParameterError("smooth_l1_loss: beta must be positive");
  if (pred.numel() == 0) throw DimensionError("smooth_l1_loss: empty input");
  auto p = pred.data();
  auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = static_cast<double>(p[i]) - t[i];
    const double ae = std::abs(e);
    acc += ae < beta ? 0.5 * e * e / beta : ae - 0.5 * beta;
  }
  const std::size_t n = p.size();
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  if (auto* tape = tape_for({&pred})) {
    out.set_requires_grad();
    tape->record(out, [pred, target, out, beta, n]() mutable {
      const double g = out.grad()[0] / static_cast<double>(n);
      auto p = pred.data();
      auto t = target.data();
      auto gp = pred.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double e = static_cast<double>(p[i]) - t[i];
        const double de = std::abs(e) < beta ? e / beta : (e > 0 ? 1.0 : -1.0);
        gp[i] += static_cast<float>(g * de);
      }
    });
  }
  return out;
}

float cubic_kernel(float x, float a) {
  x = std::abs(x);
  if (x <= 1.0f) return ((a + 2.0f) * x - (a + 3.0f)) * x * x + 1.0f;
  if (x < 2.0f) return ((a * x - 5.0f * a) * x + 8.0f * a) * x - 4.0f * a;
  return 0.0f;
}

std::vector<CubicTaps> cubic_taps(std::size_t in_size, std::size_t out_size) {
  std::vector<CubicTaps> taps(out_size);
  const float ratio = static_cast<float>(in_size) / static_cast<float>(out_size);
  const auto last = static_cast<std::ptrdiff_t>(in_size) - 1;
  for (std::size_t o = 0; o < out_size; ++o) {
    const float src = (static_cast<float>(o) + 0.5f) * ratio - 0.5f;
    const float fl = std::floor(src);
    const float t = src - fl;
    const auto i0 = static_cast<std::ptrdiff_t>(fl);
    const float w[4] = {cubic_kernel(t + 1.0f), cubic_kernel(t), cubic_kernel(1.0f - t),
                        cubic_kernel(2.0f - t)};
    for (int k = 0; k < 4; ++k) {
      const std::ptrdiff_t idx = std::clamp<std::ptrdiff_t>(i0 - 1 + k, 0, last);
      taps[o].index[static_cast<std::size_t>(k)] = static_cast<std::size_t>(idx);
      taps[o].weight[static_cast<std::size_t>(k)] = w[k];
    }
  }
  return taps;
}

Tensor bicubic_resize(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
  if (grid.rank() != 3 && grid.rank() != 4) {
    throw DimensionError("bicubic_resize expects [h,w,d] or [b,h,w,d], got " + shape_str(grid.shape()));
  }
  const bool batched = grid.rank() == 4;
  const std::size_t nb = batched ? grid.dim(0) : 1;
  const std::size_t h = grid.dim(batched ? 1 : 0);
  const std::size_t w = grid.dim(batched ? 2 : 1);
  const std::size_t d = grid.dim(batched ? 3 : 2);
  if (h < 2 || w < 2) {
    throw DimensionError("bicubic_resize: degenerate grid " + shape_str(grid.shape()) +
                         " (need h, w >= 2)");
  }
  if (out_h < 1 || out_w < 1) throw DimensionError("bicubic_resize: empty output size");

  auto ty = cubic_taps(h, out_h);
  auto tx = cubic_taps(w, out_w);
  Shape out_shape = batched ? Shape{nb, out_h, out_w, d} : Shape{out_h, out_w, d};
  Tensor out(out_shape);
  auto src = grid.data();
  auto dst = out.mutable_data();
  std::vector<float> tmp(h * out_w * d);
  for (std::size_t b = 0; b < nb; ++b) {
    const float* g = src.data() + b * h * w * d;
    float* o = dst.data() + b * out_h * out_w * d;
    std::fill(tmp.begin(), tmp.end(), 0.0f);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t j = 0; j < out_w; ++j) {
        float* t = tmp.data() + (y * out_w + j) * d;
        for (int k = 0; k < 4; ++k) {
          const float wk = tx[j].weight[k];
          const float* gs = g + (y * w + tx[j].index[k]) * d;
          for (std::size_t c = 0; c < d; ++c) t[c] += wk * gs[c];
        }
      }
    }
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        float* oo = o + (i * out_w + j) * d;
        for (int k = 0; k < 4; ++k) {
          const float wk = ty[i].weight[k];
          const float* t = tmp.data() + (ty[i].index[k] * out_w + j) * d;
          for (std::size_t c = 0; c < d; ++c) oo[c] += wk * t[c];
        }
      }
    }
  }

  if (auto* tape = tape_for({&grid})) {
    out.set_requires_grad();
    tape->record(out, [grid, out, ty = std::move(ty), tx = std::move(tx), nb, h, w, d, out_h,
                       out_w]() mutable {
      auto gout = out.grad();
      auto gin = grid.grad_buffer();
      std::vector<float> gtmp(h * out_w * d);
      for (std::size_t b = 0; b < nb; ++b) {
        const float* go = gout.data() + b * out_h * out_w * d;
        float* gi = gin.data() + b * h * w * d;
        std::fill(gtmp.begin(), gtmp.end(), 0.0f);
        for (std::size_t i = 0; i < out_h; ++i) {
          for (std::size_t j = 0; j < out_w; ++j) {
            const float* g = go + (i * out_w + j) * d;
            for (int k = 0; k < 4; ++k) {
              const float wk = ty[i].weight[k];
              float* t = gtmp.data() + (ty[i].index[k] * out_w + j) * d;
              for (std::size_t c = 0; c < d; ++c) t[c] += wk * g[c];
            }
          }
        }
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t j = 0; j < out_w; ++j) {
            const float* t = gtmp.data() + (y * out_w + j) * d;
            for (int k = 0; k < 4; ++k) {
              const float wk = tx[j].weight[k];
              float* gs = gi + (y * w + tx[j].index[k]) * d;
              for (std::size_t c = 0; c < d; ++c) gs[c] += wk * t[c];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace eupe
