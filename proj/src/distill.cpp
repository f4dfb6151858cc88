#include "eupe/distill.hpp"

#include <algorithm>
#include <cmath>

#include "eupe/data.hpp"
#include "eupe/error.hpp"
#include "eupe/ops.hpp"
#include "eupe/tape.hpp"

namespace eupe {

std::vector<std::pair<std::string, Tensor>> AdapterHead::named_tensors() const {
  return {{"in_weight", in_weight}, {"norm_gain", norm_gain}, {"norm_bias", norm_bias}, {"out_weight", out_weight}};
}

std::vector<Tensor> AdapterHead::parameters() const { return {in_weight, norm_gain, norm_bias, out_weight}; }

AdapterHead AdapterHead::clone() const {
  return {in_weight.clone(), norm_gain.clone(), norm_bias.clone(), out_weight.clone()};
}

void AdapterHead::set_requires_grad(bool value) {
  for (auto& t : parameters()) t.set_requires_grad(value);
}

AdapterHead init_adapter_head(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng) {
  if (in_dim == 0 || hidden == 0 || out_dim == 0) throw ParameterError("adapter head dimensions must be positive");
  auto weight = [&rng](Shape shape) {
    Tensor t(std::move(shape));
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.truncated_normal(0.02));
    return t;
  };
  AdapterHead h;
  h.in_weight = weight({in_dim, hidden});
  h.norm_gain = Tensor(Shape{hidden}, 1.0f);
  h.norm_bias = Tensor(Shape{hidden});
  h.out_weight = weight({hidden, out_dim});
  return h;
}

AdapterHead identity_adapter_head(std::size_t dim) {
  AdapterHead h;
  h.in_weight = Tensor(Shape{dim, 2 * dim});
  h.out_weight = Tensor(Shape{2 * dim, dim});
  auto w1 = h.in_weight.mutable_data();
  auto w2 = h.out_weight.mutable_data();
  for (std::size_t i = 0; i < dim; ++i) {
    w1[i * 2 * dim + i] = 1.0f;
    w1[i * 2 * dim + dim + i] = -1.0f;
    w2[i * dim + i] = 1.0f;
    w2[(dim + i) * dim + i] = -1.0f;
  }
  h.norm_gain = Tensor(Shape{2 * dim}, 1.0f);
  h.norm_bias = Tensor(Shape{2 * dim});
  return h;
}

Tensor adapt_tokens(const AdapterHead& head, const Tensor& tokens) {
  const bool single = tokens.rank() == 1;
  if ((tokens.rank() != 1 && tokens.rank() != 2) || tokens.shape().back() != head.in_dim()) {
    throw DimensionError("adapter head expects [" + std::to_string(head.in_dim()) + "] features, got " +
                         shape_str(tokens.shape()));
  }
  Tensor x = single ? reshape(tokens, Shape{1, head.in_dim()}) : tokens;
  Tensor h = gelu(layer_norm(matmul(x, head.in_weight), head.norm_gain, head.norm_bias));
  Tensor y = matmul(h, head.out_weight);
  return single ? reshape(y, Shape{head.out_dim()}) : y;
}

TeacherStats identity_stats(std::size_t dim) {
  TeacherStats s;
  s.class_mean = Tensor(Shape{dim});
  s.class_std = Tensor(Shape{dim}, 1.0f);
  s.patch_mean = Tensor(Shape{dim});
  s.patch_std = Tensor(Shape{dim}, 1.0f);
  s.sample_count = 1;
  return s;
}

namespace {

void column_moments(const Tensor& rows, Tensor& mean_out, Tensor& std_out) {
  if (rows.rank() != 2 || rows.dim(0) == 0) {
    throw DimensionError("statistics need a non-empty [M,d] matrix, got " + shape_str(rows.shape()));
  }
  const std::size_t m = rows.dim(0), d = rows.dim(1);
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  auto x = rows.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) mu[c] += x[r * d + c];
  for (auto& v : mu) v /= static_cast<double>(m);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double e = x[r * d + c] - mu[c];
      var[c] += e * e;
    }
  mean_out = Tensor(Shape{d});
  std_out = Tensor(Shape{d});
  for (std::size_t c = 0; c < d; ++c) {
    mean_out.mutable_data()[c] = static_cast<float>(mu[c]);
    const double s = std::sqrt(var[c] / static_cast<double>(m));
    std_out.mutable_data()[c] = static_cast<float>(std::max(s, static_cast<double>(kStdFloor)));
  }
}

void check_stats_shape(const Tensor& tokens, const Tensor& mean, const Tensor& std) {
  if (!mean.defined() || !std.defined()) throw StateError("teacher statistics are not calibrated");
  if (tokens.rank() == 0 || tokens.shape().back() != mean.numel() || mean.numel() != std.numel()) {
    throw DimensionError("feature width of " + shape_str(tokens.shape()) + " does not match statistics of size " +
                         std::to_string(mean.numel()));
  }
}

}  // namespace

TeacherStats compute_stats(const Tensor& class_tokens, const Tensor& patch_tokens) {
  TeacherStats s;
  column_moments(class_tokens, s.class_mean, s.class_std);
  column_moments(patch_tokens, s.patch_mean, s.patch_std);
  if (s.class_mean.numel() != s.patch_mean.numel()) {
    throw DimensionError("class and patch streams differ in width");
  }
  s.sample_count = class_tokens.dim(0);
  return s;
}

Tensor normalize_features(const Tensor& tokens, const Tensor& mean, const Tensor& std) {
  check_stats_shape(tokens, mean, std);
  const std::size_t d = mean.numel();
  Tensor out(tokens.shape());
  auto x = tokens.data();
  auto y = out.mutable_data();
  auto mu = mean.data();
  auto sd = std.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu[i % d]) / sd[i % d];
  return out;
}

Tensor denormalize_features(const Tensor& tokens, const Tensor& mean, const Tensor& std) {
  check_stats_shape(tokens, mean, std);
  const std::size_t d = mean.numel();
  Tensor out(tokens.shape());
  auto x = tokens.data();
  auto y = out.mutable_data();
  auto mu = mean.data();
  auto sd = std.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sd[i % d] + mu[i % d];
  return out;
}

EncoderOutput run_teacher(const TeacherBinding& binding, std::span<const Tensor> images, std::size_t resolution) {
  NoGradScope no_grad;
  std::size_t res = resolution;
  if (res == 0) res = binding.native_resolution > 0 ? binding.native_resolution : binding.teacher.config.image_size;
  std::vector<Tensor> inputs;
  inputs.reserve(images.size());
  for (const auto& img : images) inputs.push_back(prepare_input(img, res));
  return encode_batch(binding.teacher, inputs);
}

TeacherStats calibrate_stats(const TeacherBinding& binding, std::span<const Tensor> images, std::size_t chunk) {
  if (images.empty()) throw ParameterError("calibration needs at least one image");
  chunk = std::max<std::size_t>(chunk, 1);
  std::vector<Tensor> cls, patches;
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    const std::size_t n = std::min(chunk, images.size() - i);
    auto out = run_teacher(binding, images.subspan(i, n));
    cls.push_back(out.class_token);
    patches.push_back(out.patch_tokens);
  }
  NoGradScope no_grad;
  return compute_stats(concat_rows(cls), concat_rows(patches));
}

AlignedTokens align_spatial(const Tensor& student, GridSize student_grid, const Tensor& teacher,
                            GridSize teacher_grid, std::size_t batch) {
  if (student_grid.rows != student_grid.cols || teacher_grid.rows != teacher_grid.cols ||
      student_grid.count() == 0 || teacher_grid.count() == 0) {
    throw ParameterError("spatial alignment needs square token grids");
  }
  if (batch == 0 || student.rank() != 2 || teacher.rank() != 2 ||
      student.dim(0) != batch * student_grid.count() || teacher.dim(0) != batch * teacher_grid.count()) {
    throw DimensionError("token matrices " + shape_str(student.shape()) + " and " + shape_str(teacher.shape()) +
                         " do not match their grids");
  }
  if (student_grid == teacher_grid) return {student, teacher, student_grid};
  auto resize = [batch](const Tensor& tokens, GridSize from, GridSize to) {
    const std::size_t d = tokens.dim(1);
    Tensor grid = reshape(tokens, Shape{batch, from.rows, from.cols, d});
    return reshape(bicubic_resize(grid, to.rows, to.cols), Shape{batch * to.count(), d});
  };
  if (student_grid.count() < teacher_grid.count()) {
    return {resize(student, student_grid, teacher_grid), teacher, teacher_grid};
  }
  NoGradScope no_grad;
  return {student, resize(teacher, teacher_grid, student_grid), student_grid};
}

Tensor class_token_loss(const Tensor& z_class, const Tensor& y_class, const LossConfig& cfg) {
  if (z_class.shape() != y_class.shape()) {
    throw ContractError("class tokens " + shape_str(z_class.shape()) + " and " + shape_str(y_class.shape()) +
                        " are not aligned");
  }
  return cosine_loss(z_class, y_class, cfg.cosine_eps);
}

Tensor patch_token_loss(const Tensor& z_patch, const Tensor& y_patch, const LossConfig& cfg) {
  if (z_patch.shape() != y_patch.shape()) {
    throw ContractError("patch tokens " + shape_str(z_patch.shape()) + " and " + shape_str(y_patch.shape()) +
                        " are not aligned");
  }
  return add(scale(cosine_loss(z_patch, y_patch, cfg.cosine_eps), cfg.alpha),
             scale(smooth_l1_loss(z_patch, y_patch, cfg.smooth_l1_beta), cfg.beta));
}

TeacherLossTerms teacher_loss(const TeacherBinding& binding, const EncoderOutput& student,
                              const EncoderOutput& teacher, const LossConfig& cfg) {
  if (!binding.stats.calibrated()) throw StateError("teacher '" + binding.name + "' has no calibrated statistics");
  Tensor y_class = normalize_features(teacher.class_token, binding.stats.class_mean, binding.stats.class_std);
  Tensor y_patch = normalize_features(teacher.patch_tokens, binding.stats.patch_mean, binding.stats.patch_std);
  Tensor z_class = adapt_tokens(binding.class_head, student.class_token);
  Tensor z_patch = adapt_tokens(binding.patch_head, student.patch_tokens);
  auto aligned = align_spatial(z_patch, student.grid, y_patch, teacher.grid, std::max<std::size_t>(student.batch, 1));

  TeacherLossTerms terms;
  terms.class_loss = class_token_loss(z_class, y_class, cfg);
  terms.patch_loss = patch_token_loss(aligned.student, aligned.teacher, cfg);
  terms.weighted_patch_loss = scale(terms.patch_loss, binding.gamma);
  return terms;
}

LossReport total_distill_loss(std::span<const TeacherBinding> bindings, const EncoderOutput& student,
                              std::span<const EncoderOutput> teacher_outputs, const LossConfig& cfg) {
  if (bindings.empty()) throw ParameterError("distillation needs at least one teacher");
  if (bindings.size() != teacher_outputs.size()) {
    throw ParameterError("got " + std::to_string(teacher_outputs.size()) + " teacher outputs for " +
                         std::to_string(bindings.size()) + " teachers");
  }
  LossReport report;
  for (std::size_t i = 0; i < bindings.size(); ++i) {
    auto terms = teacher_loss(bindings[i], student, teacher_outputs[i], cfg);
    Tensor term = add(terms.class_loss, terms.weighted_patch_loss);
    report.total_tensor = report.total_tensor.defined() ? add(report.total_tensor, term) : term;
    report.teachers.push_back({bindings[i].name, terms.class_loss.item(), terms.patch_loss.item(), bindings[i].gamma});
  }
  report.total = report.total_tensor.item();
  return report;
}

Fidelity token_fidelity(const TeacherBinding& binding, const EncoderOutput& student, const EncoderOutput& teacher) {
  NoGradScope no_grad;
  LossConfig cfg;
  Tensor y_class = normalize_features(teacher.class_token, binding.stats.class_mean, binding.stats.class_std);
  Tensor y_patch = normalize_features(teacher.patch_tokens, binding.stats.patch_mean, binding.stats.patch_std);
  Tensor z_class = adapt_tokens(binding.class_head, student.class_token);
  Tensor z_patch = adapt_tokens(binding.patch_head, student.patch_tokens);
  auto aligned = align_spatial(z_patch, student.grid, y_patch, teacher.grid, std::max<std::size_t>(student.batch, 1));
  Fidelity f;
  f.class_cosine = 1.0 - cosine_loss(z_class, y_class, cfg.cosine_eps).item();
  f.patch_cosine = 1.0 - cosine_loss(aligned.student, aligned.teacher, cfg.cosine_eps).item();
  return f;
}

}  // namespace eupe
