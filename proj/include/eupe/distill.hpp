#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eupe/rng.hpp"
#include "eupe/tensor.hpp"
#include "eupe/vit.hpp"

namespace eupe {

// Two-layer MLP mapping student features into one teacher's space:
// linear (no bias) -> LayerNorm -> GELU -> linear (no bias).
struct AdapterHead {
  Tensor in_weight;   // [d_S, hidden]
  Tensor norm_gain;   // [hidden]
  Tensor norm_bias;   // [hidden]
  Tensor out_weight;  // [hidden, d_T]

  std::size_t in_dim() const { return in_weight.dim(0); }
  std::size_t hidden() const { return in_weight.dim(1); }
  std::size_t out_dim() const { return out_weight.dim(1); }

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> parameters() const;
  AdapterHead clone() const;
  void set_requires_grad(bool value);
};

AdapterHead init_adapter_head(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng);

// Head computing x / rms(x) for inputs with zero mean over features (such as
// LayerNorm outputs): hidden = [x, -x], and GELU(u) - GELU(-u) = u.
AdapterHead identity_adapter_head(std::size_t dim);

// [d_S] -> [d_T] or [N, d_S] -> [N, d_T].
Tensor adapt_tokens(const AdapterHead& head, const Tensor& tokens);

inline constexpr float kStdFloor = 1e-6f;

// Fixed per-coordinate statistics of one teacher's class-token and
// patch-token streams.
struct TeacherStats {
  Tensor class_mean, class_std;
  Tensor patch_mean, patch_std;
  std::size_t sample_count = 0;

  bool calibrated() const { return class_mean.defined() && sample_count > 0; }
  std::size_t dim() const { return class_mean.defined() ? class_mean.numel() : 0; }
};

TeacherStats identity_stats(std::size_t dim);
// Population mean/std per coordinate. class_tokens is [M, d]; patch_tokens is
// [K, d] with all positions of all images pooled.
TeacherStats compute_stats(const Tensor& class_tokens, const Tensor& patch_tokens);

Tensor normalize_features(const Tensor& tokens, const Tensor& mean, const Tensor& std);
Tensor denormalize_features(const Tensor& tokens, const Tensor& mean, const Tensor& std);

struct TeacherBinding {
  std::string name;
  EncoderParams teacher;  // frozen
  AdapterHead class_head;
  AdapterHead patch_head;
  TeacherStats stats;
  float gamma = 1.0f;
  std::size_t native_resolution = 0;

  std::size_t dim() const { return teacher.config.dim; }
};

// Runs the frozen teacher on raw [0,1] images, at its native resolution
// unless another one is given.
EncoderOutput run_teacher(const TeacherBinding& binding, std::span<const Tensor> images,
                          std::size_t resolution = 0);

// Calibrates on raw [0,1] images, processed in chunks.
TeacherStats calibrate_stats(const TeacherBinding& binding, std::span<const Tensor> images,
                             std::size_t chunk = 64);

struct LossConfig {
  float alpha = 0.9f;  // cosine weight in the patch loss
  float beta = 0.1f;   // smooth-L1 weight in the patch loss
  float cosine_eps = 1e-8f;
  float smooth_l1_beta = 1.0f;
};

struct AlignedTokens {
  Tensor student;
  Tensor teacher;
  GridSize grid;
};

// Brings [B*Ns, d] and [B*Nt, d] token grids to the larger of the two square
// grids by resizing the smaller one; the larger passes through untouched.
AlignedTokens align_spatial(const Tensor& student, GridSize student_grid, const Tensor& teacher,
                            GridSize teacher_grid, std::size_t batch = 1);

Tensor class_token_loss(const Tensor& z_class, const Tensor& y_class, const LossConfig& cfg = {});
Tensor patch_token_loss(const Tensor& z_patch, const Tensor& y_patch, const LossConfig& cfg = {});

struct TeacherLossTerms {
  Tensor class_loss;
  Tensor patch_loss;           // unweighted
  Tensor weighted_patch_loss;  // gamma * patch_loss
};

TeacherLossTerms teacher_loss(const TeacherBinding& binding, const EncoderOutput& student,
                              const EncoderOutput& teacher, const LossConfig& cfg = {});

struct TeacherLossEntry {
  std::string teacher;
  float class_loss = 0.0f;
  float patch_loss = 0.0f;
  float gamma = 1.0f;
};

struct LossReport {
  std::vector<TeacherLossEntry> teachers;
  float total = 0.0f;
  Tensor total_tensor;  // differentiable sum
};

LossReport total_distill_loss(std::span<const TeacherBinding> bindings, const EncoderOutput& student,
                              std::span<const EncoderOutput> teacher_outputs, const LossConfig& cfg = {});

struct Fidelity {
  double class_cosine = 0.0;
  double patch_cosine = 0.0;
};

// Mean per-token cosine similarity between adapted student tokens and
// normalized teacher tokens.
Fidelity token_fidelity(const TeacherBinding& binding, const EncoderOutput& student,
                        const EncoderOutput& teacher);

}  // namespace eupe
