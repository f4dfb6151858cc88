#pragma once

#include <span>
#include <vector>

#include "eupe/tensor.hpp"

namespace eupe {

// Linear warmup to base_lr over warmup_fraction * total_steps, then cosine
// decay to zero at total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t steps = 0;  // updates taken, for bias correction
};

AdamState init_adam(std::span<const Tensor> params);

// Decoupled weight decay: p <- p (1 - lr wd), then the bias-corrected Adam
// update. Parameters without a gradient are treated as having zero gradient.
void adamw_step(std::span<const Tensor> params, AdamState& state, double lr, const AdamWConfig& config);

}  // namespace eupe
