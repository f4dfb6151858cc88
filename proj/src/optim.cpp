#include "eupe/optim.hpp"

#include <cmath>
#include <numbers>

#include "eupe/error.hpp"

namespace eupe {

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
  if (total_steps == 0) return base_lr;
  if (step > total_steps) throw ParameterError("cosine_lr: step past the end of the schedule");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ParameterError("warmup fraction must be in [0, 1)");
  const double warmup = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  const double progress = (s - warmup) / (static_cast<double>(total_steps) - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState init_adam(std::span<const Tensor> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.shape());
    state.v.emplace_back(p.shape());
  }
  return state;
}

void adamw_step(std::span<const Tensor> params, AdamState& state, double lr, const AdamWConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer state holds " + std::to_string(state.m.size()) + " buffers for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].shape() != params[i].shape() || state.v[i].shape() != params[i].shape()) {
      throw DimensionError("optimizer buffer " + shape_str(state.m[i].shape()) + " does not match parameter " +
                           shape_str(params[i].shape()));
    }
  }
  state.steps += 1;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto x = p.mutable_data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    const bool has_grad = p.has_grad();
    std::span<const float> g = has_grad ? p.grad() : std::span<const float>();
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double gk = has_grad ? g[k] : 0.0;
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + cfg.eps);
      x[k] = static_cast<float>(x[k] * decay - lr * update);
    }
  }
}

}  // namespace eupe
