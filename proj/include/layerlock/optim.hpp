#pragma once

// AdamW with decoupled weight decay, a warmup + cosine learning-rate envelope,
// and the short linear ramp applied after every target switch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "layerlock/tensor.hpp"
#include "layerlock/vit.hpp"

namespace layerlock {

struct OptimConfig {
  double peak_lr = 3e-4;
  double end_lr = 0.0;
  std::size_t warmup_steps = 10000;
  std::size_t total_steps = 488282;
  double b1 = 0.90;
  double b2 = 0.95;
  double weight_decay = 0.05;
  /// When set, weight decay moves linearly from weight_decay to this value over
  /// total_steps.
  std::optional<double> weight_decay_end;
  double eps = 1e-8;
  std::size_t mini_warmup_steps = 1000;
  /// Initial learning rate at step 0 of the warmup ramp.
  double start_lr = 0.0;

  void validate() const {
    if (!(b1 > 0.0 && b1 < 1.0) || !(b2 > 0.0 && b2 < 1.0)) throw ContractError("AdamW betas must lie in (0, 1)");
    if (warmup_steps >= total_steps) throw ContractError("warmup_steps must be < total_steps");
    if (peak_lr < 0.0 || end_lr < 0.0 || start_lr < 0.0) throw ContractError("learning rates must be nonnegative");
    if (eps <= 0.0) throw ContractError("eps must be positive");
    if (weight_decay < 0.0) throw ContractError("weight_decay must be nonnegative");
  }
};

/// Norm parameters and linear biases are exempt from weight decay.
inline bool decay_exempt(ParamRole role) { return role != ParamRole::weight; }

/// Linear 0 -> peak over warmup_steps, then cosine from peak to end_lr over the
/// remaining steps, then end_lr.
inline double cosine_lr(std::size_t step, const OptimConfig& cfg) {
  if (step < cfg.warmup_steps) {
    return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * static_cast<double>(step) /
                              static_cast<double>(cfg.warmup_steps);
  }
  if (step >= cfg.total_steps) return cfg.end_lr;
  constexpr double pi = 3.14159265358979323846;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * 0.5 * (1.0 + std::cos(pi * progress));
}

/// min(1, (step - last_switch + 1) / W); 1 when W = 0 or no switch happened.
inline double mini_warmup_multiplier(std::size_t step, std::optional<std::size_t> last_switch_step,
                                     const OptimConfig& cfg) {
  if (cfg.mini_warmup_steps == 0 || !last_switch_step) return 1.0;
  if (step < *last_switch_step) throw ContractError("step precedes the last target switch");
  const double r = static_cast<double>(step - *last_switch_step + 1) /
                   static_cast<double>(cfg.mini_warmup_steps);
  return std::min(1.0, r);
}

inline double effective_lr(std::size_t step, std::optional<std::size_t> last_switch_step,
                           const OptimConfig& cfg) {
  return cosine_lr(step, cfg) * mini_warmup_multiplier(step, last_switch_step, cfg);
}

inline double weight_decay_at(std::size_t step, const OptimConfig& cfg) {
  if (!cfg.weight_decay_end) return cfg.weight_decay;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.total_steps));
  return cfg.weight_decay + (*cfg.weight_decay_end - cfg.weight_decay) * f;
}

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t count = 0;  // updates applied, for bias correction
};

/// First/second moments keyed by parameter name. Entries exist only for
/// parameters that are currently trainable.
struct OptState {
  std::map<std::string, Moments> entries;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries) n += e.m.size();
    return n;
  }
  void drop(const std::string& name) { entries.erase(name); }
};

/// One AdamW step over `params`, in place. Moments are created on a
/// parameter's first update.
inline void adamw_update(std::span<const NamedParam> params, const Gradients& grads, OptState& state,
                         double lr, const OptimConfig& cfg, double weight_decay) {
  for (const auto& p : params) {
    auto g = grads.or_zero(p.tensor);
    Tensor t = p.tensor;
    auto theta = t.mutable_data();
    if (g.size() != theta.size()) throw DimensionError("adamw_update: gradient shape mismatch for " + p.name);
    auto& mom = state.entries[p.name];
    if (mom.m.empty()) {
      mom.m.assign(theta.size(), 0.0);
      mom.v.assign(theta.size(), 0.0);
      mom.count = 0;
    }
    if (mom.m.size() != theta.size()) throw DimensionError("adamw_update: moment shape mismatch for " + p.name);
    mom.count += 1;
    const double bc1 = 1.0 - std::pow(cfg.b1, static_cast<double>(mom.count));
    const double bc2 = 1.0 - std::pow(cfg.b2, static_cast<double>(mom.count));
    const double wd = decay_exempt(p.role) ? 0.0 : weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      mom.m[i] = cfg.b1 * mom.m[i] + (1.0 - cfg.b1) * g[i];
      mom.v[i] = cfg.b2 * mom.v[i] + (1.0 - cfg.b2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * theta[i]);
    }
    detail::check_finite(theta, "adamw_update");
  }
}

inline void adamw_update(std::span<const NamedParam> params, const Gradients& grads, OptState& state,
                         double lr, const OptimConfig& cfg) {
  adamw_update(params, grads, state, lr, cfg, cfg.weight_decay);
}

}  // namespace layerlock
