#pragma once

// Analytic training-cost model for the masked-autoencoding path.
//
// FLOPs count matmuls only, 2 per multiply-add. Per block over n tokens:
//   qkv 2*n*D*3D + proj 2*n*D*D + scores 2*n*n*D + mixing 2*n*n*D
//   + mlp 2 * 2*n*D*Hm.
// A step runs, per clip: the context pass (embed + E encoder blocks over K
// kept tokens), the decoder pass (decoder blocks over N + K tokens), the
// active heads over N tokens, and the target pass (embed + blocks 1..t over
// all N tokens, forward only, t = deepest target layer). Backward costs 2x the
// forward of every trainable unit and nothing for frozen ones.
//
// Memory counts parameters (all heads created so far), two AdamW moments per
// trainable parameter, and activations kept for backward by trainable units:
// per block n*(8D + 2Hm) values plus n_heads*n*n attention probabilities, the
// raw context patches when the stem trains, and N*D head inputs per active head.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "layerlock/masking.hpp"
#include "layerlock/schedule.hpp"
#include "layerlock/vit.hpp"

namespace layerlock {

struct CostOptions {
  std::size_t batch_size = 1;
  double bytes_per_value = 4.0;
  /// Latent targets follow the frozen prefix (LayerLock); otherwise the target
  /// stays on pixels and freezing only drops backward work.
  bool switch_targets = false;
  bool multi_target = false;
};

/// Everything that determines one step's cost.
struct PhaseSpec {
  std::size_t frozen_prefix = 0;
  std::size_t target_layer = 0;           // deepest target computed this step
  std::vector<std::size_t> active_heads;  // output widths of trained heads
  std::vector<std::size_t> all_heads;     // output widths of every head that exists
};

struct StepCost {
  double forward_flops = 0.0;
  double backward_flops = 0.0;
  double target_flops = 0.0;
  double total_flops = 0.0;
  double param_bytes = 0.0;
  double optimizer_bytes = 0.0;
  double activation_bytes = 0.0;
  double memory_bytes = 0.0;
};

struct CostReport {
  std::vector<double> forward_flops;
  std::vector<double> backward_flops;
  std::vector<double> target_flops;
  std::vector<double> step_flops;
  std::vector<double> cumulative_flops;
  std::vector<double> memory_bytes;
  std::vector<std::size_t> frozen_prefix;
  std::vector<std::size_t> event_steps;

  double total_flops() const { return cumulative_flops.empty() ? 0.0 : cumulative_flops.back(); }
  double peak_memory() const {
    double m = 0.0;
    for (double v : memory_bytes) m = std::max(m, v);
    return m;
  }
};

inline double linear_flops(double n, double in, double out) { return 2.0 * n * in * out; }

inline double block_forward_flops(const ModelConfig& cfg, double n) {
  const double d = static_cast<double>(cfg.d_model);
  const double hm = static_cast<double>(cfg.mlp_hidden());
  return linear_flops(n, d, 3 * d) + linear_flops(n, d, d) + 2.0 * 2.0 * n * n * d +
         linear_flops(n, d, hm) + linear_flops(n, hm, d);
}

inline double block_param_count(const ModelConfig& cfg) {
  const double d = static_cast<double>(cfg.d_model);
  const double hm = static_cast<double>(cfg.mlp_hidden());
  return 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hm + hm) + (hm * d + d);
}

inline double stem_param_count(const ModelConfig& cfg) {
  const double p = static_cast<double>(cfg.patch_dim()), d = static_cast<double>(cfg.d_model);
  double n = p * d + d;
  if (cfg.learned_pos_embed) n += static_cast<double>(cfg.tokens()) * d;
  return n;
}

inline double block_activation_values(const ModelConfig& cfg, double n) {
  const double d = static_cast<double>(cfg.d_model);
  const double hm = static_cast<double>(cfg.mlp_hidden());
  return n * (8 * d + 2 * hm) + static_cast<double>(cfg.n_heads) * n * n;
}

/// Cost of one training step in a given phase.
inline StepCost step_cost(const ModelConfig& cfg, const PhaseSpec& phase, std::size_t kept,
                          const CostOptions& opt) {
  const double N = static_cast<double>(cfg.tokens());
  const double K = static_cast<double>(kept);
  const double B = static_cast<double>(opt.batch_size);
  const double D = static_cast<double>(cfg.d_model);
  const double P = static_cast<double>(cfg.patch_dim());
  const std::size_t E = cfg.encoder_depth();
  const std::size_t k = phase.frozen_prefix;

  const double embed_ctx = linear_flops(K, P, D);
  const double enc_block = block_forward_flops(cfg, K);
  const double dec_block = block_forward_flops(cfg, N + K);
  double heads_fwd = 0.0;
  for (auto w : phase.active_heads) heads_fwd += linear_flops(N, D, static_cast<double>(w));

  double fwd = embed_ctx + static_cast<double>(E) * enc_block +
               static_cast<double>(cfg.decoder_blocks) * dec_block + heads_fwd;
  double trainable_fwd = (k == 0 ? embed_ctx : 0.0) + static_cast<double>(E - k) * enc_block +
                         static_cast<double>(cfg.decoder_blocks) * dec_block + heads_fwd;
  double target = 0.0;
  if (phase.target_layer > 0) {
    target = linear_flops(N, P, D) + static_cast<double>(phase.target_layer) * block_forward_flops(cfg, N);
  }

  StepCost c;
  c.forward_flops = B * fwd;
  c.backward_flops = B * 2.0 * trainable_fwd;
  c.target_flops = B * target;
  c.total_flops = c.forward_flops + c.backward_flops + c.target_flops;

  double params = stem_param_count(cfg) + static_cast<double>(cfg.depth) * block_param_count(cfg);
  for (auto w : phase.all_heads) params += D * static_cast<double>(w) + static_cast<double>(w);
  double trainable = (k == 0 ? stem_param_count(cfg) : 0.0) +
                     static_cast<double>(cfg.depth - k) * block_param_count(cfg);
  for (auto w : phase.active_heads) trainable += D * static_cast<double>(w) + static_cast<double>(w);

  double acts = (k == 0 ? K * P : 0.0) + static_cast<double>(E - k) * block_activation_values(cfg, K) +
                static_cast<double>(cfg.decoder_blocks) * block_activation_values(cfg, N + K) +
                static_cast<double>(phase.active_heads.size()) * N * D;

  c.param_bytes = params * opt.bytes_per_value;
  c.optimizer_bytes = 2.0 * trainable * opt.bytes_per_value;
  c.activation_bytes = B * acts * opt.bytes_per_value;
  c.memory_bytes = c.param_bytes + c.optimizer_bytes + c.activation_bytes;
  return c;
}

/// Phase in force at `step` for a MAE-path run.
inline PhaseSpec phase_at(const ModelConfig& cfg, const FreezeSchedule& sched, std::size_t step,
                          const CostOptions& opt) {
  PhaseSpec ph;
  ph.frozen_prefix = sched.frozen_at(step);
  const std::size_t pixel_w = cfg.patch_dim(), latent_w = cfg.d_model;
  ph.all_heads.push_back(pixel_w);
  if (!opt.switch_targets || sched.events_at(step) == 0) {
    ph.active_heads.push_back(pixel_w);
    return ph;
  }
  const std::size_t events = sched.events_at(step);
  // Each event creates a head unless the target layer repeats (cap reached).
  std::vector<std::size_t> layers;
  for (std::size_t e = 1; e <= events; ++e) {
    const std::size_t s = sched.start + (e - 1) * sched.interval;
    const auto t = sched.target_at(s).layer;
    if (layers.empty() || layers.back() != t) layers.push_back(t);
  }
  for (std::size_t i = 0; i < layers.size(); ++i) ph.all_heads.push_back(latent_w);
  ph.target_layer = layers.back();
  if (opt.multi_target) {
    ph.active_heads = ph.all_heads;
  } else {
    ph.active_heads.push_back(latent_w);
  }
  return ph;
}

/// Per-step and cumulative cost series. Costs are constant between freeze
/// events, so each phase is evaluated once and repeated.
inline CostReport flops_estimate(const ModelConfig& cfg, const FreezeSchedule& sched, const MaskSpec& mask,
                                 std::size_t steps, const CostOptions& opt) {
  CostReport r;
  r.event_steps = sched.event_steps(steps);
  const std::size_t kept = kept_count(cfg.tokens(), mask.mask_ratio);
  std::vector<std::size_t> bounds{0};
  for (auto s : r.event_steps)
    if (s > 0) bounds.push_back(s);
  bounds.push_back(steps);
  double cumulative_before = 0.0;
  for (std::size_t seg = 0; seg + 1 < bounds.size(); ++seg) {
    const std::size_t a = bounds[seg], b = bounds[seg + 1];
    if (a >= b) continue;
    const auto cost = step_cost(cfg, phase_at(cfg, sched, a, opt), kept, opt);
    const auto frozen = sched.frozen_at(a);
    for (std::size_t s = a; s < b; ++s) {
      r.forward_flops.push_back(cost.forward_flops);
      r.backward_flops.push_back(cost.backward_flops);
      r.target_flops.push_back(cost.target_flops);
      r.step_flops.push_back(cost.total_flops);
      r.cumulative_flops.push_back(cumulative_before + static_cast<double>(s - a + 1) * cost.total_flops);
      r.memory_bytes.push_back(cost.memory_bytes);
      r.frozen_prefix.push_back(frozen);
    }
    cumulative_before += static_cast<double>(b - a) * cost.total_flops;
  }
  return r;
}

}  // namespace layerlock
