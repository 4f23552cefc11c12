#pragma once

// Training loop with optional collapse probes and checkpoint hooks.

#include <cstddef>
#include <functional>
#include <vector>

#include "layerlock/collapse.hpp"
#include "layerlock/engine.hpp"
#include "layerlock/jepa.hpp"

namespace layerlock {

/// Fixed held-out clips used by the collapse probes.
inline std::vector<VideoClip> probe_clips(const TrainConfig& cfg) {
  std::vector<VideoClip> out;
  for (std::size_t i = 0; i < cfg.probe_clips; ++i)
    out.push_back(synth_video(cfg.data.kind, derive_seed(cfg.seed, Stream::probe, {i}), cfg.model.input));
  return out;
}

/// Full-grid features of block `layer` (0 = last encoder block) for each clip.
inline std::vector<Tensor> probe_features(const VitModel& model, std::span<const VideoClip> clips,
                                          std::size_t layer = 0) {
  const auto& cfg = model.config();
  if (layer == 0) layer = cfg.encoder_depth();
  NoGradGuard guard;
  std::vector<Tensor> out;
  for (const auto& c : clips) out.push_back(model.encode_prefix(patchify(c, cfg.patch), layer, 0, false).embeddings);
  return out;
}

struct RunHooks {
  std::function<void(const StepResult&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;
};

/// Runs steps until st.step == end_step. Probe metrics, when due, are attached
/// to the step's extras as probe_token_variance / probe_batch_variance /
/// probe_effective_rank.
inline void run_until(TrainState& st, const TrainConfig& cfg, std::size_t end_step, const RunHooks& hooks = {}) {
  std::vector<VideoClip> probes;
  if (cfg.probe_every > 0) probes = probe_clips(cfg);
  while (st.step < end_step) {
    const auto batch = make_batch(cfg, st.step);
    auto r = run_step(st, cfg, batch);
    if (cfg.probe_every > 0 && st.step % cfg.probe_every == 0) {
      const auto feats = probe_features(st.model, probes);
      const auto m = collapse_metrics(feats);
      r.extras["probe_token_variance"] = m.token_variance;
      r.extras["probe_batch_variance"] = m.batch_variance;
      r.extras["probe_effective_rank"] = m.effective_rank;
    }
    if (hooks.on_step) hooks.on_step(r);
    if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) hooks.on_checkpoint(st);
  }
}

/// Fresh run of cfg.steps steps; returns the per-step results.
inline std::vector<StepResult> run_training(const TrainConfig& cfg, const RunHooks& hooks = {}) {
  auto st = init_state(cfg);
  std::vector<StepResult> trace;
  RunHooks h = hooks;
  h.on_step = [&](const StepResult& r) {
    trace.push_back(r);
    if (hooks.on_step) hooks.on_step(r);
  };
  run_until(st, cfg, cfg.steps, h);
  return trace;
}

}  // namespace layerlock
