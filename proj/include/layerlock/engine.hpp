#pragma once

// Training state and the masked-autoencoding training step with progressive
// freezing and target switching.
//
// One step: read the frozen prefix k off the schedule (freezing more layers if
// it grew), mask each clip, encode the visible tokens with blocks <= k running
// graph-free, decode against the rotation-coded latents, predict the current
// target with its head, and regress onto stop-gradient targets taken from the
// full unmasked grid. Only unfrozen parameters and active heads are updated.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "layerlock/cost.hpp"
#include "layerlock/data.hpp"
#include "layerlock/masking.hpp"
#include "layerlock/optim.hpp"
#include "layerlock/rng.hpp"
#include "layerlock/schedule.hpp"
#include "layerlock/tensor.hpp"
#include "layerlock/vit.hpp"

namespace layerlock {

enum class TrainMode {
  layerlock,        // progressive freezing, optionally with target switching
  baseline,         // plain MAE, schedule ignored
  latent_nofreeze,  // MAE + weighted latent losses, never freezes
  jepa,             // EMA-teacher latent prediction with freezing
};

struct DivergenceError : NumericError {
  using NumericError::NumericError;
};

struct TargetOptions {
  /// Fraction of tokens the latent loss is computed on; pixel loss always uses
  /// every token.
  double loss_patch_fraction = 1.0;
  /// Sum the losses of pixels and every target so far instead of only the latest.
  bool multi_target = false;
  /// Move the target to the frozen prefix at each freeze event. When off,
  /// freezing only removes layers from training and the target stays pixels.
  bool switch_targets = true;
};

enum class LatentWeightSchedule { constant, cosine };

struct LatentNoFreezeOptions {
  LatentWeightSchedule schedule = LatentWeightSchedule::constant;
  double weight = 1.0;
  std::vector<std::size_t> layers;  // target layers; empty = every encoder layer

  /// constant: weight. cosine: weight * (1 - cos(2 pi s / total)) / 2, which is
  /// 0 at the start and peaks at mid-run.
  double weight_at(std::size_t step, std::size_t total_steps) const {
    if (schedule == LatentWeightSchedule::constant) return weight;
    constexpr double two_pi = 6.283185307179586476925286766559;
    const double f = total_steps == 0 ? 0.0 : static_cast<double>(step) / static_cast<double>(total_steps);
    return weight * 0.5 * (1.0 - std::cos(two_pi * f));
  }
};

struct JepaOptions {
  std::size_t decoder_depth = 12;
  double ema_momentum = 0.998;
  /// Stored as given by the reference recipe; not used by the toy pipeline.
  std::size_t stride = 4;
};

struct DataConfig {
  SynthKind kind = SynthKind::moving_shapes;
  std::size_t batch_size = 8;
};

struct TrainConfig {
  std::string name = "custom";
  TrainMode mode = TrainMode::layerlock;
  ModelConfig model;
  OptimConfig optim;
  FreezeSchedule schedule;
  MaskSpec mask;
  TargetOptions target;
  LatentNoFreezeOptions latent;
  JepaOptions jepa;
  DataConfig data;
  std::uint64_t seed = 0;
  std::size_t steps = 1000;
  std::size_t checkpoint_every = 0;
  /// Collapse probes every this many steps (0 = never).
  std::size_t probe_every = 0;
  std::size_t probe_clips = 8;

  void validate() const {
    model.validate();
    optim.validate();
    mask.validate();
    if (mode == TrainMode::layerlock || mode == TrainMode::jepa) schedule.validate(model.encoder_depth());
    if (!(target.loss_patch_fraction > 0.0 && target.loss_patch_fraction <= 1.0)) {
      throw ContractError("target.loss_patch_fraction must lie in (0, 1]");
    }
    if (data.batch_size == 0) throw ContractError("data.batch_size must be >= 1");
    for (auto l : latent.layers) {
      if (l == 0 || l > model.encoder_depth()) throw ContractError("latent.layers entries must lie in [1, encoder depth]");
    }
    if (mode == TrainMode::jepa) {
      if (!(jepa.ema_momentum >= 0.0 && jepa.ema_momentum <= 1.0)) throw ContractError("jepa.ema_momentum must lie in [0, 1]");
      if (!model.learned_pos_embed) throw ContractError("jepa mode uses learned positional embeddings");
    }
  }

  /// Whether freeze events move the target.
  bool switching() const { return mode == TrainMode::layerlock && target.switch_targets; }
};

struct FreezeEventRecord {
  std::size_t step = 0;
  std::size_t frozen_prefix = 0;
  std::size_t newly_frozen_params = 0;
  TargetKind target;
};

/// Predictor, EMA teacher and heads of the latent-prediction path.
struct JepaState {
  std::vector<BlockParams> predictor;
  Tensor mask_token;     // 1 x D
  Tensor predictor_pos;  // N x D
  std::map<std::size_t, LinearParams> heads;
  VitModel teacher;

  JepaState clone() const {
    JepaState s;
    for (const auto& b : predictor) s.predictor.push_back(detail::clone_block(b));
    s.mask_token = mask_token.clone();
    s.predictor_pos = predictor_pos.clone();
    for (const auto& [k, h] : heads) s.heads[k] = detail::clone_linear(h);
    s.teacher = teacher.clone();
    return s;
  }
};

struct TrainState {
  VitModel model;
  OptState opt;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  /// Latest target; with multi_target, every target so far is trained.
  TargetKind target;
  std::vector<TargetKind> active_targets{TargetKind{0}};
  std::optional<std::size_t> last_switch_step;
  std::vector<FreezeEventRecord> events;
  std::optional<JepaState> jepa;

  TrainState() = default;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;

  TrainState clone() const {
    TrainState s;
    s.model = model.clone();
    s.opt = opt;
    s.step = step;
    s.seed = seed;
    s.target = target;
    s.active_targets = active_targets;
    s.last_switch_step = last_switch_step;
    s.events = events;
    if (jepa) s.jepa = jepa->clone();
    return s;
  }
};

struct StepResult {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t frozen_prefix = 0;
  TargetKind target;
  double flops_step = 0.0;
  std::map<std::string, double> extras;
};

// ---------------------------------------------------------------------------

/// Every parameter of the state (student, predictor), in a fixed order. The
/// EMA teacher is excluded.
inline std::vector<NamedParam> all_parameters(const TrainState& st) {
  auto out = named_parameters(st.model.params());
  if (st.jepa) {
    const auto& j = *st.jepa;
    for (std::size_t i = 0; i < j.predictor.size(); ++i)
      detail::append_block(out, "predictor." + std::to_string(i + 1), j.predictor[i], -1);
    out.push_back({"predictor.mask_token", j.mask_token, ParamRole::weight, -1});
    out.push_back({"predictor.pos_embed", j.predictor_pos, ParamRole::weight, -1});
    for (const auto& [k, h] : j.heads) detail::append_linear(out, "predictor.head." + std::to_string(k), h, -1);
  }
  return out;
}

inline bool head_is_active(const TrainState& st, const std::string& name) {
  auto layer_of = [](const std::string& n, const std::string& prefix) -> std::optional<std::size_t> {
    if (n.rfind(prefix, 0) != 0) return std::nullopt;
    const auto rest = n.substr(prefix.size());
    return static_cast<std::size_t>(std::stoul(rest.substr(0, rest.find('.'))));
  };
  auto active = [&](std::size_t layer) {
    return std::find(st.active_targets.begin(), st.active_targets.end(), TargetKind{layer}) != st.active_targets.end();
  };
  if (name.rfind("pixel_head.", 0) == 0) return active(0);
  if (auto l = layer_of(name, "latent_head.")) return active(*l);
  if (auto l = layer_of(name, "predictor.head.")) return active(*l);
  return true;
}

/// Parameters the optimizer updates this step: everything outside the frozen
/// prefix, restricted to the heads of active targets.
inline std::vector<NamedParam> trainable_parameters(const TrainState& st) {
  std::vector<NamedParam> out;
  const auto k = static_cast<int>(st.model.params().frozen_prefix);
  for (auto& p : all_parameters(st)) {
    if (p.block == 0 && k >= 1) continue;
    if (p.block >= 1 && p.block <= k) continue;
    if (p.block < 0 && !head_is_active(st, p.name)) continue;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::size_t frozen_parameter_count(const TrainState& st) {
  std::size_t n = 0;
  const auto k = static_cast<int>(st.model.params().frozen_prefix);
  for (const auto& p : named_parameters(st.model.params())) {
    if ((p.block == 0 && k >= 1) || (p.block >= 1 && p.block <= k)) n += p.tensor.numel();
  }
  return n;
}

/// Moment scalars held for backbone parameters (heads and predictor excluded).
inline std::size_t backbone_moment_count(const TrainState& st) {
  std::size_t n = 0;
  for (const auto& p : named_parameters(st.model.params())) {
    if (p.block < 0) continue;
    auto it = st.opt.entries.find(p.name);
    if (it != st.opt.entries.end()) n += it->second.m.size();
  }
  return n;
}

inline TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.model = VitModel(cfg.model, cfg.seed);
  st.seed = cfg.seed;
  if (cfg.mode == TrainMode::latent_nofreeze) {
    // Every latent head exists and trains from step 0.
    std::vector<std::size_t> layers = cfg.latent.layers;
    if (layers.empty())
      for (std::size_t l = 1; l <= cfg.model.encoder_depth(); ++l) layers.push_back(l);
    for (auto l : layers) {
      st.model.head({l});
      st.active_targets.push_back({l});
    }
  }
  if (cfg.mode == TrainMode::jepa) {
    JepaState j;
    Rng rng(derive_seed(cfg.seed, Stream::init, {1}));
    for (std::size_t i = 0; i < cfg.jepa.decoder_depth; ++i) j.predictor.push_back(detail::init_block(cfg.model, rng));
    j.mask_token = detail::init_normal({1, cfg.model.d_model}, 0.02, rng);
    j.predictor_pos = detail::init_normal({cfg.model.tokens(), cfg.model.d_model}, 0.02, rng);
    j.heads.emplace(1, detail::zero_linear(cfg.model.d_model, cfg.model.d_model));
    j.teacher = st.model.clone();
    for (auto& p : named_parameters(j.teacher.params())) p.tensor.set_requires_grad(false);
    st.jepa = std::move(j);
    st.target = {1};
    st.active_targets = {TargetKind{1}};
  }
  return st;
}

/// Grows the frozen prefix to k_new. Frozen parameters stop requiring grad and
/// lose their moments; with target switching, a fresh zero-initialised head
/// for the new target is created and the mini-warmup restarts.
inline void freeze_event(TrainState& st, const TrainConfig& cfg, std::size_t k_new, std::size_t step) {
  auto& params = st.model.params();
  const std::size_t k_old = params.frozen_prefix;
  if (k_new < k_old) throw ContractError("freeze_event: frozen prefix cannot shrink");
  if (k_new > cfg.model.encoder_depth()) throw ContractError("freeze_event: decoder blocks are never frozen");
  FreezeEventRecord rec;
  rec.step = step;
  rec.frozen_prefix = k_new;
  rec.target = st.target;
  if (k_new == k_old) {
    st.events.push_back(rec);
    return;
  }
  std::size_t newly = 0;
  for (const auto& p : named_parameters(params)) {
    const bool now_frozen = (p.block == 0 && k_new >= 1) || (p.block >= 1 && p.block <= static_cast<int>(k_new));
    const bool was_frozen = (p.block == 0 && k_old >= 1) || (p.block >= 1 && p.block <= static_cast<int>(k_old));
    if (now_frozen && !was_frozen) {
      Tensor t = p.tensor;
      t.set_requires_grad(false);
      st.opt.drop(p.name);
      newly += t.numel();
    }
  }
  params.frozen_prefix = k_new;
  rec.newly_frozen_params = newly;

  if (cfg.switching() || cfg.mode == TrainMode::jepa) {
    const TargetKind next = cfg.mode == TrainMode::jepa
                                ? TargetKind{std::max<std::size_t>(1, cfg.schedule.target_at(step).layer)}
                                : cfg.schedule.target_at(step);
    if (!(next == st.target)) {
      if (cfg.mode == TrainMode::jepa) {
        if (!st.jepa->heads.count(next.layer))
          st.jepa->heads.emplace(next.layer, detail::zero_linear(cfg.model.d_model, cfg.model.d_model));
      } else {
        st.model.head(next);
      }
      std::vector<TargetKind> dropped;
      if (cfg.target.multi_target && cfg.mode != TrainMode::jepa) {
        st.active_targets.push_back(next);
      } else {
        dropped = st.active_targets;
        st.active_targets = {next};
      }
      for (const auto& t : dropped) {
        const std::string prefix = cfg.mode == TrainMode::jepa ? "predictor.head." + std::to_string(t.layer)
                                   : t.is_pixels()             ? std::string("pixel_head")
                                                               : "latent_head." + std::to_string(t.layer);
        st.opt.drop(prefix + ".weight");
        st.opt.drop(prefix + ".bias");
      }
      st.target = next;
      st.last_switch_step = step;
    }
  }
  rec.target = st.target;
  st.events.push_back(rec);
}

/// Stop-gradient prediction targets for one clip: the raw patches for k = 0,
/// otherwise the output of block k on the full grid. Blocks past k never run.
inline Tensor compute_targets(const VitModel& model, const TokenBatch& full, std::size_t k) {
  if (k > model.params().frozen_prefix) {
    throw ContractError("compute_targets: layer " + std::to_string(k) + " is not frozen (prefix " +
                        std::to_string(model.params().frozen_prefix) + ")");
  }
  if (k == 0) return stop_gradient(full.tokens);
  NoGradGuard guard;
  return stop_gradient(model.encode_prefix(full, k, k, false).embeddings);
}

/// Layer outputs 1..max_layer on the full grid without the frozen-prefix
/// contract (used by the no-freeze latent ablation).
inline std::vector<Tensor> unfrozen_layer_targets(const VitModel& model, const TokenBatch& full,
                                                  std::size_t max_layer) {
  NoGradGuard guard;
  auto r = model.encode_prefix(full, max_layer, 0, true);
  for (auto& t : r.layer_outputs) t = stop_gradient(t);
  return r.layer_outputs;
}

/// Mean squared error over the selected rows (all rows when `indices` is unset).
inline Tensor layerlock_loss(const Tensor& preds, const Tensor& targets,
                             const std::optional<std::vector<std::size_t>>& indices = std::nullopt) {
  if (preds.shape() != targets.shape()) {
    throw DimensionError("layerlock_loss: prediction " + shape_str(preds.shape()) + " vs target " +
                         shape_str(targets.shape()));
  }
  if (!indices) return mse(preds, targets);
  if (indices->empty()) throw ContractError("layerlock_loss: empty index set");
  return mse(gather_rows(preds, *indices), gather_rows(targets, *indices));
}

/// Training clips for `step`; a pure function of (seed, step).
inline std::vector<VideoClip> make_batch(const TrainConfig& cfg, std::size_t step) {
  std::vector<VideoClip> out;
  out.reserve(cfg.data.batch_size);
  for (std::size_t b = 0; b < cfg.data.batch_size; ++b)
    out.push_back(synth_video(cfg.data.kind, batch_clip_seed(cfg.seed, step, b), cfg.model.input));
  return out;
}

inline CostOptions cost_options(const TrainConfig& cfg) {
  CostOptions o;
  o.batch_size = cfg.data.batch_size;
  o.switch_targets = cfg.switching();
  o.multi_target = cfg.target.multi_target;
  return o;
}

inline std::string target_label(const TrainState& st, const TrainConfig& cfg) {
  if (cfg.mode == TrainMode::latent_nofreeze) return "pixels+latent";
  if (cfg.target.multi_target && st.active_targets.size() > 1) {
    std::string s;
    for (const auto& t : st.active_targets) s += (s.empty() ? "" : "+") + t.name();
    return s;
  }
  return st.target.name();
}

namespace detail {

inline double mae_step_flops(const TrainState& st, const TrainConfig& cfg) {
  PhaseSpec ph;
  ph.frozen_prefix = st.model.params().frozen_prefix;
  std::size_t deepest = 0;
  for (const auto& t : st.active_targets) {
    ph.active_heads.push_back(t.is_pixels() ? cfg.model.patch_dim() : cfg.model.d_model);
    deepest = std::max(deepest, t.layer);
  }
  ph.target_layer = deepest;
  ph.all_heads.push_back(cfg.model.patch_dim());
  for (std::size_t i = 0; i < st.model.params().latent_heads.size(); ++i) ph.all_heads.push_back(cfg.model.d_model);
  return step_cost(cfg.model, ph, kept_count(cfg.model.tokens(), cfg.mask.mask_ratio), cost_options(cfg)).total_flops;
}

}  // namespace detail

/// One masked-autoencoding step (layerlock, baseline and latent_nofreeze modes).
inline StepResult train_step(TrainState& st, const TrainConfig& cfg, std::span<const VideoClip> batch) {
  if (cfg.mode == TrainMode::jepa) throw ContractError("train_step: use jepa_train_step for the jepa mode");
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const std::size_t step = st.step;

  if (cfg.mode == TrainMode::layerlock && cfg.schedule.enabled) {
    const std::size_t k = freeze_layer_schedule(step, cfg.schedule);
    if (k > st.model.params().frozen_prefix) freeze_event(st, cfg, k, step);
  }
  const std::size_t k = st.model.params().frozen_prefix;
  const auto& mcfg = cfg.model;
  const std::size_t n_tokens = mcfg.tokens();
  const auto latents = decoding_tokens(st.model);

  std::size_t deepest = 0;
  for (const auto& t : st.active_targets) deepest = std::max(deepest, t.layer);
  const double latent_weight =
      cfg.mode == TrainMode::latent_nofreeze ? cfg.latent.weight_at(step, cfg.steps) : 1.0;

  std::vector<Tensor> clip_losses;
  clip_losses.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto full = patchify(batch[b], mcfg.patch);
    Rng mask_rng(derive_seed(st.seed, Stream::mask, {step, b}));
    const auto keep = random_mask(n_tokens, cfg.mask.mask_ratio, mask_rng);
    TokenBatch ctx;
    ctx.tokens = gather_rows(full.tokens, keep);
    for (auto i : keep) ctx.positions.push_back(full.positions[i]);

    const auto enc = st.model.encode(ctx, k, false);
    const Tensor out = st.model.decode(enc.embeddings, ctx.positions, latents.tokens, latents.positions);

    // Targets for every active layer come from one truncated full-grid pass.
    std::vector<Tensor> layer_targets;
    if (deepest > 0) {
      if (cfg.mode == TrainMode::latent_nofreeze) {
        layer_targets = unfrozen_layer_targets(st.model, full, deepest);
      } else {
        if (deepest > k) throw ContractError("target layer beyond the frozen prefix");
        NoGradGuard guard;
        auto r = st.model.encode_prefix(full, deepest, deepest, true);
        for (auto& t : r.layer_outputs) layer_targets.push_back(stop_gradient(t));
      }
    }
    std::optional<std::vector<std::size_t>> subset;
    if (cfg.target.loss_patch_fraction < 1.0) {
      Rng sub_rng(derive_seed(st.seed, Stream::subsample, {step, b}));
      subset = subsample_latent_patches(n_tokens, cfg.target.loss_patch_fraction, sub_rng);
    }

    Tensor clip_loss;
    for (const auto& t : st.active_targets) {
      const Tensor pred = st.model.predict(out, t);
      Tensor term;
      if (t.is_pixels()) {
        term = layerlock_loss(pred, stop_gradient(full.tokens));
      } else {
        term = layerlock_loss(pred, layer_targets[t.layer - 1], subset);
        if (cfg.mode == TrainMode::latent_nofreeze) term = scale(term, latent_weight);
      }
      clip_loss = clip_loss.defined() ? add(clip_loss, term) : term;
    }
    clip_losses.push_back(clip_loss);
  }
  Tensor loss = clip_losses[0];
  for (std::size_t b = 1; b < clip_losses.size(); ++b) loss = add(loss, clip_losses[b]);
  loss = scale(loss, 1.0 / static_cast<double>(clip_losses.size()));
  if (!std::isfinite(loss.item())) throw DivergenceError("loss diverged at step " + std::to_string(step));

  const auto trainable = trainable_parameters(st);
  std::vector<Tensor> leaves;
  leaves.reserve(trainable.size());
  for (const auto& p : trainable) leaves.push_back(p.tensor);
  const auto grads = backward(loss, leaves);
  const double lr = effective_lr(step, st.last_switch_step, cfg.optim);
  adamw_update(trainable, grads, st.opt, lr, cfg.optim, weight_decay_at(step, cfg.optim));

  StepResult r;
  r.step = step;
  r.loss = loss.item();
  r.lr = lr;
  r.frozen_prefix = k;
  r.target = st.target;
  r.flops_step = detail::mae_step_flops(st, cfg);
  if (cfg.mode == TrainMode::latent_nofreeze) r.extras["latent_weight"] = latent_weight;
  st.step += 1;
  return r;
}

/// The no-freeze latent ablation step: pixel loss plus weighted latent losses
/// on targets from unfrozen layers.
inline StepResult mae_latent_nofreeze_step(TrainState& st, const TrainConfig& cfg,
                                           std::span<const VideoClip> batch) {
  if (cfg.mode != TrainMode::latent_nofreeze) throw ContractError("config mode must be latent_nofreeze");
  return train_step(st, cfg, batch);
}

}  // namespace layerlock
