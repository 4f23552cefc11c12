#pragma once

// Latent prediction against an EMA teacher, with the student encoder frozen
// progressively. Context tokens come from a multiblock mask; a separate
// predictor transformer fills the masked positions with a learned mask token
// plus learned positions, and the loss covers masked tokens only.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "layerlock/engine.hpp"

namespace layerlock {

/// theta_T <- m * theta_T + (1 - m) * theta_S, elementwise, over matching lists.
inline void ema_update(std::span<const NamedParam> teacher, std::span<const NamedParam> student, double m) {
  if (teacher.size() != student.size()) throw DimensionError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].tensor.shape() != student[i].tensor.shape()) {
      throw DimensionError("ema_update: shape mismatch for " + teacher[i].name);
    }
    Tensor t = teacher[i].tensor;
    auto dst = t.mutable_data();
    const auto src = student[i].tensor.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = m * dst[j] + (1.0 - m) * src[j];
  }
}

inline void ema_update(VitModel& teacher, const VitModel& student, double m) {
  const auto t = named_parameters(teacher.params());
  const auto s = named_parameters(student.params());
  ema_update(t, s, m);
}

/// Euclidean distance between teacher and student backbone parameters.
inline double teacher_student_distance(const VitModel& teacher, const VitModel& student) {
  const auto t = named_parameters(teacher.params());
  const auto s = named_parameters(student.params());
  if (t.size() != s.size()) throw DimensionError("teacher/student parameter lists differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto a = t[i].tensor.data(), b = s[i].tensor.data();
    if (a.size() != b.size()) throw DimensionError("teacher/student shape mismatch for " + t[i].name);
    for (std::size_t j = 0; j < a.size(); ++j) acc += (a[j] - b[j]) * (a[j] - b[j]);
  }
  return std::sqrt(acc);
}

/// Teacher h_k on the full grid, restricted to `rows` (all rows when empty).
/// Layer 0 is not a valid latent-prediction target.
inline Tensor jepa_targets(const VitModel& teacher, const TokenBatch& full, std::size_t k,
                           std::span<const std::size_t> rows = {}) {
  if (k == 0) throw ContractError("jepa_targets: the latent path never predicts pixels (k = 0)");
  NoGradGuard guard;
  const Tensor h = teacher.encode_prefix(full, k, 0, false).embeddings;
  return stop_gradient(rows.empty() ? h : gather_rows(h, rows));
}

/// Target layer for the latent path at `step`: the schedule's layer, and layer
/// 1 before the first freeze.
inline std::size_t jepa_target_layer(const FreezeSchedule& sched, std::size_t step) {
  return std::max<std::size_t>(1, sched.target_at(step).layer);
}

/// Multiblock mask with blocks dropped from the end until some context remains.
inline MultiblockMask jepa_mask(const GridShape& grid, const MultiblockParams& p, Rng& rng) {
  auto m = multiblock_mask(grid, p, rng);
  while (m.context_indices().empty() && !m.blocks.empty()) {
    m.blocks.pop_back();
    m.masked.assign(grid.count(), false);
    for (const auto& blk : m.blocks)
      for (std::size_t t = 0; t < grid.t; ++t)
        for (std::size_t y = blk.top; y < blk.top + blk.height; ++y)
          for (std::size_t x = blk.left; x < blk.left + blk.width; ++x) m.masked[grid.index({t, y, x})] = true;
  }
  return m;
}

namespace detail {

inline double jepa_step_flops(const TrainConfig& cfg, std::size_t k, std::size_t target_layer,
                              std::size_t context, std::size_t masked) {
  const auto& mc = cfg.model;
  const double N = static_cast<double>(mc.tokens()), K = static_cast<double>(context);
  const double D = static_cast<double>(mc.d_model), P = static_cast<double>(mc.patch_dim());
  const double E = static_cast<double>(mc.encoder_depth());
  const double embed = linear_flops(K, P, D), enc = block_forward_flops(mc, K);
  const double pred = static_cast<double>(cfg.jepa.decoder_depth) * block_forward_flops(mc, K + masked) +
                      linear_flops(static_cast<double>(masked), D, D);
  const double fwd = embed + E * enc + pred;
  const double trainable = (k == 0 ? embed : 0.0) + (E - static_cast<double>(k)) * enc + pred;
  const double target = linear_flops(N, P, D) + static_cast<double>(target_layer) * block_forward_flops(mc, N);
  return static_cast<double>(cfg.data.batch_size) * (fwd + 2.0 * trainable + target);
}

}  // namespace detail

/// One latent-prediction step: freeze per schedule, mask, encode the context,
/// predict teacher features at masked positions, update, then move the teacher.
inline StepResult jepa_train_step(TrainState& st, const TrainConfig& cfg, std::span<const VideoClip> batch) {
  if (cfg.mode != TrainMode::jepa || !st.jepa) throw ContractError("jepa_train_step needs a jepa-mode state");
  if (batch.empty()) throw ContractError("jepa_train_step: empty batch");
  const std::size_t step = st.step;
  if (cfg.schedule.enabled) {
    const std::size_t k = freeze_layer_schedule(step, cfg.schedule);
    if (k > st.model.params().frozen_prefix) freeze_event(st, cfg, k, step);
  }
  const std::size_t k = st.model.params().frozen_prefix;
  const std::size_t t_layer = st.target.layer;
  auto& j = *st.jepa;
  const auto& mcfg = cfg.model;
  const auto grid = mcfg.grid();

  Tensor loss;
  std::size_t ctx_total = 0, masked_total = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto full = patchify(batch[b], mcfg.patch);
    Rng mask_rng(derive_seed(st.seed, Stream::mask, {step, b}));
    const auto mask = jepa_mask(grid, cfg.mask.multiblock, mask_rng);
    const auto ctx_idx = mask.context_indices();
    const auto tgt_idx = mask.masked_indices();
    if (tgt_idx.empty()) continue;
    ctx_total += ctx_idx.size();
    masked_total += tgt_idx.size();

    TokenBatch ctx;
    ctx.tokens = gather_rows(full.tokens, ctx_idx);
    for (auto i : ctx_idx) ctx.positions.push_back(full.positions[i]);
    const Tensor z = st.model.encode(ctx, k, false).embeddings;

    // Predictor input: context features then mask tokens, each with its position.
    std::vector<std::size_t> pos_idx(ctx_idx);
    pos_idx.insert(pos_idx.end(), tgt_idx.begin(), tgt_idx.end());
    std::vector<std::size_t> zeros(tgt_idx.size(), 0);
    Tensor x = concat_rows({z, gather_rows(j.mask_token, zeros)});
    x = add(x, gather_rows(j.predictor_pos, pos_idx));
    std::vector<GridPos> positions;
    for (auto i : pos_idx) positions.push_back(full.positions[i]);
    for (const auto& blk : j.predictor) x = st.model.block_forward(x, blk, positions);
    const Tensor out = slice_rows(x, ctx_idx.size(), tgt_idx.size());
    const auto& head = j.heads.at(t_layer);
    const Tensor pred = linear(out, head.weight, head.bias);
    const Tensor target = jepa_targets(j.teacher, full, t_layer, tgt_idx);
    const Tensor term = mse(pred, target);
    loss = loss.defined() ? add(loss, term) : term;
  }
  if (!loss.defined()) throw ContractError("jepa_train_step: every clip had an empty mask");
  loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
  if (!std::isfinite(loss.item())) throw DivergenceError("loss diverged at step " + std::to_string(step));

  const auto trainable = trainable_parameters(st);
  std::vector<Tensor> leaves;
  for (const auto& p : trainable) leaves.push_back(p.tensor);
  const auto grads = backward(loss, leaves);
  const double lr = effective_lr(step, st.last_switch_step, cfg.optim);
  adamw_update(trainable, grads, st.opt, lr, cfg.optim, weight_decay_at(step, cfg.optim));
  ema_update(j.teacher, st.model, cfg.jepa.ema_momentum);

  StepResult r;
  r.step = step;
  r.loss = loss.item();
  r.lr = lr;
  r.frozen_prefix = k;
  r.target = st.target;
  const std::size_t nb = batch.size();
  r.flops_step = detail::jepa_step_flops(cfg, k, t_layer, ctx_total / nb, masked_total / nb);
  r.extras["teacher_distance"] = teacher_student_distance(j.teacher, st.model);
  st.step += 1;
  return r;
}

/// Dispatches one step for any mode.
inline StepResult run_step(TrainState& st, const TrainConfig& cfg, std::span<const VideoClip> batch) {
  return cfg.mode == TrainMode::jepa ? jepa_train_step(st, cfg, batch) : train_step(st, cfg, batch);
}

}  // namespace layerlock
