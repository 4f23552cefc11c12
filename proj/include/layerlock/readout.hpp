#pragma once

// Frozen-feature readouts: learned queries cross-attend to the features of one
// encoder layer and a linear map projects the attended values to the task
// output. Classification uses one query and predicts the motion octant; the
// dense task uses one query per patch and regresses the per-pixel distance map.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "layerlock/optim.hpp"
#include "layerlock/rng.hpp"
#include "layerlock/tensor.hpp"
#include "layerlock/vit.hpp"

namespace layerlock {

enum class ReadoutTask { classify, dense };

struct ReadoutConfig {
  double depth_fraction = 0.95;
  std::size_t qkv_size = 32;
  std::size_t n_heads = 2;
  std::vector<double> lrs{1e-4, 3e-4, 1e-3};
  std::vector<double> depth_fractions{0.25, 0.5, 0.75, 0.85, 0.95, 1.0};
  std::size_t train_clips = 1024;
  std::size_t test_clips = 256;
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  std::size_t warmup_steps = 1000;  // capped at a tenth of the run
  double end_lr = 1e-7;
  double weight_decay = 0.0;
  double abs_rel_eps = 1e-3;
  std::pair<double, double> valid_range{0.001, 10.0};
  std::uint64_t seed = 0;
};

/// Encoder layer read at a depth fraction: round(f * E), at least 1.
inline std::size_t readout_layer(double depth_fraction, std::size_t encoder_depth) {
  if (!(depth_fraction > 0.0 && depth_fraction <= 1.0)) throw ContractError("depth_fraction must lie in (0, 1]");
  const auto l = static_cast<std::size_t>(std::llround(depth_fraction * static_cast<double>(encoder_depth)));
  return std::clamp<std::size_t>(l, 1, encoder_depth);
}

/// Unmasked full-grid features of encoder block `layer` (N x D), computed
/// without a graph so the backbone can never receive gradients.
inline Tensor extract_features(const VitModel& model, const VideoClip& clip, std::size_t layer) {
  NoGradGuard guard;
  const auto tb = patchify(clip, model.config().patch);
  return stop_gradient(model.encode_prefix(tb, layer, 0, false).embeddings);
}

/// Every encoder layer's features for one clip; element l-1 is block l.
inline std::vector<Tensor> extract_all_layers(const VitModel& model, const VideoClip& clip) {
  NoGradGuard guard;
  const auto tb = patchify(clip, model.config().patch);
  auto r = model.encode_prefix(tb, model.config().encoder_depth(), 0, true);
  for (auto& t : r.layer_outputs) t = stop_gradient(t);
  return r.layer_outputs;
}

struct ReadoutParams {
  Tensor queries;  // n_queries x qkv
  LinearParams key, value, out;

  std::vector<NamedParam> named() const {
    std::vector<NamedParam> p;
    p.push_back({"readout.queries", queries, ParamRole::weight, -1});
    detail::append_linear(p, "readout.key", key, -1);
    detail::append_linear(p, "readout.value", value, -1);
    detail::append_linear(p, "readout.out", out, -1);
    return p;
  }
};

inline ReadoutParams init_readout(std::size_t feature_dim, std::size_t n_queries, std::size_t qkv,
                                  std::size_t output_size, Rng& rng) {
  ReadoutParams p;
  p.queries = detail::init_normal({n_queries, qkv}, 0.02, rng);
  p.key = detail::init_linear(feature_dim, qkv, rng);
  p.value = detail::init_linear(feature_dim, qkv, rng);
  p.out = detail::zero_linear(qkv, output_size);
  return p;
}

/// Parameter-free per-token standardisation of the frozen features.
inline Tensor normalize_features(const Tensor& f) {
  const auto d = f.cols();
  return layer_norm(f, Tensor::filled({d}, 1.0), Tensor::zeros({d}), 1e-6);
}

/// Cross-attention of the queries over the features, then the output map.
inline Tensor readout_forward(const ReadoutParams& p, const Tensor& features, std::size_t n_heads) {
  const Tensor f = normalize_features(features);
  const Tensor k = linear(f, p.key.weight, p.key.bias);
  const Tensor v = linear(f, p.value.weight, p.value.bias);
  const std::size_t qkv = p.queries.cols();
  if (n_heads == 0 || qkv % n_heads != 0) throw ContractError("readout qkv size must be divisible by n_heads");
  const std::size_t hd = qkv / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor q = slice_cols(p.queries, h * hd, hd);
    const Tensor att = softmax_rows(scale(matmul_nt(q, slice_cols(k, h * hd, hd)), inv_sqrt));
    heads.push_back(matmul(att, slice_cols(v, h * hd, hd)));
  }
  const Tensor mixed = n_heads == 1 ? heads[0] : concat_cols(heads);
  return linear(mixed, p.out.weight, p.out.bias);
}

/// A readout example: one feature map per sweep layer plus the task target.
struct ReadoutExample {
  std::vector<Tensor> layers;  // all encoder layers, element l-1 = block l
  int label = 0;
  std::vector<double> dense;  // N x patch pixels, patch-major (dense task)
  std::vector<double> valid;  // 1 where the target lies inside the valid range
};

/// Per-patch layout of a T x H x W map, matching the token order of patchify.
inline std::vector<double> patchify_map(std::span<const double> map, const VideoDims& dims, const PatchSize& ps) {
  const GridShape g{dims.t / ps.t, dims.h / ps.h, dims.w / ps.w};
  std::vector<double> out;
  out.reserve(map.size());
  for (std::size_t idx = 0; idx < g.count(); ++idx) {
    const auto p = g.position(idx);
    for (std::size_t dt = 0; dt < ps.t; ++dt)
      for (std::size_t dy = 0; dy < ps.h; ++dy)
        for (std::size_t dx = 0; dx < ps.w; ++dx)
          out.push_back(map[((p.t * ps.t + dt) * dims.h + p.h * ps.h + dy) * dims.w + p.w * ps.w + dx]);
  }
  return out;
}

inline ReadoutExample make_readout_example(const VitModel& model, const VideoClip& clip, const ReadoutConfig& rc) {
  ReadoutExample ex;
  ex.layers = extract_all_layers(model, clip);
  ex.label = clip.label.value_or(0);
  if (clip.dense_target) {
    ex.dense = patchify_map(*clip.dense_target, clip.dims, model.config().patch);
    ex.valid.resize(ex.dense.size());
    for (std::size_t i = 0; i < ex.dense.size(); ++i)
      ex.valid[i] = (ex.dense[i] > rc.valid_range.first && ex.dense[i] < rc.valid_range.second) ? 1.0 : 0.0;
  }
  return ex;
}

/// Mean |pred - d| / (d + eps) over valid entries.
inline double abs_rel(std::span<const double> pred, std::span<const double> truth, std::span<const double> valid,
                      double eps) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (valid[i] == 0.0) continue;
    s += std::abs(pred[i] - truth[i]) / (truth[i] + eps);
    n += 1.0;
  }
  if (n == 0.0) throw ContractError("abs_rel: no valid entries");
  return s / n;
}

struct ReadoutCell {
  double lr = 0.0;
  double depth_fraction = 0.0;
  std::size_t layer = 0;
  double metric = 0.0;  // top-1 accuracy (classify) or AbsRel (dense)
};

struct ReadoutReport {
  ReadoutTask task = ReadoutTask::classify;
  std::vector<ReadoutCell> cells;
  ReadoutCell best;
};

/// Trains one readout on `train` features of `layer` and scores it on `test`.
inline double train_and_score_readout(std::span<const ReadoutExample> train, std::span<const ReadoutExample> test,
                                      std::size_t layer, ReadoutTask task, double lr, const ReadoutConfig& rc,
                                      std::uint64_t cell_seed) {
  if (train.empty() || test.empty()) throw ContractError("readout needs train and test examples");
  const std::size_t d = train[0].layers.at(layer - 1).cols();
  const std::size_t n_tokens = train[0].layers[layer - 1].rows();
  const std::size_t patch_px = task == ReadoutTask::dense ? train[0].dense.size() / n_tokens : 0;
  const std::size_t n_queries = task == ReadoutTask::classify ? 1 : n_tokens;
  const std::size_t out_size = task == ReadoutTask::classify ? kMotionClasses : patch_px;
  Rng init_rng(derive_seed(cell_seed, Stream::init));
  auto params = init_readout(d, n_queries, rc.qkv_size, out_size, init_rng);
  const auto named = params.named();
  std::vector<Tensor> leaves;
  for (const auto& p : named) leaves.push_back(p.tensor);

  OptimConfig oc;
  oc.peak_lr = lr;
  oc.end_lr = rc.end_lr;
  oc.total_steps = rc.steps;
  oc.warmup_steps = std::min(rc.warmup_steps, std::max<std::size_t>(1, rc.steps / 10));
  oc.weight_decay = rc.weight_decay;
  oc.mini_warmup_steps = 0;
  OptState opt;

  Rng batch_rng(derive_seed(cell_seed, Stream::shuffle));
  for (std::size_t step = 0; step < rc.steps; ++step) {
    Tensor loss;
    for (std::size_t b = 0; b < rc.batch_size; ++b) {
      const auto& ex = train[batch_rng.below(train.size())];
      const Tensor pred = readout_forward(params, ex.layers[layer - 1], rc.n_heads);
      Tensor term;
      if (task == ReadoutTask::classify) {
        const int lab = ex.label;
        term = cross_entropy(pred, std::span<const int>(&lab, 1));
      } else {
        const Tensor target({n_tokens, patch_px}, ex.dense);
        const Tensor mask({n_tokens, patch_px}, ex.valid);
        term = mean(square(mul(sub(pred, target), mask)));
      }
      loss = loss.defined() ? add(loss, term) : term;
    }
    loss = scale(loss, 1.0 / static_cast<double>(rc.batch_size));
    const auto grads = backward(loss, leaves);
    adamw_update(named, grads, opt, cosine_lr(step, oc), oc, oc.weight_decay);
  }

  NoGradGuard guard;
  if (task == ReadoutTask::classify) {
    std::size_t correct = 0;
    for (const auto& ex : test) {
      const Tensor out = readout_forward(params, ex.layers[layer - 1], rc.n_heads);
      const auto logits = out.data();
      const auto arg = std::max_element(logits.begin(), logits.end()) - logits.begin();
      if (static_cast<int>(arg) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
  }
  std::vector<double> preds, truth, valid;
  for (const auto& ex : test) {
    const Tensor out = readout_forward(params, ex.layers[layer - 1], rc.n_heads);
    const auto p = out.data();
    preds.insert(preds.end(), p.begin(), p.end());
    truth.insert(truth.end(), ex.dense.begin(), ex.dense.end());
    valid.insert(valid.end(), ex.valid.begin(), ex.valid.end());
  }
  return abs_rel(preds, truth, valid, rc.abs_rel_eps);
}

/// Higher accuracy / lower AbsRel wins; ties go to the lower lr, then the
/// lower depth fraction.
inline bool readout_better(const ReadoutCell& a, const ReadoutCell& b, ReadoutTask task) {
  if (a.metric != b.metric) return task == ReadoutTask::classify ? a.metric > b.metric : a.metric < b.metric;
  if (a.lr != b.lr) return a.lr < b.lr;
  return a.depth_fraction < b.depth_fraction;
}

/// Held-out clips for a readout task; moving clips only for classification.
inline std::vector<VideoClip> readout_clips(ReadoutTask task, const VideoDims& dims, std::size_t count,
                                            std::uint64_t seed, std::uint64_t split) {
  std::vector<VideoClip> out;
  const auto kind = task == ReadoutTask::classify ? SynthKind::moving_shapes : SynthKind::gradient_field;
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_video(kind, derive_seed(seed, Stream::readout, {split, i}), dims));
  return out;
}

inline std::vector<ReadoutExample> readout_examples(const VitModel& model, std::span<const VideoClip> clips,
                                                    const ReadoutConfig& rc) {
  std::vector<ReadoutExample> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back(make_readout_example(model, c, rc));
  return out;
}

/// Per-channel standardisation of every layer with statistics of the training
/// split only. Trained residual streams carry a few large constant channels
/// that otherwise swamp the per-token normalisation.
inline void standardize_features(std::vector<ReadoutExample>& train, std::vector<ReadoutExample>& test) {
  if (train.empty()) throw ContractError("standardize_features: no training examples");
  const std::size_t n_layers = train[0].layers.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t n = train[0].layers[l].rows(), d = train[0].layers[l].cols();
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (const auto& e : train) {
      const auto v = e.layers[l].data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mu[j] += v[i * d + j];
    }
    const double count = static_cast<double>(train.size() * n);
    for (auto& m : mu) m /= count;
    for (const auto& e : train) {
      const auto v = e.layers[l].data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) sd[j] += (v[i * d + j] - mu[j]) * (v[i * d + j] - mu[j]);
    }
    for (auto& s : sd) s = std::sqrt(s / count) + 1e-6;
    for (auto* split : {&train, &test})
      for (auto& e : *split) {
        // Fresh tensors: examples may share storage with cached features.
        std::vector<double> v(e.layers[l].values());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) v[i * d + j] = (v[i * d + j] - mu[j]) / sd[j];
        e.layers[l] = Tensor({n, d}, std::move(v));
      }
  }
}

/// Full lr x depth-fraction sweep on frozen features of `model`. With
/// `shuffle_labels`, training labels are permuted (chance-level control).
inline ReadoutReport train_and_eval_readout(const VitModel& model, ReadoutTask task, const ReadoutConfig& rc,
                                            bool shuffle_labels = false) {
  const auto& dims = model.config().input;
  const auto train_clips = readout_clips(task, dims, rc.train_clips, rc.seed, 0);
  const auto test_clips = readout_clips(task, dims, rc.test_clips, rc.seed, 1);
  auto train = readout_examples(model, train_clips, rc);
  auto test = readout_examples(model, test_clips, rc);
  standardize_features(train, test);
  if (shuffle_labels) {
    std::vector<int> labels;
    for (const auto& e : train) labels.push_back(e.label);
    Rng rng(derive_seed(rc.seed, Stream::shuffle, {0x5uLL}));
    rng.shuffle(std::span<int>(labels));
    for (std::size_t i = 0; i < train.size(); ++i) train[i].label = labels[i];
  }
  ReadoutReport rep;
  rep.task = task;
  const std::size_t e = model.config().encoder_depth();
  for (std::size_t li = 0; li < rc.lrs.size(); ++li) {
    for (std::size_t fi = 0; fi < rc.depth_fractions.size(); ++fi) {
      ReadoutCell c;
      c.lr = rc.lrs[li];
      c.depth_fraction = rc.depth_fractions[fi];
      c.layer = readout_layer(c.depth_fraction, e);
      c.metric = train_and_score_readout(train, test, c.layer, task, c.lr, rc,
                                         derive_seed(rc.seed, Stream::readout, {2, li, fi}));
      rep.cells.push_back(c);
    }
  }
  rep.best = rep.cells.front();
  for (const auto& c : rep.cells)
    if (readout_better(c, rep.best, task)) rep.best = c;
  return rep;
}

}  // namespace layerlock
