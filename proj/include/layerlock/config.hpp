#pragma once

// JSON training configs and the named presets.
//
// A config file is a JSON object with the sections below; omitted fields keep
// the values of the preset named by "base" (or the built-in defaults). Unknown
// fields and wrongly typed values are rejected with the offending field path.
//
//   { "base": "toy-mae", "name": ..., "mode": "layerlock|baseline|latent_nofreeze|jepa",
//     "seed": N, "steps": N, "checkpoint_every": N, "probe_every": N, "probe_clips": N,
//     "model":    { depth, d_model, n_heads, mlp_ratio, patch: [t,h,w], decoder_blocks,
//                   input: [T,H,W], learned_pos_embed, ln_eps,
//                   rope: { fractions: [ft,fh,fw], max_wavelength,
//                           site: "post_first_norm|attention_qk|none" } },
//     "optim":    { peak_lr, end_lr, start_lr, warmup_steps, total_steps, b1, b2, eps,
//                   weight_decay, weight_decay_end (number or null), mini_warmup_steps },
//     "schedule": { enabled, start, interval, jump, max_frozen, target_layers: [..] },
//     "mask":     { mode: "random_iid|multiblock", mask_ratio,
//                   multiblock: { num_blocks, block_area_range: [a,b], aspect_ratio_range: [a,b] } },
//     "target":   { loss_patch_fraction, multi_target, switch_targets },
//     "latent":   { schedule: "constant|cosine", weight, layers: [..] },
//     "jepa":     { decoder_depth, ema_momentum, stride },
//     "data":     { kind: "moving_shapes|gradient_field", batch_size } }

#include <nlohmann/json.hpp>

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "layerlock/engine.hpp"

namespace layerlock {

using json = nlohmann::ordered_json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Enum names

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<TrainMode> {
  static constexpr std::array<std::pair<TrainMode, const char*>, 4> v{{{TrainMode::layerlock, "layerlock"},
                                                                       {TrainMode::baseline, "baseline"},
                                                                       {TrainMode::latent_nofreeze, "latent_nofreeze"},
                                                                       {TrainMode::jepa, "jepa"}}};
};
template <>
struct EnumNames<RopeSite> {
  static constexpr std::array<std::pair<RopeSite, const char*>, 3> v{{{RopeSite::post_first_norm, "post_first_norm"},
                                                                      {RopeSite::attention_qk, "attention_qk"},
                                                                      {RopeSite::none, "none"}}};
};
template <>
struct EnumNames<MaskMode> {
  static constexpr std::array<std::pair<MaskMode, const char*>, 2> v{
      {{MaskMode::random_iid, "random_iid"}, {MaskMode::multiblock, "multiblock"}}};
};
template <>
struct EnumNames<LatentWeightSchedule> {
  static constexpr std::array<std::pair<LatentWeightSchedule, const char*>, 2> v{
      {{LatentWeightSchedule::constant, "constant"}, {LatentWeightSchedule::cosine, "cosine"}}};
};
template <>
struct EnumNames<SynthKind> {
  static constexpr std::array<std::pair<SynthKind, const char*>, 2> v{
      {{SynthKind::moving_shapes, "moving_shapes"}, {SynthKind::gradient_field, "gradient_field"}}};
};

}  // namespace detail

template <class E>
std::string enum_name(E e) {
  for (const auto& [val, name] : detail::EnumNames<E>::v)
    if (val == e) return name;
  throw std::logic_error("unnamed enum value");
}

template <class E>
E enum_from(const std::string& s, const std::string& field) {
  std::string options;
  for (const auto& [val, name] : detail::EnumNames<E>::v) {
    if (s == name) return val;
    options += (options.empty() ? "" : ", ") + std::string(name);
  }
  throw ConfigError(field + ": unknown value \"" + s + "\" (expected one of " + options + ")");
}

// ---------------------------------------------------------------------------
// Serialisation

inline json to_json(const TrainConfig& c) {
  const auto& m = c.model;
  json j;
  j["name"] = c.name;
  j["mode"] = enum_name(c.mode);
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["checkpoint_every"] = c.checkpoint_every;
  j["probe_every"] = c.probe_every;
  j["probe_clips"] = c.probe_clips;
  j["model"] = {{"depth", m.depth},
                {"d_model", m.d_model},
                {"n_heads", m.n_heads},
                {"mlp_ratio", m.mlp_ratio},
                {"patch", {m.patch.t, m.patch.h, m.patch.w}},
                {"decoder_blocks", m.decoder_blocks},
                {"input", {m.input.t, m.input.h, m.input.w}},
                {"learned_pos_embed", m.learned_pos_embed},
                {"ln_eps", m.ln_eps},
                {"rope",
                 {{"fractions", m.rope.fractions},
                  {"max_wavelength", m.rope.max_wavelength},
                  {"site", enum_name(m.rope.site)}}}};
  const auto& o = c.optim;
  j["optim"] = {{"peak_lr", o.peak_lr},
                {"end_lr", o.end_lr},
                {"start_lr", o.start_lr},
                {"warmup_steps", o.warmup_steps},
                {"total_steps", o.total_steps},
                {"b1", o.b1},
                {"b2", o.b2},
                {"eps", o.eps},
                {"weight_decay", o.weight_decay},
                {"weight_decay_end", o.weight_decay_end ? json(*o.weight_decay_end) : json(nullptr)},
                {"mini_warmup_steps", o.mini_warmup_steps}};
  const auto& s = c.schedule;
  j["schedule"] = {{"enabled", s.enabled},         {"start", s.start},           {"interval", s.interval},
                   {"jump", s.jump},               {"max_frozen", s.max_frozen}, {"target_layers", s.target_layers}};
  j["mask"] = {{"mode", enum_name(c.mask.mode)},
               {"mask_ratio", c.mask.mask_ratio},
               {"multiblock",
                {{"num_blocks", c.mask.multiblock.num_blocks},
                 {"block_area_range", {c.mask.multiblock.block_area_range.first, c.mask.multiblock.block_area_range.second}},
                 {"aspect_ratio_range",
                  {c.mask.multiblock.aspect_ratio_range.first, c.mask.multiblock.aspect_ratio_range.second}}}}};
  j["target"] = {{"loss_patch_fraction", c.target.loss_patch_fraction},
                 {"multi_target", c.target.multi_target},
                 {"switch_targets", c.target.switch_targets}};
  j["latent"] = {{"schedule", enum_name(c.latent.schedule)}, {"weight", c.latent.weight}, {"layers", c.latent.layers}};
  j["jepa"] = {{"decoder_depth", c.jepa.decoder_depth}, {"ema_momentum", c.jepa.ema_momentum}, {"stride", c.jepa.stride}};
  j["data"] = {{"kind", enum_name(c.data.kind)}, {"batch_size", c.data.batch_size}};
  return j;
}

namespace detail {

/// Walks one JSON object, overwriting fields that are present and rejecting
/// anything unknown.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    convert(*it, out, field(key));
  }

  void section(const char* key, const std::function<void(FieldReader&)>& fn) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    FieldReader sub(*it, field(key));
    fn(sub);
    sub.finish();
  }

  void ignore(const char* key) { seen_.insert(key); }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key().c_str()) + ": unknown field");
    }
  }

  std::string field(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  static void convert(const json& v, double& out, const std::string& f) {
    if (!v.is_number()) throw ConfigError(f + ": expected a number");
    out = v.get<double>();
  }
  static void convert(const json& v, bool& out, const std::string& f) {
    if (!v.is_boolean()) throw ConfigError(f + ": expected true or false");
    out = v.get<bool>();
  }
  static void convert(const json& v, std::size_t& out, const std::string& f) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError(f + ": expected a nonnegative integer");
    }
    out = v.get<std::size_t>();
  }
  static void convert(const json& v, std::string& out, const std::string& f) {
    if (!v.is_string()) throw ConfigError(f + ": expected a string");
    out = v.get<std::string>();
  }
  static void convert(const json& v, std::optional<double>& out, const std::string& f) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    double d = 0;
    convert(v, d, f);
    out = d;
  }
  static void convert(const json& v, std::vector<std::size_t>& out, const std::string& f) {
    if (!v.is_array()) throw ConfigError(f + ": expected an array of integers");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t x = 0;
      convert(v[i], x, f + "[" + std::to_string(i) + "]");
      out.push_back(x);
    }
  }
  template <std::size_t N, class T>
  static void convert(const json& v, std::array<T, N>& out, const std::string& f) {
    if (!v.is_array() || v.size() != N) throw ConfigError(f + ": expected an array of " + std::to_string(N) + " values");
    for (std::size_t i = 0; i < N; ++i) convert(v[i], out[i], f + "[" + std::to_string(i) + "]");
  }
  static void convert(const json& v, std::pair<double, double>& out, const std::string& f) {
    std::array<double, 2> a{};
    convert(v, a, f);
    out = {a[0], a[1]};
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
void read_enum(FieldReader& r, const char* key, E& out) {
  std::string s = enum_name(out);
  r.read(key, s);
  out = enum_from<E>(s, r.field(key));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Presets

namespace detail {

inline ModelConfig vit_model(std::size_t depth, std::size_t width, std::size_t heads, std::size_t mlp,
                             std::size_t decoder_blocks) {
  ModelConfig m;
  m.depth = depth;
  m.d_model = width;
  m.n_heads = heads;
  m.mlp_ratio = static_cast<double>(mlp) / static_cast<double>(width);
  m.decoder_blocks = decoder_blocks;
  m.patch = {2, 16, 16};
  m.input = {16, 224, 224};
  return m;
}

/// Desk-scale model: 8 encoder + 2 decoder blocks on 4x16x16 clips.
inline TrainConfig toy_base() {
  TrainConfig c;
  c.model.depth = 10;
  c.model.decoder_blocks = 2;
  c.model.d_model = 32;
  c.model.n_heads = 4;
  c.model.mlp_ratio = 4.0;
  c.model.patch = {2, 4, 4};
  c.model.input = {4, 16, 16};
  c.optim.peak_lr = 2e-3;
  c.optim.end_lr = 0.0;
  c.optim.warmup_steps = 100;
  c.optim.total_steps = 2000;
  c.optim.mini_warmup_steps = 50;
  c.mask.mask_ratio = 0.5;
  c.data.batch_size = 4;
  c.steps = 2000;
  c.seed = 0;
  c.probe_clips = 8;
  c.schedule.start = 200;
  c.schedule.interval = 100;
  c.schedule.jump = 1;
  c.schedule.max_frozen = 6;
  return c;
}

/// Shared reference-scale recipe (pixel path).
inline TrainConfig reference_mae(ModelConfig m, std::size_t steps) {
  TrainConfig c;
  c.model = std::move(m);
  c.mask.mask_ratio = 0.95;
  c.optim.peak_lr = 3e-4;
  c.optim.warmup_steps = 10000;
  c.optim.total_steps = steps;
  c.optim.b1 = 0.90;
  c.optim.b2 = 0.95;
  c.optim.weight_decay = 0.05;
  c.optim.mini_warmup_steps = 1000;
  c.data.batch_size = 2048;
  c.steps = steps;
  return c;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"toy-mae",   "toy-baseline", "toy-latent-nofreeze", "toy-jepa",  "vitg-1b",
          "vjepa-l",   "vitg-250m",    "vitg-56m",            "vith-100m", "vitb-50m"};
}

inline TrainConfig preset(const std::string& name) {
  using detail::reference_mae;
  using detail::vit_model;
  TrainConfig c;
  if (name == "toy-mae") {
    c = detail::toy_base();
    c.mode = TrainMode::layerlock;
  } else if (name == "toy-baseline") {
    c = detail::toy_base();
    c.mode = TrainMode::baseline;
    c.schedule.enabled = false;
  } else if (name == "toy-latent-nofreeze") {
    c = detail::toy_base();
    c.mode = TrainMode::latent_nofreeze;
    c.schedule.enabled = false;
    c.latent.schedule = LatentWeightSchedule::constant;
    c.latent.weight = 1.0;
  } else if (name == "toy-jepa") {
    c = detail::toy_base();
    c.mode = TrainMode::jepa;
    c.model.depth = 8;
    c.model.decoder_blocks = 0;
    c.model.learned_pos_embed = true;
    c.mask.mode = MaskMode::multiblock;
    c.jepa.decoder_depth = 2;
    c.jepa.ema_momentum = 0.998;
    c.optim.start_lr = 0.0;
    c.optim.weight_decay = 0.04;
    c.optim.weight_decay_end = 0.4;
  } else if (name == "vitg-1b") {
    // ViT-G: 48 blocks (44 encoder + 4 decoder), width 1664, 16 heads, MLP 8192.
    c = reference_mae(vit_model(48, 1664, 16, 8192, 4), 488282);
    c.schedule = {true, 160000, 10000, 1, 32, {}};
  } else if (name == "vjepa-l") {
    // ViT-L student (24 blocks) with a separate 12-block predictor.
    c.mode = TrainMode::jepa;
    c.model = vit_model(24, 1024, 16, 4096, 0);
    c.model.learned_pos_embed = true;
    c.optim.start_lr = 1.3e-4;
    c.optim.peak_lr = 4.17e-4;
    c.optim.end_lr = 6.6e-7;
    c.optim.warmup_steps = 90000;
    c.optim.total_steps = 262501;
    c.optim.weight_decay = 0.04;
    c.optim.weight_decay_end = 0.4;
    c.optim.mini_warmup_steps = 1000;
    c.mask.mode = MaskMode::multiblock;
    c.mask.multiblock = {8, {0.3, 0.3}, {0.75, 1.50}};
    c.jepa = {12, 0.998, 4};
    c.data.batch_size = 2048;
    c.steps = 262501;
    c.schedule = {true, 100000, 6000, 1, 24, {}};
  } else if (name == "vitg-250m") {
    c = reference_mae(vit_model(48, 1664, 16, 8192, 4), 122070);
    c.optim.peak_lr = 1e-4;
    c.optim.warmup_steps = 5000;
    c.optim.weight_decay = 0.0;
    c.schedule = {true, 25000, 20000, 5, 20, {4, 8, 12, 16}};
  } else if (name == "vitg-56m") {
    c = reference_mae(vit_model(48, 1664, 16, 8192, 4), 437500);
    c.data.batch_size = 128;
    c.optim.peak_lr = 1e-4;
    c.optim.warmup_steps = 5000;
    c.optim.weight_decay = 0.0;
    c.schedule = {true, 19000, 30000, 5, 44, {4, 8, 12, 16, 20, 24, 28, 32, 36, 40, 44}};
  } else if (name == "vith-100m") {
    c = reference_mae(vit_model(32, 1280, 16, 5120, 4), 12352);
    c.mode = TrainMode::baseline;
    c.data.batch_size = 8096;
    c.optim.peak_lr = 1e-3;
    c.optim.warmup_steps = 1000;
    c.optim.weight_decay = 0.0;
    c.schedule.enabled = false;
  } else if (name == "vitb-50m") {
    c = reference_mae(vit_model(12, 768, 12, 3072, 4), 97656);
    c.data.batch_size = 512;
    c.optim.peak_lr = 3e-4;
    c.optim.warmup_steps = 2000;
    c.optim.weight_decay = 1e-3;
    c.schedule = {true, 6000, 4000, 2, 8, {1, 3, 5, 7}};
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset \"" + name + "\" (known: " + known + ")");
  }
  c.name = name;
  return c;
}

/// Applies the fields present in `j` on top of `base`.
inline TrainConfig config_from_json(const json& j, TrainConfig base = {}) {
  using detail::FieldReader;
  using detail::read_enum;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  if (auto it = j.find("base"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("base: expected a preset name");
    base = preset(it->get<std::string>());
  }
  TrainConfig c = std::move(base);
  FieldReader r(j, "");
  r.ignore("base");
  r.read("name", c.name);
  read_enum(r, "mode", c.mode);
  r.read("seed", c.seed);
  r.read("steps", c.steps);
  r.read("checkpoint_every", c.checkpoint_every);
  r.read("probe_every", c.probe_every);
  r.read("probe_clips", c.probe_clips);
  r.section("model", [&](FieldReader& m) {
    auto& mc = c.model;
    m.read("depth", mc.depth);
    m.read("d_model", mc.d_model);
    m.read("n_heads", mc.n_heads);
    m.read("mlp_ratio", mc.mlp_ratio);
    std::array<std::size_t, 3> patch{mc.patch.t, mc.patch.h, mc.patch.w};
    m.read("patch", patch);
    mc.patch = {patch[0], patch[1], patch[2]};
    m.read("decoder_blocks", mc.decoder_blocks);
    std::array<std::size_t, 3> input{mc.input.t, mc.input.h, mc.input.w};
    m.read("input", input);
    mc.input = {input[0], input[1], input[2]};
    m.read("learned_pos_embed", mc.learned_pos_embed);
    m.read("ln_eps", mc.ln_eps);
    m.section("rope", [&](FieldReader& rr) {
      rr.read("fractions", mc.rope.fractions);
      rr.read("max_wavelength", mc.rope.max_wavelength);
      read_enum(rr, "site", mc.rope.site);
    });
  });
  r.section("optim", [&](FieldReader& o) {
    auto& oc = c.optim;
    o.read("peak_lr", oc.peak_lr);
    o.read("end_lr", oc.end_lr);
    o.read("start_lr", oc.start_lr);
    o.read("warmup_steps", oc.warmup_steps);
    o.read("total_steps", oc.total_steps);
    o.read("b1", oc.b1);
    o.read("b2", oc.b2);
    o.read("eps", oc.eps);
    o.read("weight_decay", oc.weight_decay);
    o.read("weight_decay_end", oc.weight_decay_end);
    o.read("mini_warmup_steps", oc.mini_warmup_steps);
  });
  r.section("schedule", [&](FieldReader& s) {
    auto& sc = c.schedule;
    s.read("enabled", sc.enabled);
    s.read("start", sc.start);
    s.read("interval", sc.interval);
    s.read("jump", sc.jump);
    s.read("max_frozen", sc.max_frozen);
    s.read("target_layers", sc.target_layers);
  });
  r.section("mask", [&](FieldReader& m) {
    read_enum(m, "mode", c.mask.mode);
    m.read("mask_ratio", c.mask.mask_ratio);
    m.section("multiblock", [&](FieldReader& b) {
      b.read("num_blocks", c.mask.multiblock.num_blocks);
      b.read("block_area_range", c.mask.multiblock.block_area_range);
      b.read("aspect_ratio_range", c.mask.multiblock.aspect_ratio_range);
    });
  });
  r.section("target", [&](FieldReader& t) {
    t.read("loss_patch_fraction", c.target.loss_patch_fraction);
    t.read("multi_target", c.target.multi_target);
    t.read("switch_targets", c.target.switch_targets);
  });
  r.section("latent", [&](FieldReader& l) {
    read_enum(l, "schedule", c.latent.schedule);
    l.read("weight", c.latent.weight);
    l.read("layers", c.latent.layers);
  });
  r.section("jepa", [&](FieldReader& p) {
    p.read("decoder_depth", c.jepa.decoder_depth);
    p.read("ema_momentum", c.jepa.ema_momentum);
    p.read("stride", c.jepa.stride);
  });
  r.section("data", [&](FieldReader& d) {
    read_enum(d, "kind", c.data.kind);
    d.read("batch_size", c.data.batch_size);
  });
  r.finish();
  return c;
}

/// Parses and validates; every failure surfaces as ConfigError.
inline TrainConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c = config_from_json(j);
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

}  // namespace layerlock
