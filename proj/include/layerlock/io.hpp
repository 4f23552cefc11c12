#pragma once

// Checkpoints, metrics logs and CSV tables.
//
// A checkpoint is a directory holding manifest.json and payload.bin. The
// payload is the concatenation of little-endian IEEE-754 doubles, row-major,
// in manifest order; the manifest lists every array with its shape, byte
// offset and role, plus the config, step, schedule state and a CRC-32 of the
// payload. Randomness is derived from (seed, step) so the seed is the whole
// random state.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerlock/analysis.hpp"
#include "layerlock/config.hpp"
#include "layerlock/engine.hpp"

namespace layerlock {

static_assert(std::endian::native == std::endian::little, "payload layout assumes a little-endian host");

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint failed its consistency checks (checksum, sizes, names).
struct IntegrityError : IoError {
  using IoError::IoError;
};

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    c = crc32(c, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(c);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

struct PayloadWriter {
  std::string bytes;
  json directory = json::array();

  void add(const std::string& name, const std::string& role, const Shape& shape, std::span<const double> v,
           json extra = json::object()) {
    json e = {{"name", name}, {"role", role}, {"shape", shape}, {"dtype", "f64le"}, {"offset", bytes.size()},
              {"count", v.size()}};
    for (auto it = extra.begin(); it != extra.end(); ++it) e[it.key()] = it.value();
    directory.push_back(std::move(e));
    const auto* p = reinterpret_cast<const char*>(v.data());
    bytes.append(p, v.size() * sizeof(double));
  }
};

inline json target_json(const TargetKind& t) { return t.layer; }

}  // namespace detail

inline void save_checkpoint(const TrainState& st, const TrainConfig& cfg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  detail::PayloadWriter w;
  for (const auto& p : all_parameters(st)) w.add(p.name, "param", p.tensor.shape(), p.tensor.data());
  if (st.jepa) {
    for (const auto& p : named_parameters(st.jepa->teacher.params()))
      w.add("teacher." + p.name, "teacher", p.tensor.shape(), p.tensor.data());
  }
  for (const auto& [name, mom] : st.opt.entries) {
    w.add("opt.m." + name, "moment_m", {mom.m.size()}, mom.m, {{"param", name}, {"updates", mom.count}});
    w.add("opt.v." + name, "moment_v", {mom.v.size()}, mom.v, {{"param", name}, {"updates", mom.count}});
  }

  json m;
  m["format"] = "layerlock-checkpoint/1";
  m["config"] = to_json(cfg);
  m["step"] = st.step;
  m["rng"] = {{"scheme", "splitmix64-derived"}, {"seed", st.seed}};
  json events = json::array();
  for (const auto& e : st.events)
    events.push_back({{"step", e.step}, {"frozen_prefix", e.frozen_prefix},
                      {"newly_frozen_params", e.newly_frozen_params}, {"target", e.target.layer}});
  json active = json::array();
  for (const auto& t : st.active_targets) active.push_back(t.layer);
  m["schedule_state"] = {{"frozen_prefix", st.model.params().frozen_prefix},
                         {"target", st.target.layer},
                         {"active_targets", active},
                         {"last_switch_step", st.last_switch_step ? json(*st.last_switch_step) : json(nullptr)},
                         {"events", events}};
  m["tensors"] = w.directory;
  m["payload_bytes"] = w.bytes.size();
  m["payload_crc32"] = crc32_of(w.bytes);

  write_text_file(dir / "payload.bin", w.bytes);
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

struct LoadedCheckpoint {
  TrainConfig config;
  TrainState state;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json", payload_path = dir / "payload.bin";
  if (!std::filesystem::exists(manifest_path)) throw IoError("missing " + manifest_path.string());
  if (!std::filesystem::exists(payload_path)) throw IoError("missing " + payload_path.string());
  json m;
  try {
    m = json::parse(read_text_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw IntegrityError(std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::string bytes = read_text_file(payload_path);
  try {
    if (m.at("format") != "layerlock-checkpoint/1") throw IntegrityError("unsupported checkpoint format");
    if (m.at("payload_bytes").get<std::size_t>() != bytes.size())
      throw IntegrityError("payload size " + std::to_string(bytes.size()) + " does not match the manifest");
    if (m.at("payload_crc32").get<std::uint32_t>() != crc32_of(bytes)) throw IntegrityError("payload checksum mismatch");

    LoadedCheckpoint out;
    out.config = config_from_json(m.at("config"));
    const auto& cfg = out.config;
    auto& st = out.state;
    st = init_state(cfg);
    const auto& ss = m.at("schedule_state");

    // Recreate heads that exist in the checkpoint before matching names.
    for (const auto& e : m.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const std::string lh = "latent_head.", ph = "predictor.head.";
      if (name.rfind(lh, 0) == 0) st.model.head({std::stoul(name.substr(lh.size()))});
      if (name.rfind(ph, 0) == 0 && st.jepa) {
        const auto layer = std::stoul(name.substr(ph.size()));
        if (!st.jepa->heads.count(layer)) st.jepa->heads.emplace(layer, detail::zero_linear(cfg.model.d_model, cfg.model.d_model));
      }
    }
    std::map<std::string, Tensor> by_name;
    for (const auto& p : all_parameters(st)) by_name[p.name] = p.tensor;
    if (st.jepa)
      for (const auto& p : named_parameters(st.jepa->teacher.params())) by_name["teacher." + p.name] = p.tensor;

    std::size_t restored = 0;
    for (const auto& e : m.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto role = e.at("role").get<std::string>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (offset + count * sizeof(double) > bytes.size()) throw IntegrityError("tensor " + name + " runs past the payload");
      std::vector<double> v(count);
      std::memcpy(v.data(), bytes.data() + offset, count * sizeof(double));
      if (role == "param" || role == "teacher") {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IntegrityError("checkpoint tensor " + name + " has no counterpart");
        Tensor t = it->second;
        if (t.numel() != count || t.shape() != e.at("shape").get<Shape>())
          throw IntegrityError("shape mismatch for " + name);
        std::copy(v.begin(), v.end(), t.mutable_data().begin());
        ++restored;
      } else if (role == "moment_m" || role == "moment_v") {
        auto& mom = st.opt.entries[e.at("param").get<std::string>()];
        (role == "moment_m" ? mom.m : mom.v) = std::move(v);
        mom.count = e.at("updates").get<std::size_t>();
      } else {
        throw IntegrityError("unknown tensor role " + role);
      }
    }
    if (restored != by_name.size()) throw IntegrityError("checkpoint is missing parameters");

    st.step = m.at("step").get<std::size_t>();
    st.seed = m.at("rng").at("seed").get<std::uint64_t>();
    st.target = {ss.at("target").get<std::size_t>()};
    st.active_targets.clear();
    for (const auto& t : ss.at("active_targets")) st.active_targets.push_back({t.get<std::size_t>()});
    if (ss.at("last_switch_step").is_null()) st.last_switch_step.reset();
    else st.last_switch_step = ss.at("last_switch_step").get<std::size_t>();
    st.events.clear();
    for (const auto& e : ss.at("events"))
      st.events.push_back({e.at("step").get<std::size_t>(), e.at("frozen_prefix").get<std::size_t>(),
                           e.at("newly_frozen_params").get<std::size_t>(), {e.at("target").get<std::size_t>()}});
    const auto k = ss.at("frozen_prefix").get<std::size_t>();
    st.model.params().frozen_prefix = k;
    for (auto& p : named_parameters(st.model.params())) {
      if ((p.block == 0 && k >= 1) || (p.block >= 1 && p.block <= static_cast<int>(k))) p.tensor.set_requires_grad(false);
    }
    return out;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Metrics

inline json metrics_record(const StepResult& r, const std::string& target_label) {
  json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["frozen_prefix"] = r.frozen_prefix;
  j["target"] = target_label;
  j["flops_step"] = r.flops_step;
  for (const auto& [k, v] : r.extras) j[k] = v;
  return j;
}

/// Appends one JSON object as a line; each run owns its file.
inline void append_metrics(const json& record, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open " + path.string());
  out << record.dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

// ---------------------------------------------------------------------------
// CSV tables

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// header: layer,freeze_step,final_loss,deviation_percent,diverged. The first
/// row (layer 0, freeze_step = run length) is the unfrozen run.
inline std::string grid_csv(const ConvergenceGrid& g, std::size_t total_steps) {
  std::ostringstream os;
  os << "layer,freeze_step,final_loss,deviation_percent,diverged\n";
  os << 0 << ',' << total_steps << ',' << format_double(g.base_loss) << ",0,0\n";
  for (const auto& e : g.entries)
    os << e.layer << ',' << e.freeze_step << ',' << format_double(e.final_loss) << ',' << format_double(e.deviation)
       << ',' << (e.diverged ? 1 : 0) << '\n';
  return os.str();
}

/// header: step,frozen_prefix,event,<p>_forward,<p>_backward,<p>_target,<p>_step,<p>_cumulative,<p>_memory
/// for each named report p.
inline std::string cost_csv(const std::vector<std::pair<std::string, const CostReport*>>& reports) {
  if (reports.empty()) return "";
  const auto& first = *reports.front().second;
  std::ostringstream os;
  os << "step,frozen_prefix,event";
  for (const auto& [n, _] : reports)
    os << ',' << n << "_forward," << n << "_backward," << n << "_target," << n << "_step," << n << "_cumulative," << n
       << "_memory";
  os << '\n';
  std::set<std::size_t> events(first.event_steps.begin(), first.event_steps.end());
  for (std::size_t s = 0; s < first.step_flops.size(); ++s) {
    os << s << ',' << first.frozen_prefix[s] << ',' << (events.count(s) ? 1 : 0);
    for (const auto& [_, r] : reports)
      os << ',' << format_double(r->forward_flops[s]) << ',' << format_double(r->backward_flops[s]) << ','
         << format_double(r->target_flops[s]) << ',' << format_double(r->step_flops[s]) << ','
         << format_double(r->cumulative_flops[s]) << ',' << format_double(r->memory_bytes[s]);
    os << '\n';
  }
  return os.str();
}

}  // namespace layerlock
