// layerlock: train, analyze layer convergence, estimate cost, evaluate readouts.
//
// Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "layerlock/layerlock.hpp"

namespace fs = std::filesystem;
using namespace layerlock;

namespace {

enum Exit : int { ok = 0, config_error = 2, divergence = 3, io_error = 4 };

struct ConfigSource {
  std::string config_path;
  std::string preset_name;
};

void add_config_flags(CLI::App* cmd, ConfigSource& src) {
  auto* c = cmd->add_option("--config", src.config_path, "JSON config file");
  auto* p = cmd->add_option("--preset", src.preset_name, "built-in preset name");
  c->excludes(p);
}

/// Loads the config and the text to echo into the output directory.
std::pair<TrainConfig, std::string> load_config(const ConfigSource& src) {
  if (!src.config_path.empty()) {
    auto text = read_text_file(src.config_path);
    return {parse_config(text), text};
  }
  if (src.preset_name.empty()) throw ConfigError("one of --config or --preset is required");
  TrainConfig c = preset(src.preset_name);
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return {c, to_json(c).dump(2) + "\n"};
}

/// --seed beats LAYERLOCK_SEED, which beats the config's seed.
void apply_seed(TrainConfig& c, const std::optional<std::uint64_t>& flag) {
  if (flag) {
    c.seed = *flag;
    return;
  }
  if (const char* env = std::getenv("LAYERLOCK_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError(std::string("LAYERLOCK_SEED: not an unsigned integer: \"") + env + "\"");
    }
  }
}

void echo_config(const fs::path& out, const std::string& original, const TrainConfig& resolved) {
  write_text_file(out / "config.json", original);
  write_text_file(out / "resolved_config.json", to_json(resolved).dump(2) + "\n");
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return ok;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const NumericError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return divergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io_error;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io_error;
  }
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigSource src;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string resume;
};

void cmd_train(const TrainArgs& a) {
  const fs::path out = a.out;
  TrainConfig cfg;
  std::string original;
  std::optional<TrainState> st;
  if (!a.resume.empty()) {
    if (!a.src.config_path.empty() || !a.src.preset_name.empty())
      throw ConfigError("--resume takes its config from the checkpoint; drop --config/--preset");
    if (a.seed) throw ConfigError("--resume keeps the checkpoint's seed; drop --seed");
    auto loaded = load_checkpoint(a.resume);
    cfg = loaded.config;
    st.emplace(std::move(loaded.state));
    original = to_json(cfg).dump(2) + "\n";
  } else {
    std::tie(cfg, original) = load_config(a.src);
    apply_seed(cfg, a.seed);
  }
  if (a.steps) cfg.steps = *a.steps;
  if (!st) st.emplace(init_state(cfg));

  make_dir(out);
  echo_config(out, original, cfg);
  const fs::path metrics = out / "metrics.jsonl";
  if (!a.resume.empty() && fs::exists(metrics)) {
    // Continue an existing trace: drop any lines past the resume step.
    auto records = read_metrics(metrics);
    std::ostringstream kept;
    for (const auto& r : records)
      if (r.at("step").get<std::size_t>() < st->step) kept << r.dump() << '\n';
    write_text_file(metrics, kept.str());
  } else {
    write_text_file(metrics, "");
  }

  RunHooks hooks;
  hooks.on_step = [&](const StepResult& r) { append_metrics(metrics_record(r, target_label(*st, cfg)), metrics); };
  hooks.on_checkpoint = [&](const TrainState& s) {
    const auto dir = out / "checkpoints" / ("step_" + std::to_string(s.step));
    save_checkpoint(s, cfg, dir);
    write_text_file(out / "checkpoints" / "latest", dir.filename().string() + "\n");
  };
  const std::size_t start = st->step;
  run_until(*st, cfg, cfg.steps, hooks);
  save_checkpoint(*st, cfg, out / "final");
  std::cout << "trained " << cfg.name << " (" << enum_name(cfg.mode) << ") steps " << start << ".." << st->step
            << ", frozen prefix " << st->model.params().frozen_prefix << ", target " << target_label(*st, cfg) << '\n';
}

// ---------------------------------------------------------------------------

struct GridArgs {
  ConfigSource src;
  std::string out;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> freeze_steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::size_t window = 0;
  std::size_t seeds = 1;
  std::size_t jobs = 1;
  double tolerance = 2.0;
};

void cmd_grid(const GridArgs& a) {
  auto [cfg, original] = load_config(a.src);
  apply_seed(cfg, a.seed);
  if (a.steps) cfg.steps = *a.steps;
  if (a.seeds == 0) throw ConfigError("--seeds must be >= 1");
  GridOptions go;
  go.jobs = a.jobs;
  go.window = a.window > 0 ? a.window : std::min<std::size_t>(1000, cfg.steps / 2);
  const fs::path out = a.out;
  make_dir(out);
  echo_config(out, original, cfg);

  std::vector<ConvergenceGrid> grids;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    TrainConfig c = cfg;
    c.seed = cfg.seed + s;
    grids.push_back(convergence_grid(c, a.layers, a.freeze_steps, cfg.steps, go));
    write_text_file(out / ("grid_seed" + std::to_string(c.seed) + ".csv"), grid_csv(grids.back(), cfg.steps));
  }
  const auto grid = average_grids(grids);
  write_text_file(out / "grid.csv", grid_csv(grid, cfg.steps));
  const auto rep = check_monotonicity(grid, a.tolerance);
  std::ostringstream os;
  os << "tolerance_points " << a.tolerance << "\nworst_increase_in_T " << rep.worst_in_time
     << "\nworst_decrease_in_L " << rep.worst_in_depth << "\nviolations " << rep.violations.size() << '\n';
  for (const auto& v : rep.violations) os << "  " << v << '\n';
  write_text_file(out / "monotonicity.txt", os.str());
  std::cout << os.str();
}

// ---------------------------------------------------------------------------

struct CostArgs {
  ConfigSource src;
  std::string out;
  std::optional<std::size_t> steps;
  std::vector<std::size_t> schedule;
  bool freeze_only = false;
};

void cmd_cost(const CostArgs& a) {
  auto [cfg, original] = load_config(a.src);
  if (a.steps) cfg.steps = *a.steps;
  if (!a.schedule.empty()) {
    if (a.schedule.size() != 4) throw ConfigError("--schedule expects start,interval,jump,max_frozen");
    cfg.schedule.enabled = true;
    cfg.schedule.start = a.schedule[0];
    cfg.schedule.interval = a.schedule[1];
    cfg.schedule.jump = a.schedule[2];
    cfg.schedule.max_frozen = a.schedule[3];
    cfg.schedule.target_layers.clear();
    try {
      cfg.schedule.validate(cfg.model.encoder_depth());
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  }
  FreezeSchedule none = cfg.schedule;
  none.enabled = false;
  auto opt = cost_options(cfg);
  if (a.freeze_only) opt.switch_targets = opt.multi_target = false;
  const auto frozen = flops_estimate(cfg.model, cfg.schedule, cfg.mask, cfg.steps, opt);
  const auto base = flops_estimate(cfg.model, none, cfg.mask, cfg.steps, opt);
  const fs::path out = a.out;
  if (out.has_parent_path()) make_dir(out.parent_path());
  write_text_file(out, cost_csv({{"frozen", &frozen}, {"unfrozen", &base}}));
  std::cout << "cumulative_flops_frozen " << format_double(frozen.total_flops()) << "\ncumulative_flops_unfrozen "
            << format_double(base.total_flops()) << "\nsavings_percent "
            << format_double(cumulative_savings_percent(frozen, base)) << "\npeak_memory_bytes_frozen "
            << format_double(frozen.peak_memory()) << "\npeak_memory_bytes_unfrozen "
            << format_double(base.peak_memory()) << '\n';
}

// ---------------------------------------------------------------------------

struct ReadoutArgs {
  std::string checkpoint;
  std::string task = "classify";
  std::string out;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> train_clips;
  std::optional<std::size_t> test_clips;
  bool shuffle = false;
};

void cmd_readout(const ReadoutArgs& a) {
  if (!fs::exists(fs::path(a.checkpoint) / "manifest.json"))
    throw IoError("no checkpoint at " + a.checkpoint);
  const auto loaded = load_checkpoint(a.checkpoint);
  const ReadoutTask task = a.task == "dense" ? ReadoutTask::dense : ReadoutTask::classify;
  ReadoutConfig rc;
  rc.seed = loaded.config.seed;
  if (a.steps) rc.steps = *a.steps;
  if (a.train_clips) rc.train_clips = *a.train_clips;
  if (a.test_clips) rc.test_clips = *a.test_clips;
  const auto rep = train_and_eval_readout(loaded.state.model, task, rc, a.shuffle);

  std::ostringstream os;
  os << "model_id,task,lr,depth_fraction,layer,metric\n";
  const std::string id = loaded.config.name + "@" + std::to_string(loaded.state.step);
  for (const auto& c : rep.cells)
    os << id << ',' << a.task << ',' << format_double(c.lr) << ',' << format_double(c.depth_fraction) << ','
       << c.layer << ',' << format_double(c.metric) << '\n';
  const fs::path out = a.out;
  if (out.has_parent_path()) make_dir(out.parent_path());
  write_text_file(out, os.str());
  std::cout << "best " << (task == ReadoutTask::classify ? "top1 " : "absrel ") << format_double(rep.best.metric)
            << " at lr " << rep.best.lr << ", depth fraction " << rep.best.depth_fraction << " (layer "
            << rep.best.layer << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LayerLock progressive-freezing trainer"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "run a training job");
  add_config_flags(train, ta.src);
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--seed", ta.seed, "seed override");
  train->add_option("--steps", ta.steps, "step count override");
  train->add_option("--resume", ta.resume, "checkpoint directory to resume from");

  GridArgs ga;
  auto* grid = app.add_subcommand("analyze-convergence", "layer-convergence grid");
  add_config_flags(grid, ga.src);
  grid->add_option("--layers", ga.layers, "frozen prefix lengths")->delimiter(',')->required();
  grid->add_option("--freeze-steps", ga.freeze_steps, "freeze steps")->delimiter(',')->required();
  grid->add_option("--out", ga.out, "output directory")->required();
  grid->add_option("--seed", ga.seed, "first seed");
  grid->add_option("--steps", ga.steps, "run length");
  grid->add_option("--window", ga.window, "final-loss averaging window (default min(1000, steps/2))");
  grid->add_option("--seeds", ga.seeds, "replicate count, averaged");
  grid->add_option("--jobs", ga.jobs, "parallel cells");
  grid->add_option("--tolerance", ga.tolerance, "monotonicity tolerance in percentage points");

  CostArgs ca;
  auto* cost = app.add_subcommand("estimate-cost", "analytic FLOPs and memory");
  add_config_flags(cost, ca.src);
  cost->add_option("--steps", ca.steps, "step count override");
  cost->add_option("--schedule", ca.schedule, "start,interval,jump,max_frozen")->delimiter(',');
  cost->add_option("--out", ca.out, "CSV path")->required();
  cost->add_flag("--freeze-only", ca.freeze_only, "keep pixel targets (no latent target pass)");

  ReadoutArgs ra;
  auto* readout = app.add_subcommand("eval-readout", "frozen-feature readout sweep");
  readout->add_option("--checkpoint", ra.checkpoint, "checkpoint directory")->required();
  readout->add_option("--task", ra.task, "classify or dense")->check(CLI::IsMember({"classify", "dense"}));
  readout->add_option("--out", ra.out, "CSV path")->required();
  readout->add_option("--steps", ra.steps, "readout training steps");
  readout->add_option("--train-clips", ra.train_clips, "training clips");
  readout->add_option("--test-clips", ra.test_clips, "held-out clips");
  readout->add_flag("--shuffle-labels", ra.shuffle, "label-shuffled control");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  if (*train) return guarded([&] { cmd_train(ta); });
  if (*grid) return guarded([&] { cmd_grid(ga); });
  if (*cost) return guarded([&] { cmd_cost(ca); });
  return guarded([&] { cmd_readout(ra); });
}
