#pragma once

// Layer-convergence grid: how much the final pixel loss suffers when the first
// L encoder layers are frozen at step T, relative to an unfrozen run.

#include <algorithm>
#include <cstddef>
#include <map>
#include <mutex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "layerlock/collapse.hpp"
#include "layerlock/cost.hpp"
#include "layerlock/trainer.hpp"

namespace layerlock {

/// Mean of the last `window` entries.
inline double final_loss_window(std::span<const double> trace, std::size_t window) {
  if (window == 0) throw ContractError("final_loss_window: window must be >= 1");
  if (trace.size() < window) {
    throw ContractError("final_loss_window: trace of " + std::to_string(trace.size()) +
                        " steps is shorter than the window " + std::to_string(window));
  }
  double s = 0.0;
  for (std::size_t i = trace.size() - window; i < trace.size(); ++i) s += trace[i];
  return s / static_cast<double>(window);
}

inline double percent_deviation(double final_loss, double base_loss) {
  return 100.0 * (final_loss - base_loss) / base_loss;
}

struct GridEntry {
  std::size_t layer = 0;
  std::size_t freeze_step = 0;
  double final_loss = 0.0;
  double deviation = 0.0;  // percent over the unfrozen run
  bool diverged = false;
  std::string error;
};

struct ConvergenceGrid {
  double base_loss = 0.0;
  std::size_t window = 1000;
  std::vector<double> base_trace;
  std::vector<GridEntry> entries;  // row-major over (layers, freeze_steps)
  std::vector<std::size_t> layers;
  std::vector<std::size_t> freeze_steps;

  const GridEntry& at(std::size_t layer, std::size_t freeze_step) const {
    for (const auto& e : entries)
      if (e.layer == layer && e.freeze_step == freeze_step) return e;
    throw std::out_of_range("no grid entry for L=" + std::to_string(layer) + ", T=" + std::to_string(freeze_step));
  }
};

struct GridOptions {
  std::size_t window = 1000;
  std::size_t jobs = 1;
};

/// Trains the unfrozen run once, snapshots it at every freeze step and branches
/// each (L, T) cell from the snapshot with a single hard freeze of prefix L at
/// T. Targets stay on pixels. Branching is exact because batches and masks are
/// pure functions of (seed, step).
inline ConvergenceGrid convergence_grid(const TrainConfig& base_cfg, std::span<const std::size_t> layers,
                                        std::span<const std::size_t> freeze_steps, std::size_t total_steps,
                                        const GridOptions& opt = {}) {
  for (auto l : layers)
    if (l > base_cfg.model.encoder_depth()) throw ContractError("convergence_grid: layer beyond the encoder");
  for (auto t : freeze_steps)
    if (t > total_steps) throw ContractError("convergence_grid: freeze step beyond the run");
  if (total_steps < opt.window) throw ContractError("convergence_grid: run shorter than the averaging window");

  TrainConfig cfg = base_cfg;
  cfg.mode = TrainMode::baseline;
  cfg.steps = total_steps;
  cfg.probe_every = 0;
  cfg.checkpoint_every = 0;

  ConvergenceGrid grid;
  grid.window = opt.window;
  grid.layers.assign(layers.begin(), layers.end());
  grid.freeze_steps.assign(freeze_steps.begin(), freeze_steps.end());

  std::vector<std::size_t> snap_steps(freeze_steps.begin(), freeze_steps.end());
  std::sort(snap_steps.begin(), snap_steps.end());
  snap_steps.erase(std::unique(snap_steps.begin(), snap_steps.end()), snap_steps.end());
  std::map<std::size_t, TrainState> snapshots;

  auto st = init_state(cfg);
  RunHooks hooks;
  hooks.on_step = [&](const StepResult& r) { grid.base_trace.push_back(r.loss); };
  for (auto t : snap_steps) {
    run_until(st, cfg, t, hooks);
    snapshots.emplace(t, st.clone());
  }
  run_until(st, cfg, total_steps, hooks);
  grid.base_loss = final_loss_window(grid.base_trace, opt.window);

  for (auto l : layers)
    for (auto t : freeze_steps) {
      GridEntry e;
      e.layer = l;
      e.freeze_step = t;
      grid.entries.push_back(e);
    }

  auto run_cell = [&](GridEntry& e) {
    TrainConfig c = cfg;
    c.mode = TrainMode::layerlock;
    c.target.switch_targets = false;
    c.schedule = single_freeze(e.layer, e.freeze_step);
    std::vector<double> trace(grid.base_trace.begin(), grid.base_trace.begin() + static_cast<std::ptrdiff_t>(e.freeze_step));
    try {
      if (e.freeze_step < total_steps) {
        auto branch = snapshots.at(e.freeze_step).clone();
        RunHooks h;
        h.on_step = [&](const StepResult& r) { trace.push_back(r.loss); };
        run_until(branch, c, total_steps, h);
      }
      e.final_loss = final_loss_window(trace, opt.window);
      e.deviation = percent_deviation(e.final_loss, grid.base_loss);
    } catch (const NumericError& err) {
      e.diverged = true;
      e.error = err.what();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, opt.jobs);
  if (jobs == 1) {
    for (auto& e : grid.entries) run_cell(e);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= grid.entries.size()) return;
            i = next++;
          }
          run_cell(grid.entries[i]);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  return grid;
}

/// Cell-wise mean of grids over the same (L, T) layout; a cell diverged in any
/// replicate is marked diverged.
inline ConvergenceGrid average_grids(std::span<const ConvergenceGrid> grids) {
  if (grids.empty()) throw ContractError("average_grids: no grids");
  ConvergenceGrid out = grids[0];
  const double n = static_cast<double>(grids.size());
  out.base_loss = 0.0;
  for (const auto& g : grids) out.base_loss += g.base_loss / n;
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    auto& e = out.entries[i];
    e.final_loss = e.deviation = 0.0;
    for (const auto& g : grids) {
      if (g.entries.size() != out.entries.size()) throw DimensionError("average_grids: layouts differ");
      const auto& o = g.entries[i];
      e.final_loss += o.final_loss / n;
      e.deviation += o.deviation / n;
      e.diverged = e.diverged || o.diverged;
    }
  }
  out.base_trace.clear();
  return out;
}

struct MonotonicityReport {
  double worst_in_time = 0.0;   // largest increase of deviation with later freezing
  double worst_in_depth = 0.0;  // largest decrease of deviation with deeper freezing
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

/// Deviation should not grow as T increases (fixed L) and should not shrink as
/// L increases (fixed T). Adjacent pairs exceeding `tolerance` percentage
/// points are reported.
inline MonotonicityReport check_monotonicity(const ConvergenceGrid& g, double tolerance) {
  MonotonicityReport rep;
  auto ls = g.layers, ts = g.freeze_steps;
  std::sort(ls.begin(), ls.end());
  std::sort(ts.begin(), ts.end());
  auto note = [&](const std::string& what, double excess) {
    if (excess > tolerance) {
      std::ostringstream os;
      os << what << " by " << excess << " points";
      rep.violations.push_back(os.str());
    }
  };
  for (auto l : ls)
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
      const double inc = g.at(l, ts[i + 1]).deviation - g.at(l, ts[i]).deviation;
      rep.worst_in_time = std::max(rep.worst_in_time, inc);
      note("L=" + std::to_string(l) + ": T " + std::to_string(ts[i]) + "->" + std::to_string(ts[i + 1]) +
               " increases deviation",
           inc);
    }
  for (auto t : ts)
    for (std::size_t i = 0; i + 1 < ls.size(); ++i) {
      const double dec = g.at(ls[i], t).deviation - g.at(ls[i + 1], t).deviation;
      rep.worst_in_depth = std::max(rep.worst_in_depth, dec);
      note("T=" + std::to_string(t) + ": L " + std::to_string(ls[i]) + "->" + std::to_string(ls[i + 1]) +
               " decreases deviation",
           dec);
    }
  for (const auto& e : g.entries)
    if (e.diverged) rep.violations.push_back("diverged cell L=" + std::to_string(e.layer) + ", T=" + std::to_string(e.freeze_step));
  return rep;
}

/// Percent of cumulative FLOPs saved by `frozen` relative to `base`.
inline double cumulative_savings_percent(const CostReport& frozen, const CostReport& base) {
  return 100.0 * (base.total_flops() - frozen.total_flops()) / base.total_flops();
}

}  // namespace layerlock
