// Acceptance suite: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "cost_oracle.hpp"
#include "test_util.hpp"

using namespace layerlock;
using namespace layerlock::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs shared between criteria are computed once, on first use.
struct Shared {
  std::optional<std::vector<ConvergenceGrid>> grids;
  double grid_seconds = 0.0;
  std::optional<VitModel> layerlock_model;
  std::vector<StepResult> layerlock_trace, nofreeze_trace;
  double layerlock_seconds = 0.0;
  bool ab_done = false;
};

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Stopwatch sw;
  auto mc = tiny_model();
  mc.depth = 4;
  mc.d_model = 24;
  mc.n_heads = 3;
  mc.rope.fractions = {0.2, 0.25, 0.25};
  VitModel m(mc, 1);
  m.head(TargetKind{2});
  randomize(named_parameters(m.params()), 2, 0.1);
  const auto params = named_parameters(m.params());
  const auto n_params = parameter_count(params);
  const auto clip = synth_video(SynthKind::moving_shapes, 3, mc.input);
  const std::vector<std::size_t> keep{0, 2, 3, 6};
  Tensor target;
  {
    NoGradGuard g;
    target = stop_gradient(m.encode_prefix(patchify(clip, mc.patch), 2, 2, false).embeddings);
  }
  const auto r = finite_difference([&] { return masked_loss(m, clip, keep, &target, 2); }, tensors_of(params), 1e-4);
  const double secs = sw.seconds();
  return {n_params <= 50000 && r.checked == n_params && r.max_rel < 1e-4 && secs < 300,
          fmt("%zu params, %zu entries checked, max rel err %.3e (< 1e-4), %.1fs", n_params, r.checked, r.max_rel,
              secs)};
}

Outcome freeze_immutability() {
  auto cfg = preset("toy-mae");
  cfg.steps = 800;
  auto st = init_state(cfg);
  // Value of each parameter at the moment it froze.
  std::map<std::string, std::vector<double>> frozen_values;
  std::size_t events = 0, shrink_ok = 0;
  std::ostringstream deltas;
  while (st.step < cfg.steps) {
    const auto before = named_parameters(st.model.params());
    const auto values = snapshot(before);
    const auto moments_before = backbone_moment_count(st);
    const auto n_events = st.events.size();
    train_step(st, cfg, make_batch(cfg, st.step));
    if (st.events.size() == n_events) continue;
    ++events;
    const auto& e = st.events.back();
    const auto moments_after = backbone_moment_count(st);
    std::size_t newly = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const auto& p = before[i];
      const bool frozen = p.block == 0 || (p.block >= 1 && p.block <= static_cast<int>(e.frozen_prefix));
      if (frozen && !frozen_values.count(p.name)) {
        frozen_values[p.name] = values[i];
        newly += values[i].size();
      }
    }
    if (newly == e.newly_frozen_params && moments_before - moments_after == newly) ++shrink_ok;
    deltas << (events > 1 ? "," : "") << moments_before - moments_after;
  }
  std::size_t changed = 0;
  for (const auto& p : named_parameters(st.model.params())) {
    auto it = frozen_values.find(p.name);
    if (it != frozen_values.end() && p.tensor.values() != it->second) ++changed;
  }
  return {events == 6 && shrink_ok == events && changed == 0,
          fmt("%zu events, %zu frozen tensors bitwise constant (%zu changed), moment shrink matched %zu/%zu [%s]",
              events, frozen_values.size(), changed, shrink_ok, events, deltas.str().c_str())};
}

Outcome stop_gradient_criterion() {
  const auto mc = preset("toy-mae").model;
  double worst = 0.0;
  for (std::size_t k : {0u, 1u, 2u}) {
    VitModel m(mc, 10 + k);
    const TargetKind target{k};
    m.head(target);
    randomize(named_parameters(m.params()), 20 + k);
    m.params().frozen_prefix = k;  // targets allowed, gradients not blocked
    const auto full = patchify(synth_video(SynthKind::moving_shapes, 5, mc.input), mc.patch);
    Rng rng(30 + k);
    const auto keep = random_mask(mc.tokens(), 0.5, rng);
    auto loss_with = [&](const Tensor& tgt) {
      TokenBatch ctx;
      ctx.tokens = gather_rows(full.tokens, keep);
      for (auto i : keep) ctx.positions.push_back(full.positions[i]);
      const auto enc = m.encode(ctx, 0, false);
      const auto lat = decoding_tokens(m);
      return layerlock_loss(m.predict(m.decode(enc.embeddings, ctx.positions, lat.tokens, lat.positions), target), tgt);
    };
    const auto params = tensors_of(named_parameters(m.params()));
    const Tensor live = compute_targets(m, full, k);
    const Tensor constant(live.shape(), live.values());
    const auto a = backward(loss_with(live), params), b = backward(loss_with(constant), params);
    for (const auto& p : params) {
      const auto ga = a.or_zero(p), gb = b.or_zero(p);
      for (std::size_t i = 0; i < ga.size(); ++i) worst = std::max(worst, std::abs(ga[i] - gb[i]));
    }
  }
  return {worst < 1e-12, fmt("max |grad(live) - grad(const)| = %.3e over k in {0,1,2} (< 1e-12)", worst)};
}

Outcome schedule_oracle() {
  const auto g = preset("vitg-1b").schedule, b = preset("vitb-50m").schedule;
  const bool ok = freeze_layer_schedule(159999, g) == 0 && freeze_layer_schedule(160000, g) == 1 &&
                  freeze_layer_schedule(170000, g) == 2 && freeze_layer_schedule(470000, g) == 32 &&
                  freeze_layer_schedule(488281, g) == 32 && freeze_layer_schedule(6000, b) == 2 &&
                  freeze_layer_schedule(10000, b) == 4 && freeze_layer_schedule(5999, b) == 0;
  return {ok, fmt("vitg-1b: 159999->%zu 160000->%zu cap %zu; vitb-50m: 6000->%zu 10000->%zu",
                  freeze_layer_schedule(159999, g), freeze_layer_schedule(160000, g),
                  freeze_layer_schedule(10'000'000, g), freeze_layer_schedule(6000, b),
                  freeze_layer_schedule(10000, b))};
}

Outcome cost_model() {
  const std::size_t steps = 800;
  double worst_cum = 0.0, worst_peak = 0.0;
  std::size_t events = 0, drops = 0, after = 0, below = 0;
  for (const auto& cfg : toy_cost_cases()) {
    const auto est = flops_estimate(cfg.model, cfg.schedule, cfg.mask, steps, cost_options(cfg));
    auto flat = cfg;
    flat.schedule.enabled = false;
    const auto base = flops_estimate(flat.model, flat.schedule, flat.mask, steps, cost_options(flat));
    const auto ref = brute_force_cost(cfg, steps);
    for (std::size_t s = 0; s < steps; ++s)
      worst_cum = std::max(worst_cum, relative_error(est.cumulative_flops[s], ref.cumulative[s]));
    worst_peak = std::max(worst_peak, relative_error(est.peak_memory(), ref.peak_memory));
    for (auto e : est.event_steps) {
      ++events;
      const double prev = e == 0 ? base.step_flops[0] : est.step_flops[e - 1];
      if (est.step_flops[e] < prev) ++drops;
    }
    for (std::size_t s = est.event_steps.front(); s < steps; ++s, ++after)
      if (est.cumulative_flops[s] < base.cumulative_flops[s]) ++below;
  }
  const bool ok = worst_cum < 1e-9 && worst_peak < 1e-9 && drops == events && below == after;
  return {ok, fmt("3 freeze schedules: step FLOPs dropped at %zu/%zu events; cumulative rel err %.2e, peak memory "
                  "rel err %.2e (< 1e-9); cumulative below unfrozen on %zu/%zu post-event steps",
                  drops, events, worst_cum, worst_peak, below, after)};
}

void ensure_grids(Shared& sh) {
  if (sh.grids) return;
  Stopwatch sw;
  std::vector<ConvergenceGrid> gs;
  const std::vector<std::size_t> ls{0, 2, 4, 6}, ts{250, 500, 1000, 1500, 2000};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto cfg = preset("toy-baseline");
    cfg.seed = seed;
    gs.push_back(convergence_grid(cfg, ls, ts, 2000, {1000, 1}));
  }
  sh.grid_seconds = sw.seconds();
  sh.grids = std::move(gs);
}

Outcome convergence_grid_criterion(Shared& sh, const fs::path& out_dir) {
  ensure_grids(sh);
  const auto& gs = *sh.grids;
  bool controls = true;
  for (const auto& g : gs)
    for (const auto& e : g.entries)
      if ((e.layer == 0 || e.freeze_step == 2000) && e.deviation != 0.0) controls = false;
  const auto avg = average_grids(gs);
  const auto rep = check_monotonicity(avg, 2.0);
  if (!out_dir.empty()) write_text_file(out_dir / "acceptance_grid.csv", grid_csv(avg, 2000));
  std::ostringstream cells;
  for (auto l : {2, 4, 6}) {
    cells << " L" << l << ":";
    for (auto t : {250, 500, 1000, 1500}) cells << fmt(" %.2f", avg.at(l, t).deviation);
  }
  return {controls && rep.ok() && sh.grid_seconds < 3600,
          fmt("3 seeds, controls exactly 0: %s; worst increase in T %.2f, worst decrease in L %.2f (tolerance 2 "
              "points), %zu violations; %.0fs; deviation %%:%s",
              controls ? "yes" : "no", rep.worst_in_time, rep.worst_in_depth, rep.violations.size(), sh.grid_seconds,
              cells.str().c_str())};
}

struct CollapseTrace {
  std::size_t first_collapse = SIZE_MAX;
  double v100 = 0.0, v_end = 0.0, min_rank = 1e9;
};

CollapseTrace analyse_collapse(const std::vector<StepResult>& trace) {
  CollapseTrace c;
  for (const auto& r : trace) {
    auto it = r.extras.find("probe_token_variance");
    if (it == r.extras.end()) continue;
    const std::size_t step = r.step + 1;
    const double var = it->second, rank = r.extras.at("probe_effective_rank");
    if (step == 100) c.v100 = var;
    c.v_end = var;
    c.min_rank = std::min(c.min_rank, rank);
    const bool collapsed = (c.v100 > 0.0 && var < 0.01 * c.v100) || rank < 2.0;
    if (collapsed && c.first_collapse == SIZE_MAX) c.first_collapse = step;
  }
  return c;
}

void ensure_ab(Shared& sh) {
  if (sh.ab_done) return;
  auto ll = preset("toy-mae");
  ll.probe_every = 100;
  Stopwatch sw;
  auto st = init_state(ll);
  RunHooks h;
  h.on_step = [&](const StepResult& r) { sh.layerlock_trace.push_back(r); };
  run_until(st, ll, ll.steps, h);
  sh.layerlock_seconds = sw.seconds();
  sh.layerlock_model = st.model.clone();

  auto nf = preset("toy-latent-nofreeze");
  nf.probe_every = 100;
  sh.nofreeze_trace = run_training(nf);
  sh.ab_done = true;
}

Outcome collapse_ab(Shared& sh) {
  ensure_ab(sh);
  const auto a = analyse_collapse(sh.nofreeze_trace), b = analyse_collapse(sh.layerlock_trace);
  const bool ordering = a.first_collapse != SIZE_MAX && a.first_collapse < b.first_collapse;
  const bool floor = b.v_end >= 0.5 * b.v100;
  auto when = [](std::size_t s) { return s == SIZE_MAX ? std::string("never") : "step " + std::to_string(s); };
  return {ordering && floor,
          fmt("latent-nofreeze collapses at %s (min eff. rank %.2f); LayerLock collapses %s, token variance %.3g at "
              "step 100 -> %.3g at end (%.0f%%, floor 50%%)",
              when(a.first_collapse).c_str(), a.min_rank, when(b.first_collapse).c_str(), b.v100, b.v_end,
              100.0 * b.v_end / b.v100)};
}

Outcome rope_suite() {
  const auto mc = preset("toy-mae").model;
  const RotationTable t(mc.rope_config(), mc.grid());
  const auto g = mc.grid();
  const std::size_t d = mc.d_model;
  Rng rng(7);
  auto vec = [&] {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  auto pos = [&] { return GridPos{rng.below(g.t), rng.below(g.h), rng.below(g.w)}; };
  auto rot = [&](std::vector<double> v, const GridPos& p) {
    t.rotate_row(v.data(), p, false);
    return v;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  double norm_err = 0, shift_err = 0, lin_err = 0;
  bool identity = true;
  for (int i = 0; i < 100; ++i) {
    const auto x = vec(), y = vec();
    const auto p = pos(), q = pos();
    norm_err = std::max(norm_err, std::abs(std::sqrt(dot(rot(x, p), rot(x, p))) - std::sqrt(dot(x, x))));
    const GridPos s{g.t - 1 - std::max(p.t, q.t), g.h - 1 - std::max(p.h, q.h), g.w - 1 - std::max(p.w, q.w)};
    const GridPos p2{p.t + s.t, p.h + s.h, p.w + s.w}, q2{q.t + s.t, q.h + s.h, q.w + s.w};
    shift_err = std::max(shift_err, std::abs(dot(rot(x, p), rot(y, q)) - dot(rot(x, p2), rot(y, q2))));
    const double a = rng.normal(), b = rng.normal();
    std::vector<double> mix(d);
    for (std::size_t j = 0; j < d; ++j) mix[j] = a * x[j] + b * y[j];
    const auto rm = rot(mix, p), rx = rot(x, p), ry = rot(y, p);
    for (std::size_t j = 0; j < d; ++j) lin_err = std::max(lin_err, std::abs(rm[j] - (a * rx[j] + b * ry[j])));
    identity = identity && rot(x, {0, 0, 0}) == x;
  }
  return {norm_err <= 1e-10 && shift_err <= 1e-10 && lin_err <= 1e-12 && identity,
          fmt("100 draws on the %zux%zux%zu grid: norm %.1e (1e-10), shift %.1e (1e-10), linearity %.1e (1e-12), "
              "origin identity %s",
              g.t, g.h, g.w, norm_err, shift_err, lin_err, identity ? "bitwise" : "NOT bitwise")};
}

Outcome ema() {
  const auto mc = preset("toy-mae").model;
  double worst = 0.0;
  for (double m : {0.5, 0.9, 0.998}) {
    VitModel teacher(mc, 1), student(mc, 2);
    const double d0 = teacher_student_distance(teacher, student);
    for (int n = 1; n <= 100; ++n) {
      ema_update(teacher, student, m);
      worst = std::max(worst, std::abs(teacher_student_distance(teacher, student) - std::pow(m, n) * d0));
    }
  }
  VitModel teacher(mc, 1), student(mc, 2);
  const auto t0 = snapshot(named_parameters(teacher.params()));
  ema_update(teacher, student, 1.0);
  const bool keep = snapshot(named_parameters(teacher.params())) == t0;
  ema_update(teacher, student, 0.0);
  const bool copy = snapshot(named_parameters(teacher.params())) == snapshot(named_parameters(student.params()));
  return {worst < 1e-12 && keep && copy,
          fmt("max | ||T-S|| - m^n ||T0-S|| | = %.2e over m in {0.5,0.9,0.998}, n<=100 (< 1e-12); m=1 %s, m=0 %s",
              worst, keep ? "exact" : "inexact", copy ? "exact" : "inexact")};
}

Outcome smoke(Shared& sh) {
  ensure_ab(sh);
  Stopwatch sw;
  const auto rep = train_and_eval_readout(*sh.layerlock_model, ReadoutTask::classify, ReadoutConfig{});
  const double readout_secs = sw.seconds();
  const double chance = 1.0 / kMotionClasses;

  ensure_grids(sh);
  const auto& trace = (*sh.grids)[0].base_trace;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) first += trace[i] / 10.0;
  for (std::size_t i = trace.size() - 100; i < trace.size(); ++i) last += trace[i] / 100.0;
  const double reduction = 100.0 * (first - last) / first;
  const double ll_secs = sh.layerlock_seconds + readout_secs;
  return {rep.best.metric >= 2.0 * chance && reduction >= 50.0 && ll_secs < 1800,
          fmt("LayerLock readout top-1 %.3f at lr %.0e, depth %.2f (>= %.3f); baseline pixel loss %.4f -> %.4f "
              "(%.1f%% reduction, >= 50%%); LayerLock train+readout %.0fs",
              rep.best.metric, rep.best.lr, rep.best.depth_fraction, 2.0 * chance, first, last, reduction, ll_secs)};
}

Outcome reproducibility(const fs::path& scratch_dir) {
  auto cfg = preset("toy-mae");
  cfg.steps = 260;
  cfg.probe_every = 50;
  const auto dir = scratch_dir / "acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto jsonl = [&](const fs::path& file) {
    auto st = init_state(cfg);
    RunHooks h;
    h.on_step = [&](const StepResult& r) { append_metrics(metrics_record(r, target_label(st, cfg)), file); };
    run_until(st, cfg, cfg.steps, h);
    return read_text_file(file);
  };
  const auto a = jsonl(dir / "a.jsonl"), b = jsonl(dir / "b.jsonl");

  auto straight = init_state(cfg);
  run_until(straight, cfg, 230);
  save_checkpoint(straight, cfg, dir / "ckpt");
  std::vector<double> expect, got;
  RunHooks he, hg;
  he.on_step = [&](const StepResult& r) { expect.push_back(r.loss); };
  hg.on_step = [&](const StepResult& r) { got.push_back(r.loss); };
  run_until(straight, cfg, 250, he);
  auto loaded = load_checkpoint(dir / "ckpt");
  run_until(loaded.state, loaded.config, 250, hg);
  const bool params_equal = snapshot(all_parameters(loaded.state)) == snapshot(all_parameters(straight));
  fs::remove_all(dir);
  return {a == b && !a.empty() && got == expect && got.size() == 20 && params_equal,
          fmt("metrics JSONL of two runs (%zu bytes, %zu lines) %s; resume at step 230 over %zu steps: losses %s, "
              "parameters %s",
              a.size(), static_cast<std::size_t>(std::count(a.begin(), a.end(), '\n')),
              a == b ? "identical" : "DIFFER", got.size(), got == expect ? "bitwise identical" : "DIFFER",
              params_equal ? "bitwise identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LayerLock acceptance suite"};
  std::vector<int> only;
  std::string out_dir;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--out", out_dir, "Directory for the averaged grid CSV and acceptance_report.txt");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());

  Shared sh;
  const fs::path scratch = out_dir.empty() ? fs::temp_directory_path() : fs::path(out_dir);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_fidelity},
      {2, freeze_immutability},
      {3, stop_gradient_criterion},
      {4, schedule_oracle},
      {5, cost_model},
      {6, [&] { return convergence_grid_criterion(sh, out_dir); }},
      {7, [&] { return collapse_ab(sh); }},
      {8, rope_suite},
      {9, ema},
      {10, [&] { return smoke(sh); }},
      {11, [&] { return reproducibility(scratch); }},
  };
  std::map<int, Outcome> results;
  std::ostringstream report;
  for (const auto& [id, fn] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Stopwatch sw;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    results[id] = o;
    const std::string line = "criterion " + std::to_string(id) + ": " + (o.pass ? "PASS" : "FAIL") + "  " + o.detail +
                             fmt("  [%.1fs]", sw.seconds());
    std::cout << line << std::endl;
    report << line << '\n';
  }
  int failed = 0;
  for (const auto& [id, o] : results) failed += o.pass ? 0 : 1;
  const std::string summary =
      "summary: " + std::to_string(results.size() - failed) + "/" + std::to_string(results.size()) + " criteria passed";
  std::cout << summary << std::endl;
  report << summary << '\n';
  if (!out_dir.empty()) std::ofstream(fs::path(out_dir) / "acceptance_report.txt") << report.str();
  return failed == 0 ? 0 : 1;
}
