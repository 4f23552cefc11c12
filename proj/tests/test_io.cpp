#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace layerlock;
using namespace layerlock::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("layerlock_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string run_to_jsonl(const TrainConfig& cfg, const fs::path& file) {
  fs::remove(file);
  auto st = init_state(cfg);
  RunHooks h;
  h.on_step = [&](const StepResult& r) { append_metrics(metrics_record(r, target_label(st, cfg)), file); };
  run_until(st, cfg, cfg.steps, h);
  return read_text_file(file);
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEverything) {
  auto cfg = tiny_train();
  auto st = init_state(cfg);
  run_until(st, cfg, 17);
  const auto dir = scratch("roundtrip");
  save_checkpoint(st, cfg, dir);
  const auto loaded = load_checkpoint(dir);
  const auto& ls = loaded.state;
  EXPECT_EQ(ls.step, 17u);
  EXPECT_EQ(ls.model.params().frozen_prefix, 2u);
  EXPECT_EQ(ls.target, st.target);
  EXPECT_EQ(ls.last_switch_step, st.last_switch_step);
  ASSERT_EQ(ls.events.size(), st.events.size());
  EXPECT_EQ(ls.events[1].newly_frozen_params, st.events[1].newly_frozen_params);
  EXPECT_EQ(snapshot(all_parameters(ls)), snapshot(all_parameters(st)));
  for (const auto& [name, m] : st.opt.entries) {
    ASSERT_TRUE(ls.opt.entries.count(name)) << name;
    EXPECT_EQ(ls.opt.entries.at(name).m, m.m);
    EXPECT_EQ(ls.opt.entries.at(name).v, m.v);
    EXPECT_EQ(ls.opt.entries.at(name).count, m.count);
  }
  EXPECT_EQ(ls.opt.entries.size(), st.opt.entries.size());
  EXPECT_EQ(to_json(loaded.config), to_json(cfg));
  for (const auto& p : named_parameters(ls.model.params()))
    if (p.block >= 0 && p.block <= 2) {
      EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
    }
}

TEST(Checkpoint, JepaStateRoundTrips) {
  auto cfg = tiny_train(TrainMode::jepa);
  cfg.model.decoder_blocks = 0;
  cfg.model.learned_pos_embed = true;
  cfg.model.input = {4, 8, 8};
  cfg.mask.mode = MaskMode::multiblock;
  cfg.mask.multiblock = {2, {0.15, 0.3}, {0.75, 1.5}};
  cfg.jepa.decoder_depth = 1;
  cfg.schedule = {true, 2, 2, 1, 2, {}};
  auto st = init_state(cfg);
  run_until(st, cfg, 5);
  const auto dir = scratch("jepa");
  save_checkpoint(st, cfg, dir);
  auto loaded = load_checkpoint(dir);
  EXPECT_EQ(snapshot(all_parameters(loaded.state)), snapshot(all_parameters(st)));
  EXPECT_EQ(teacher_student_distance(loaded.state.jepa->teacher, st.jepa->teacher), 0.0);
  const auto a = run_step(st, cfg, make_batch(cfg, 5));
  const auto b = run_step(loaded.state, loaded.config, make_batch(loaded.config, 5));
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Checkpoint, CorruptionDetected) {
  const auto cfg = tiny_train();
  auto st = init_state(cfg);
  run_until(st, cfg, 3);
  const auto dir = scratch("corrupt");
  save_checkpoint(st, cfg, dir);
  {
    std::fstream f(dir / "payload.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x5a');
  }
  EXPECT_THROW(load_checkpoint(dir), IntegrityError);
  save_checkpoint(st, cfg, dir);
  fs::resize_file(dir / "payload.bin", fs::file_size(dir / "payload.bin") - 8);
  EXPECT_THROW(load_checkpoint(dir), IntegrityError);
  write_text_file(dir / "manifest.json", "{ not json");
  EXPECT_THROW(load_checkpoint(dir), IntegrityError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}

TEST(Checkpoint, ResumeContinuesBitwise) {
  auto cfg = tiny_train();
  cfg.steps = 32;
  auto straight = init_state(cfg);
  std::vector<double> expect;
  run_until(straight, cfg, 12);
  RunHooks h;
  h.on_step = [&](const StepResult& r) { expect.push_back(r.loss); };
  run_until(straight, cfg, 32, h);

  auto st = init_state(cfg);
  run_until(st, cfg, 12);
  const auto dir = scratch("resume");
  save_checkpoint(st, cfg, dir);
  auto loaded = load_checkpoint(dir);
  std::vector<double> got;
  RunHooks g;
  g.on_step = [&](const StepResult& r) { got.push_back(r.loss); };
  run_until(loaded.state, loaded.config, 32, g);
  ASSERT_EQ(got.size(), 20u);
  EXPECT_EQ(got, expect);
  EXPECT_EQ(snapshot(all_parameters(loaded.state)), snapshot(all_parameters(straight)));
}

TEST(Metrics, JsonlIsBitwiseReproducible) {
  auto cfg = tiny_train();
  cfg.steps = 15;
  cfg.probe_every = 5;
  cfg.probe_clips = 3;
  const auto dir = scratch("metrics");
  const auto a = run_to_jsonl(cfg, dir / "a.jsonl");
  const auto b = run_to_jsonl(cfg, dir / "b.jsonl");
  EXPECT_EQ(a, b);
  const auto recs = read_metrics(dir / "a.jsonl");
  ASSERT_EQ(recs.size(), 15u);
  EXPECT_EQ(recs[0].at("step"), 0);
  EXPECT_EQ(recs[0].at("target"), "pixels");
  EXPECT_EQ(recs[14].at("frozen_prefix"), 1);
  EXPECT_EQ(recs[14].at("target"), "layer1");
  EXPECT_TRUE(recs[4].contains("probe_effective_rank"));
  EXPECT_FALSE(recs[5].contains("probe_effective_rank"));
}

TEST(Metrics, DoublesRoundTripExactly) {
  StepResult r;
  r.loss = 0.1 + 0.2;
  r.lr = 1.0 / 3.0;
  r.flops_step = 1.2345678901234567e15;
  const auto dir = scratch("doubles");
  append_metrics(metrics_record(r, "pixels"), dir / "m.jsonl");
  const auto back = read_metrics(dir / "m.jsonl").at(0);
  EXPECT_EQ(back.at("loss").get<double>(), r.loss);
  EXPECT_EQ(back.at("lr").get<double>(), r.lr);
  EXPECT_EQ(back.at("flops_step").get<double>(), r.flops_step);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(config_error(R"({"base": "toy-mae", "model": {"dpth": 3}})").find("model.dpth"), std::string::npos);
  EXPECT_NE(config_error(R"({"optim": {"peak_lr": "fast"}})").find("optim.peak_lr"), std::string::npos);
  EXPECT_NE(config_error(R"({"mode": "sideways"})").find("mode"), std::string::npos);
  EXPECT_NE(config_error(R"({"base": "nope"})").find("unknown preset"), std::string::npos);
  EXPECT_NE(config_error("{ oops").find("not valid JSON"), std::string::npos);
  EXPECT_NE(config_error(R"({"base": "toy-mae", "schedule": {"max_frozen": 9}})").find("max_frozen"),
            std::string::npos);
}

TEST(Config, OverridesOnTopOfPreset) {
  const auto c = parse_config(R"({"base": "toy-mae", "seed": 7, "schedule": {"start": 300}, "optim": {"weight_decay_end": null}})");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.schedule.start, 300u);
  EXPECT_EQ(c.schedule.interval, 100u);
  EXPECT_EQ(c.model.depth, 10u);
  EXPECT_FALSE(c.optim.weight_decay_end.has_value());
}

TEST(Config, JsonRoundTripForEveryPreset) {
  for (const auto& name : preset_names()) {
    const auto c = preset(name);
    EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c)) << name;
    EXPECT_NO_THROW(c.validate()) << name;
  }
}

TEST(Config, ReferencePresetValues) {
  const auto g = preset("vitg-1b");
  EXPECT_EQ(g.schedule.start, 160000u);
  EXPECT_EQ(g.schedule.interval, 10000u);
  EXPECT_EQ(g.schedule.jump, 1u);
  EXPECT_EQ(g.schedule.max_frozen, 32u);
  EXPECT_EQ(g.model.depth, 48u);
  EXPECT_EQ(g.model.d_model, 1664u);
  EXPECT_EQ(g.mask.mask_ratio, 0.95);
  const auto b = preset("vitb-50m");
  EXPECT_EQ(b.schedule.jump, 2u);
  EXPECT_EQ(b.schedule.target_layers, (std::vector<std::size_t>{1, 3, 5, 7}));
  const auto toy = preset("toy-mae");
  EXPECT_EQ(toy.model.encoder_depth(), 8u);
  EXPECT_EQ(toy.steps, 2000u);
}
