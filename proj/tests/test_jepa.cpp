#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace layerlock;
using namespace layerlock::testing;

namespace {

TrainConfig tiny_jepa() {
  auto c = tiny_train(TrainMode::jepa);
  c.model.depth = 3;
  c.model.decoder_blocks = 0;
  c.model.learned_pos_embed = true;
  c.model.input = {4, 8, 8};
  c.mask.mode = MaskMode::multiblock;
  c.mask.multiblock = {2, {0.15, 0.3}, {0.75, 1.5}};
  c.jepa.decoder_depth = 1;
  c.jepa.ema_momentum = 0.9;
  c.schedule = {true, 4, 3, 1, 2, {}};
  return c;
}

}  // namespace

TEST(Ema, GeometricConvergenceToConstantStudent) {
  for (double m : {0.5, 0.9, 0.998}) {
    VitModel teacher(tiny_model(), 1), student(tiny_model(), 2);
    const double d0 = teacher_student_distance(teacher, student);
    ASSERT_GT(d0, 1.0);
    for (int n = 1; n <= 60; ++n) {
      ema_update(teacher, student, m);
      EXPECT_NEAR(teacher_student_distance(teacher, student), std::pow(m, n) * d0, 1e-12) << "m=" << m << " n=" << n;
    }
  }
}

TEST(Ema, DegenerateMomentaAreExact) {
  VitModel teacher(tiny_model(), 1), student(tiny_model(), 2);
  const auto before = snapshot(named_parameters(teacher.params()));
  ema_update(teacher, student, 1.0);
  EXPECT_EQ(snapshot(named_parameters(teacher.params())), before);
  ema_update(teacher, student, 0.0);
  EXPECT_EQ(snapshot(named_parameters(teacher.params())), snapshot(named_parameters(student.params())));
  EXPECT_EQ(teacher_student_distance(teacher, student), 0.0);
}

TEST(Ema, MismatchedListsRejected) {
  VitModel a(tiny_model(), 1), b(tiny_model(), 2);
  b.head(TargetKind{1});
  EXPECT_THROW(ema_update(a, b, 0.5), DimensionError);
}

TEST(Jepa, TargetLayerNeverPixels) {
  const FreezeSchedule s{true, 10, 5, 1, 3, {}};
  EXPECT_EQ(jepa_target_layer(s, 0), 1u);
  EXPECT_EQ(jepa_target_layer(s, 10), 1u);
  EXPECT_EQ(jepa_target_layer(s, 15), 2u);
  VitModel m(tiny_model(), 1);
  const auto full = patchify(synth_video(SynthKind::moving_shapes, 1, m.config().input), m.config().patch);
  EXPECT_THROW(jepa_targets(m, full, 0), ContractError);
  const auto t = jepa_targets(m, full, 1, std::vector<std::size_t>{2, 5});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_FALSE(t.requires_grad());
}

TEST(Jepa, MaskAlwaysLeavesContext) {
  const GridShape g{2, 2, 2};
  const MultiblockParams p{8, {0.5, 0.9}, {0.75, 1.5}};
  Rng rng(3);
  for (int i = 0; i < 100; ++i) EXPECT_FALSE(jepa_mask(g, p, rng).context_indices().empty());
}

TEST(Jepa, TrainStepMovesTeacherAndFreezes) {
  const auto cfg = tiny_jepa();
  auto st = init_state(cfg);
  ASSERT_TRUE(st.jepa);
  for (const auto& p : named_parameters(st.jepa->teacher.params())) EXPECT_FALSE(p.tensor.requires_grad());
  EXPECT_EQ(teacher_student_distance(st.jepa->teacher, st.model), 0.0);
  std::vector<double> frozen_stem;
  for (std::size_t s = 0; s < 10; ++s) {
    const auto r = jepa_train_step(st, cfg, make_batch(cfg, s));
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GE(r.target.layer, 1u);
    if (s == 4) frozen_stem = st.model.params().patch_embed.weight.values();
  }
  EXPECT_EQ(st.model.params().frozen_prefix, 2u);
  EXPECT_EQ(st.target, TargetKind{2});
  EXPECT_TRUE(st.jepa->heads.count(2));
  EXPECT_EQ(st.model.params().patch_embed.weight.values(), frozen_stem);
  EXPECT_GT(teacher_student_distance(st.jepa->teacher, st.model), 0.0);
}

TEST(Jepa, StepIsDeterministic) {
  const auto cfg = tiny_jepa();
  auto a = init_state(cfg), b = init_state(cfg);
  for (std::size_t s = 0; s < 6; ++s)
    EXPECT_EQ(run_step(a, cfg, make_batch(cfg, s)).loss, run_step(b, cfg, make_batch(cfg, s)).loss);
}

TEST(Jepa, WrongModeRejected) {
  const auto cfg = tiny_train();
  auto st = init_state(cfg);
  EXPECT_THROW(jepa_train_step(st, cfg, make_batch(cfg, 0)), ContractError);
}
