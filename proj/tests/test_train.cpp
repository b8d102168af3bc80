#include <gtest/gtest.h>

#include "etap/train.hpp"
#include "test_util.hpp"

using namespace etap;
using etap::testing::code_of;

namespace {

ToyDatasetConfig tiny_data() {
  ToyDatasetConfig dc;
  dc.width = dc.height = 32;
  dc.scenes = 3;
  dc.points = 4;
  dc.steps = 3;
  dc.n_events = 500;
  dc.bins = 3;
  return dc;
}

ModelConfig tiny_config() {
  ModelConfig cfg = toy_model_config();
  cfg.bins = 3;
  cfg.window = 3;
  cfg.window_stride = 2;
  cfg.feature_dim = 8;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.levels = 2;
  cfg.corr_radius = 1;
  cfg.encoder = {{3, 2, 8, true, false}, {3, 2, 8, false, false}};
  return cfg;
}

}  // namespace

TEST(ToyData, SampleShapesAndExactTracks) {
  const ToyDatasetConfig dc = tiny_data();
  const ToySample s = make_toy_sample(dc, 11);
  ASSERT_EQ(s.stacks.size(), 3u);
  ASSERT_EQ(s.inverted.size(), 3u);
  EXPECT_EQ(s.stacks[0].bins, 3);
  EXPECT_EQ(s.stacks[0].n_events, 500u);
  ASSERT_EQ(s.queries.size(), 4u);
  const double vx = s.scene.background_vx, vy = s.scene.background_vy;
  const double speed = std::hypot(vx, vy);
  EXPECT_GE(speed, dc.speed_min);
  EXPECT_LE(speed, dc.speed_max);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t t = 0; t < 3; ++t) {
      const std::size_t k = s.gt.idx(p, t);
      const double dt = static_cast<double>(s.schedule[t] - s.schedule[0]) * 1e-6;
      EXPECT_NEAR(s.gt.x[k], s.queries[p].x + vx * dt, 1e-9);
      EXPECT_NEAR(s.gt.y[k], s.queries[p].y + vy * dt, 1e-9);
      EXPECT_GE(s.gt.x[k], dc.margin - 1e-9);
      EXPECT_LE(s.gt.x[k], dc.width - 1 - dc.margin + 1e-9);
      EXPECT_EQ(s.gt.visible[k], 1);
    }
  EXPECT_EQ(make_toy_sample(dc, 11).stacks[2].data, s.stacks[2].data);
}

TEST(Optimizer, FirstAdamStepMovesByLearningRate) {
  auto w = ad::parameter({2, 2}, {1.0, -1.0, 0.5, 2.0});
  auto b = ad::parameter({2}, {0.0, 0.0});
  w.mutable_grad() = {0.1, -0.2, 0.0, 0.3};
  b.mutable_grad() = {0.2, -0.1};
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  cfg.clip_norm = 0;
  AdamW opt(cfg);
  opt.step({{"w", w}, {"b", b}});
  // bias-corrected first step is lr * sign(g); matrices also decay
  EXPECT_NEAR(w.value()[0], 1.0 - 0.01 * 0.1 * 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w.value()[1], -1.0 + 0.01 * 0.1 * 1.0 + 0.01, 1e-9);
  EXPECT_NEAR(w.value()[2], 0.5 - 0.01 * 0.1 * 0.5, 1e-9);
  EXPECT_NEAR(b.value()[0], -0.01, 1e-9);
  EXPECT_NEAR(b.value()[1], 0.01, 1e-9);
}

TEST(Optimizer, ClipsGlobalNormAndRejectsNonFinite) {
  auto p = ad::parameter({2}, {0.0, 0.0});
  p.mutable_grad() = {30.0, 40.0};
  AdamW opt;
  EXPECT_DOUBLE_EQ(opt.step({{"p", p}}), 50.0);
  p.mutable_grad() = {std::nan(""), 0.0};
  EXPECT_EQ(code_of([&] { opt.step({{"p", p}}); }), ErrorCode::NonFiniteLoss);
}

TEST(Schedule, WarmupAndCosineFloor) {
  TrainConfig tc;
  tc.warmup_steps = 10;
  EXPECT_NEAR(lr_scale(tc, 0, 100), 0.1, 1e-12);
  EXPECT_NEAR(lr_scale(tc, 50, 100), 0.5, 1e-12);
  EXPECT_EQ(lr_scale(tc, 99, 100), 0.05);
  tc.cosine_decay = false;
  EXPECT_EQ(lr_scale(tc, 80, 100), 1.0);
}

TEST(Training, ResumedRunEqualsUninterruptedRun) {
  const auto data = make_toy_dataset(tiny_data());
  const ModelConfig cfg = tiny_config();
  TrainConfig tc;
  tc.steps = 4;
  tc.fa_start = 2;
  tc.iters = 2;
  TrainState a{init_model(cfg, 3), AdamW(tc.adam), {}, 0};
  train_steps(a, data, tc, 4);
  TrainState b{init_model(cfg, 3), AdamW(tc.adam), {}, 0};
  train_steps(b, data, tc, 2);
  train_steps(b, data, tc, 4);
  ASSERT_EQ(a.curve.steps.size(), 4u);
  EXPECT_EQ(a.curve.to_csv(), b.curve.to_csv());
  EXPECT_EQ(encode_params(a.model, 3), encode_params(b.model, 3));
  // the alignment term only appears once the FA phase starts
  EXPECT_EQ(a.curve.steps[1].l_fa, 0.0);
  EXPECT_GT(a.curve.steps[2].l_fa, 0.0);
  EXPECT_NE(encode_params(a.model, 3), encode_params(init_model(cfg, 3), 3));
}

TEST(Training, ZeroStepsLeaveParametersUntouched) {
  const auto data = make_toy_dataset(tiny_data());
  TrainState s{init_model(tiny_config(), 5), AdamW(), {}, 0};
  const std::string before = encode_params(s.model, 5);
  train_steps(s, data, TrainConfig{}, 0);
  EXPECT_EQ(encode_params(s.model, 5), before);
  EXPECT_TRUE(s.curve.steps.empty());
  EXPECT_EQ(code_of([&] { train_steps(s, {}, TrainConfig{}, 1); }), ErrorCode::InvalidArgument);
}

TEST(Training, CloneIsDeep) {
  const TrackerModel m = init_model(tiny_config(), 2);
  const TrackerModel c = clone_model(m);
  ad::Var v = c.refiner.in_b;
  v.mutable_value()[0] += 1.0;
  EXPECT_NE(m.refiner.in_b.value()[0], c.refiner.in_b.value()[0]);
}

TEST(Evaluation, PredictionsAlignWithGroundTruth) {
  const auto data = make_toy_dataset(tiny_data());
  const TrackerModel m = init_model(tiny_config(), 2);
  const auto [pred, gt] = predict_dataset(m, data, 2);
  EXPECT_EQ(pred.num_points(), 12u);
  EXPECT_EQ(pred.point_ids, gt.point_ids);
  // zero-initialised heads keep every point at its query
  for (std::size_t p = 0; p < 12; ++p) EXPECT_EQ(pred.x[pred.idx(p, 2)], gt.x[gt.idx(p, 0)]);
  EXPECT_GT(mean_track_loss(m, data, 2), 0.0);
}

TEST(Probe, SameTexturePointsInBothRuns) {
  ToyDatasetConfig dc = tiny_data();
  dc.width = dc.height = 48;
  dc.n_events = 800;
  const ProbeData probe = make_probe(dc, 4);
  ASSERT_EQ(probe.runs.size(), 2u);
  const auto& h = probe.runs[0];
  const auto& v = probe.runs[1];
  // the same texture point: the runs differ by one shift along x and y
  const double shift = 75.0 * static_cast<double>(h.schedule[0]) * 1e-6;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(h.queries[i].x - v.queries[i].x, shift, 1e-9);
    EXPECT_NEAR(v.queries[i].y - h.queries[i].y, shift, 1e-9);
    EXPECT_GT(h.gt.x[h.gt.idx(i, 2)], h.gt.x[h.gt.idx(i, 0)]);
    EXPECT_GT(v.gt.y[v.gt.idx(i, 2)], v.gt.y[v.gt.idx(i, 0)]);
  }
  ModelConfig cfg = tiny_config();
  const ProbeResult r = run_probe(init_model(cfg, 1), probe);
  EXPECT_LE(r.c_intra, 1.0);
  EXPECT_GE(r.c_inter, -1.0);
}
