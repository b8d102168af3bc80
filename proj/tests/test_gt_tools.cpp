#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "etap/event_sim.hpp"
#include "etap/gt_tools.hpp"
#include "test_util.hpp"

using namespace etap;
using etap::testing::code_of;

namespace {

std::vector<std::int64_t> schedule(int n, std::int64_t step = 10000) {
  std::vector<std::int64_t> s;
  for (int k = 0; k < n; ++k) s.push_back(k * step);
  return s;
}

}  // namespace

TEST(Texture, DeterministicAndBounded) {
  const Texture a = make_texture(3), b = make_texture(3), c = make_texture(4);
  double lo = 1, hi = 0;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      EXPECT_EQ(a.eval(x, y), b.eval(x, y));
      lo = std::min(lo, a.eval(x, y));
      hi = std::max(hi, a.eval(x, y));
    }
  EXPECT_GE(lo, 0.02);
  EXPECT_LE(hi, 0.98);
  EXPECT_GT(hi - lo, 0.2);
  EXPECT_NE(a.eval(1.5, 2.5), c.eval(1.5, 2.5));
  EXPECT_EQ(code_of([] { make_texture(1, 0.5, 0.3, 0.2, 0.1); }), ErrorCode::ConfigInvalid);
}

TEST(ToyScene, StaticSceneHasConstantTracksAndNoEvents) {
  ToySceneConfig cfg;
  cfg.width = cfg.height = 24;
  cfg.duration_us = 40000;
  cfg.sprites.push_back({SpriteShape::Disk, 5, 5, 12, 12});
  const ToyScene scene(cfg);
  EXPECT_EQ(scene.upsample_factor(), 1);
  EXPECT_TRUE(simulate_events(scene.frames(), {}).empty());
  std::mt19937_64 rng(1);
  const QuerySample qs = sample_query_tracks(scene, schedule(4), 6, 0.5, rng);
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_NEAR(qs.gt.x[qs.gt.idx(p, t)], qs.queries[p].x, 1e-12);
      EXPECT_NEAR(qs.gt.y[qs.gt.idx(p, t)], qs.queries[p].y, 1e-12);
      EXPECT_EQ(qs.gt.visible[qs.gt.idx(p, t)], 1);
    }
}

TEST(ToyScene, TranslationIsExactAndLeavingTheFrameHides) {
  ToySceneConfig cfg;
  cfg.width = cfg.height = 32;
  cfg.background_vx = 300;
  cfg.background_vy = -120;
  const ToyScene scene(cfg);
  TrackSet set = TrackSet::empty_like(schedule(8), 1);
  scene.fill_track(set, 0, {-1, 20.0, 10.0}, 0);
  for (std::size_t t = 0; t < 8; ++t) {
    const double ts = static_cast<double>(set.timestamps_us[t]) * 1e-6;
    EXPECT_DOUBLE_EQ(set.x[t], 20.0 + 300 * ts);
    EXPECT_DOUBLE_EQ(set.y[t], 10.0 - 120 * ts);
    EXPECT_EQ(set.visible[t], set.x[t] <= 31.0 && set.y[t] >= 0.0);
  }
  EXPECT_EQ(set.visible[0], 1);
  EXPECT_EQ(set.visible[7], 0);
  // |v| = 323 px/s, so 3.2 px per frame at 100 fps
  EXPECT_EQ(scene.upsample_factor(), 4);
}

TEST(ToyScene, SpriteOccludesBackground) {
  ToySceneConfig cfg;
  cfg.width = cfg.height = 48;
  SpriteSpec s;
  s.half_w = s.half_h = 4;
  s.cx = 8;
  s.cy = 24;
  s.vx = 400;
  cfg.sprites.push_back(s);
  const ToyScene scene(cfg);
  TrackSet set = TrackSet::empty_like(schedule(9, 5000), 2);
  scene.fill_track(set, 0, {-1, 24.0, 24.0}, 0);  // the sprite passes over this point around t = 40 ms
  scene.fill_track(set, 1, {0, 1.0, -2.0}, 0);
  for (std::size_t t = 0; t < 9; ++t) {
    const double cx = 8 + 400 * static_cast<double>(set.timestamps_us[t]) * 1e-6;
    EXPECT_EQ(set.visible[set.idx(0, t)], std::abs(24.0 - cx) > 4.0) << t;
    EXPECT_DOUBLE_EQ(set.x[set.idx(1, t)], cx + 1.0);
    EXPECT_EQ(set.visible[set.idx(1, t)], 1);
  }
  EXPECT_EQ(scene.top_layer(24, 24, 0.04), 0);
  EXPECT_EQ(scene.top_layer(24, 24, 0.0), -1);
}

TEST(ToyScene, RotatingSpriteTracksCircles) {
  ToySceneConfig cfg;
  SpriteSpec s;
  s.shape = SpriteShape::Disk;
  s.half_w = 12;
  s.cx = s.cy = 32;
  s.omega = 20;
  cfg.sprites.push_back(s);
  const ToyScene scene(cfg);
  TrackSet set = TrackSet::empty_like(schedule(10), 1);
  scene.fill_track(set, 0, {0, 6.0, 8.0}, 2);
  for (std::size_t t = 0; t < 10; ++t) {
    EXPECT_NEAR(std::hypot(set.x[t] - 32, set.y[t] - 32), 10.0, 1e-12);
    EXPECT_EQ(set.valid[t], t >= 2);
  }
  const double a = std::atan2(set.y[1] - 32, set.x[1] - 32) - std::atan2(set.y[0] - 32, set.x[0] - 32);
  EXPECT_NEAR(a, 0.2, 1e-12);
}

TEST(Queries, ForegroundFractionAndErrors) {
  ToySceneConfig cfg;
  cfg.sprites.push_back({SpriteShape::Rectangle, 6, 4, 30, 30, 50, 0});
  const ToyScene scene(cfg);
  std::mt19937_64 rng(2), rng2(2);
  const QuerySample qs = sample_query_tracks(scene, schedule(5), 10, 0.3, rng);
  ASSERT_EQ(qs.points.size(), 10u);
  int fg = 0;
  for (const auto& p : qs.points) fg += p.layer >= 0;
  EXPECT_GE(fg, 3);
  for (std::size_t i = 0; i < 10; ++i) {
    const std::size_t k = qs.gt.idx(i, static_cast<std::size_t>(qs.queries[i].t_index));
    EXPECT_EQ(qs.gt.visible[k], 1);
    EXPECT_EQ(qs.gt.x[k], qs.queries[i].x);
  }
  EXPECT_EQ(sample_query_tracks(scene, schedule(5), 10, 0.3, rng2).gt, qs.gt);

  ToySceneConfig bare;
  const ToyScene empty(bare);
  EXPECT_EQ(code_of([&] { sample_query_tracks(empty, schedule(3), 4, 0.5, rng); }), ErrorCode::InsufficientForeground);
  EXPECT_EQ(sample_query_tracks(empty, schedule(3), 4, 0.0, rng).points.size(), 4u);
  EXPECT_EQ(code_of([&] { sample_query_tracks(empty, schedule(3), 4, 1.5, rng); }), ErrorCode::InvalidArgument);
}

TEST(Minima, WindowAndProminence) {
  const std::vector<double> s = {5, 4, 3, 4, 5, 5, 4.9, 5, 5, 1, 2, 3, 4, 5};
  EXPECT_EQ(find_local_minima(s, 2, 0.1), (std::vector<std::size_t>{2, 9}));
  // the dip at 6 is too shallow
  EXPECT_EQ(find_local_minima(s, 1, 0.1), (std::vector<std::size_t>{2, 9}));
  EXPECT_EQ(find_local_minima(s, 1, 0.0), (std::vector<std::size_t>{2, 6, 9}));
  EXPECT_TRUE(find_local_minima(std::vector<double>(6, 1.0), 1, 0.1).empty());
}

TEST(Minima, VeeRefinementIsExactOnAbsoluteValue) {
  for (double x0 : {-0.4, -0.1, 0.0, 0.25, 0.49}) {
    auto f = [&](double x) { return 3.0 * std::abs(x - x0) + 1.0; };
    EXPECT_NEAR(refine_minimum(f(-1), f(0), f(1), MinimumRefine::Vee), x0, 1e-12);
  }
  auto q = [](double x) { return (x - 0.3) * (x - 0.3); };
  EXPECT_NEAR(refine_minimum(q(-1), q(0), q(1), MinimumRefine::Parabolic), 0.3, 1e-12);
  EXPECT_EQ(refine_minimum(1, 0, 2, MinimumRefine::None), 0.0);
}

TEST(Spinner, ConstantRateIsRecovered) {
  SpinnerSceneConfig sc;
  sc.width = sc.height = 64;
  sc.cx = sc.cy = 31.5;
  sc.r_outer = 28;
  sc.segments = {{1e9, 2.0 * std::numbers::pi * 6.0}};  // 6 turns per second
  sc.duration_us = 250000;
  const EventStream stream = simulate_events(sc.frames(), {0.2, 0.2, 1e-3});
  SpinnerGtConfig gc;
  gc.hist_events = 6000;
  gc.cx = gc.cy = 31.5;
  gc.radii = {15.0};
  gc.angles = {0.0};
  const SpinnerGt gt = spinner_groundtruth(stream, gc);
  ASSERT_GE(gt.omega.size(), 3u);
  for (double w : gt.omega) EXPECT_NEAR(w / sc.segments[0].omega, 1.0, 0.01);
  for (std::size_t t = 0; t < gt.tracks.num_steps(); ++t)
    EXPECT_NEAR(std::hypot(gt.tracks.x[t] - 31.5, gt.tracks.y[t] - 31.5), 15.0, 1e-9);
}

TEST(Spinner, StaticPatternHasNoMinima) {
  SpinnerSceneConfig sc;
  sc.width = sc.height = 32;
  sc.cx = sc.cy = 15.5;
  sc.r_outer = 14;
  sc.segments = {{1e9, 30.0}};
  sc.duration_us = 30000;
  const EventStream moving = simulate_events(sc.frames(), {0.2, 0.2, 1e-3});
  ASSERT_GT(moving.size(), 200u);
  // a stream whose events never change: the same burst repeated keeps every histogram identical
  std::vector<Event> frozen;
  for (std::int64_t k = 0; k < 50; ++k) frozen.push_back({3.0F, 4.0F, k * 100, 1});
  const EventStream still(Geometry{32, 32}, std::move(frozen));
  SpinnerGtConfig gc;
  gc.hist_events = 10;
  gc.hist_rate_hz = 100000;
  EXPECT_EQ(code_of([&] { spinner_groundtruth(still, gc); }), ErrorCode::NoMinimaFound);
  gc.hist_events = 100000;
  EXPECT_EQ(code_of([&] { spinner_groundtruth(moving, gc); }), ErrorCode::InsufficientEvents);
}
