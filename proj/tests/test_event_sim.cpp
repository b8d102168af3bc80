#include <gtest/gtest.h>

#include <random>

#include "etap/event_sim.hpp"
#include "etap/gt_tools.hpp"
#include "etap/oracles.hpp"
#include "test_util.hpp"

using namespace etap;
using etap::testing::code_of;
using etap::testing::random_frames;

namespace {

FrameSequence ramp(std::vector<double> values, std::vector<std::int64_t> ts) {
  FrameSequence seq;
  for (double v : values) seq.frames.emplace_back(1, 1, v);
  seq.timestamps_us = std::move(ts);
  return seq;
}

}  // namespace

TEST(Simulator, MatchesDenseIntegratorOnRandomSequences) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const FrameSequence seq = random_frames(8, 8, 10, seed);
    std::mt19937_64 rng(seed);
    const ContrastConfig cfg = sample_threshold(rng);
    const auto fast = oracle::event_multiset(simulate_events(seq, cfg).events());
    EXPECT_EQ(fast, oracle::dense_simulate(seq, cfg)) << "seed " << seed;
  }
}

TEST(Simulator, AsymmetricThresholds) {
  const FrameSequence seq = random_frames(6, 5, 8, 11);
  const ContrastConfig cfg{0.15, 0.31, 1e-3};
  EXPECT_EQ(oracle::event_multiset(simulate_events(seq, cfg).events()), oracle::dense_simulate(seq, cfg));
}

TEST(Simulator, ExactMultipleOfThresholdFires) {
  // log rises by exactly 2C over 10 us
  const double c = 0.25, eps = 1e-3;
  const double a = 0.2, b = std::exp(std::log(a + eps) + 2 * c) - eps;
  const auto ev = simulate_events(ramp({a, b}, {0, 10}), {c, c, eps});
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev.events()[0].t_us, 5);
  EXPECT_EQ(ev.events()[1].t_us, 10);
  EXPECT_EQ(ev.events()[0].polarity, 1);
}

TEST(Simulator, NegativeRampAndFlatFrames) {
  const auto down = simulate_events(ramp({0.8, 0.1}, {0, 1000}), {0.3, 0.3, 1e-3});
  ASSERT_FALSE(down.empty());
  for (const Event& e : down.events()) EXPECT_EQ(e.polarity, -1);
  EXPECT_TRUE(simulate_events(ramp({0.4, 0.4, 0.4}, {0, 5, 9}), {}).empty());
}

TEST(Simulator, OutputSortedAndReproducibleAcrossThreads) {
  const FrameSequence seq = random_frames(12, 9, 6, 3);
  SimOptions one, four;
  four.threads = 4;
  const auto a = simulate_events(seq, {}, one);
  const auto b = simulate_events(seq, {}, four);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.events()[i].t_us, b.events()[i].t_us);
    EXPECT_EQ(a.events()[i].x, b.events()[i].x);
    EXPECT_EQ(a.events()[i].y, b.events()[i].y);
    if (i > 0) {
      EXPECT_LE(a.events()[i - 1].t_us, a.events()[i].t_us);
    }
  }
}

TEST(Simulator, NotUpsampledGuard) {
  SimOptions opt;
  opt.max_log_step = 0.5;
  EXPECT_EQ(code_of([&] { simulate_events(ramp({0.05, 0.9}, {0, 10}), {}, opt); }), ErrorCode::NotUpsampled);
  EXPECT_FALSE(code_of([&] { simulate_events(ramp({0.5, 0.6}, {0, 10}), {}, opt); }));
}

TEST(Simulator, RejectsBadInput) {
  EXPECT_EQ(code_of([] { simulate_events(ramp({0.5}, {0}), {}); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { simulate_events(ramp({0.5, 0.5}, {4, 4}), {}); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { simulate_events(ramp({0.5, 0.5}, {0, 4}), {0.0, 0.2, 1e-3}); }),
            ErrorCode::InvalidArgument);
}

TEST(Upsampling, FactorFromDisplacement) {
  EXPECT_EQ(required_upsample_factor(0.0), 1);
  EXPECT_EQ(required_upsample_factor(1.0), 1);
  EXPECT_EQ(required_upsample_factor(1.01), 2);
  EXPECT_EQ(required_upsample_factor(4.0), 4);
  EXPECT_EQ(required_upsample_factor(7.3), 8);
}

TEST(Upsampling, ToySceneMovesAtMostOnePixelPerFrame) {
  ToySceneConfig sc;
  sc.width = sc.height = 16;
  sc.base_fps = 100;
  sc.background_vx = 400;  // 4 px per base frame
  sc.duration_us = 30000;
  const ToyScene scene(sc);
  EXPECT_EQ(scene.upsample_factor(), 4);
  const FrameSequence f = scene.frames();
  for (std::size_t k = 1; k < f.timestamps_us.size(); ++k) {
    const double dt = static_cast<double>(f.timestamps_us[k] - f.timestamps_us[k - 1]) * 1e-6;
    EXPECT_LE(sc.background_vx * dt, 1.0 + 1e-9);
  }
}

TEST(Upsampling, LinearInterpolationKeepsEndpoints) {
  const FrameSequence seq = ramp({0.2, 0.6, 1.0}, {0, 40, 80});
  const FrameSequence up = upsample_linear(seq, 4);
  ASSERT_EQ(up.frames.size(), 9u);
  EXPECT_EQ(up.timestamps_us[2], 20);
  EXPECT_DOUBLE_EQ(up.frames[2].data[0], 0.4);
  EXPECT_DOUBLE_EQ(up.frames[4].data[0], 0.6);
  EXPECT_DOUBLE_EQ(up.frames[8].data[0], 1.0);
  EXPECT_EQ(code_of([&] { upsample_linear(ramp({0.1, 0.2}, {0, 3}), 4); }), ErrorCode::InvalidArgument);
}

TEST(Threshold, SampledInRangeAndShared) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const ContrastConfig c = sample_threshold(rng);
    EXPECT_GE(c.c_pos, kContrastLo);
    EXPECT_LE(c.c_pos, kContrastHi);
    EXPECT_EQ(c.c_pos, c.c_neg);
  }
  EXPECT_EQ(sample_threshold(rng, 0.2, 0.2).c_pos, 0.2);
  EXPECT_EQ(code_of([&] { sample_threshold(rng, 0.3, 0.2); }), ErrorCode::InvalidRange);
  EXPECT_EQ(code_of([&] { sample_threshold(rng, 0.0, 0.2); }), ErrorCode::InvalidRange);
}

TEST(FrameIo, DirectoryRoundtrip) {
  const auto dir = std::filesystem::temp_directory_path() / "etap_frames_test";
  std::filesystem::remove_all(dir);
  FrameSequence seq = random_frames(5, 4, 3, 2);
  for (auto& f : seq.frames)
    for (double& v : f.data) v = quantize8(v) / 255.0;
  write_frame_directory(dir, seq);
  const FrameSequence back = read_frame_directory(dir);
  EXPECT_EQ(back.timestamps_us, seq.timestamps_us);
  for (std::size_t k = 0; k < seq.frames.size(); ++k)
    for (std::size_t i = 0; i < seq.frames[k].data.size(); ++i)
      EXPECT_NEAR(back.frames[k].data[i], seq.frames[k].data[i], 1e-12);
  std::filesystem::remove_all(dir);
}
