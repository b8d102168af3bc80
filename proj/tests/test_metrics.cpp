#include <gtest/gtest.h>

#include <random>

#include "etap/metrics.hpp"
#include "etap/oracles.hpp"
#include "test_util.hpp"

using namespace etap;
using etap::testing::code_of;

namespace {

/// 3 points x 4 timesteps at 512 x 512, so the thresholds are 1, 2, 4, 8, 16 px.
/// Errors are along x. Point 2 is queried at t = 1.
struct Fixture {
  TrackSet gt = TrackSet::empty_like({0, 100, 200, 300}, 3);
  TrackSet pred = gt;
  Geometry g{512, 512};

  Fixture() {
    const double err[3][4] = {{0.5, 1.5, 3, 20}, {0, 0, 0, 0}, {100, 5, 9, 0.5}};
    const int gv[3][4] = {{1, 1, 1, 1}, {1, 1, 0, 0}, {1, 1, 1, 1}};
    const int pv[3][4] = {{1, 1, 1, 1}, {1, 0, 0, 1}, {1, 1, 1, 0}};
    const int valid[3][4] = {{1, 1, 1, 1}, {1, 1, 1, 1}, {0, 1, 1, 1}};
    pred = gt;
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t t = 0; t < 4; ++t) {
        const std::size_t k = gt.idx(p, t);
        gt.x[k] = 10.0 + 7.0 * p + t;
        gt.y[k] = 40.0 - 3.0 * t;
        gt.visible[k] = static_cast<std::uint8_t>(gv[p][t]);
        gt.valid[k] = static_cast<std::uint8_t>(valid[p][t]);
        pred.x[k] = gt.x[k] + err[p][t];
        pred.y[k] = gt.y[k];
        pred.visible[k] = static_cast<std::uint8_t>(pv[p][t]);
        pred.valid[k] = gt.valid[k];
      }
  }
};

TrackSet random_tracks(std::size_t n, std::size_t T, std::mt19937_64& rng) {
  std::vector<std::int64_t> ts;
  for (std::size_t t = 0; t < T; ++t) ts.push_back(static_cast<std::int64_t>(1000 * t + 17));
  TrackSet s = TrackSet::empty_like(ts, n);
  std::uniform_real_distribution<double> u(0.0, 60.0);
  for (std::size_t k = 0; k < s.x.size(); ++k) {
    s.x[k] = u(rng);
    s.y[k] = u(rng);
    s.visible[k] = rng() % 4 != 0;
    s.valid[k] = rng() % 5 != 0;
  }
  return s;
}

TrackSet jitter(const TrackSet& gt, double scale, std::mt19937_64& rng) {
  TrackSet p = gt;
  std::normal_distribution<double> nd(0.0, scale);
  for (std::size_t k = 0; k < p.x.size(); ++k) {
    p.x[k] += nd(rng);
    p.y[k] += nd(rng);
    p.visible[k] = rng() % 6 == 0 ? !gt.visible[k] : gt.visible[k];
  }
  return p;
}

}  // namespace

TEST(TapMetrics, HandFixture) {
  const Fixture f;
  const TapReport r = tap_report(f.pred, f.gt, f.g);
  EXPECT_EQ(r.thresholds, kDefaultThresholds);
  const std::vector<double> delta = {4.0 / 9, 5.0 / 9, 6.0 / 9, 7.0 / 9, 8.0 / 9};
  const std::vector<double> jac = {2.0 / 15, 3.0 / 14, 4.0 / 13, 5.0 / 12, 6.0 / 11};
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(r.delta_per_threshold[j], delta[j], 1e-15);
    EXPECT_NEAR(r.jaccard_per_threshold[j], jac[j], 1e-15);
  }
  EXPECT_NEAR(r.delta_avg, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.oa, 8.0 / 11.0, 1e-15);
  double aj = 0;
  for (double j : jac) aj += j / 5;
  EXPECT_NEAR(r.aj, aj, 1e-15);

  const auto o = oracle::enumerate_tap(f.pred, f.gt, f.g, kDefaultThresholds);
  EXPECT_NEAR(r.aj, o.aj, 1e-12);
  EXPECT_NEAR(r.delta_avg, o.delta_avg, 1e-12);
  EXPECT_NEAR(r.oa, o.oa, 1e-12);
}

TEST(FeatureAge, HandFixture) {
  const Fixture f;
  const FeatureAgeReport r = feature_age(f.pred, f.gt, 2.5);
  ASSERT_EQ(r.ages.size(), 3u);
  EXPECT_NEAR(r.ages[0], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.ages[1], 1.0);
  EXPECT_EQ(r.ages[2], 0.0);
  // the lost track is left out of fa but weighs into the expectation
  EXPECT_NEAR(r.fa, 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.expected_fa, 0.625, 1e-15);
  const auto o = oracle::enumerate_feature_age(f.pred, f.gt, 2.5);
  EXPECT_NEAR(r.fa, o.fa, 1e-12);
  EXPECT_NEAR(r.expected_fa, o.expected_fa, 1e-12);
}

TEST(TapMetrics, PerfectPredictionScoresOne) {
  const Fixture f;
  const TapReport r = tap_report(f.gt, f.gt, f.g);
  EXPECT_EQ(r.aj, 1.0);
  EXPECT_EQ(r.delta_avg, 1.0);
  EXPECT_EQ(r.oa, 1.0);
  const FeatureAgeReport a = feature_age(f.gt, f.gt);
  EXPECT_EQ(a.fa, 1.0);
  EXPECT_EQ(a.expected_fa, 1.0);
}

TEST(TapMetrics, RandomSetsMatchEnumeration) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const TrackSet gt = random_tracks(6, 9, rng);
    const TrackSet pred = jitter(gt, 0.3 + 0.2 * trial, rng);
    const Geometry g{64 + trial, 48};
    const std::vector<double> th = {1, 2, 4, 8, 16};
    const auto o = oracle::enumerate_tap(pred, gt, g, th);
    const TapReport r = tap_report(pred, gt, g, th);
    EXPECT_NEAR(r.aj, o.aj, 1e-12);
    EXPECT_NEAR(r.delta_avg, o.delta_avg, 1e-12);
    EXPECT_NEAR(r.oa, o.oa, 1e-12);
    const auto ao = oracle::enumerate_feature_age(pred, gt, 1.5);
    const auto ar = feature_age(pred, gt, 1.5);
    EXPECT_NEAR(ar.fa, ao.fa, 1e-12);
    EXPECT_NEAR(ar.expected_fa, ao.expected_fa, 1e-12);
  }
}

TEST(TapMetrics, ScalingCoordinatesAndResolutionTogetherIsInvariant) {
  std::mt19937_64 rng(8);
  const TrackSet gt = random_tracks(5, 7, rng);
  const TrackSet pred = jitter(gt, 0.25, rng);
  TrackSet gt2 = gt, pred2 = pred;
  for (auto* s : {&gt2, &pred2})
    for (std::size_t k = 0; k < s->x.size(); ++k) {
      s->x[k] *= 4;
      s->y[k] *= 4;
    }
  const TapReport a = tap_report(pred, gt, {64, 64});
  const TapReport b = tap_report(pred2, gt2, {256, 256});
  EXPECT_NEAR(a.aj, b.aj, 1e-12);
  EXPECT_NEAR(a.delta_avg, b.delta_avg, 1e-12);
  EXPECT_NEAR(scaled_thresholds({8}, {64, 100})[0], 1.0, 1e-15);
}

TEST(TapMetrics, NothingVisibleAnywhereScoresOneJaccard) {
  Fixture f;
  std::fill(f.gt.visible.begin(), f.gt.visible.end(), 0);
  std::fill(f.pred.visible.begin(), f.pred.visible.end(), 0);
  for (double j : jaccard_per_threshold(f.pred, f.gt, f.g)) EXPECT_EQ(j, 1.0);
  EXPECT_EQ(code_of([&] { delta_avg(f.pred, f.gt, f.g); }), ErrorCode::NoVisiblePoints);
}

TEST(Metrics, AlignmentIsChecked) {
  const Fixture f;
  TrackSet other = f.pred;
  other.point_ids[1] = 9;
  EXPECT_EQ(code_of([&] { tap_report(other, f.gt, f.g); }), ErrorCode::AlignmentError);
  other = f.pred;
  other.timestamps_us[2] += 1;
  EXPECT_EQ(code_of([&] { feature_age(other, f.gt); }), ErrorCode::AlignmentError);
  EXPECT_EQ(code_of([&] { feature_age(f.pred, f.gt, 0.0); }), ErrorCode::InvalidArgument);
}

TEST(Metrics, ReportsSerialise) {
  const Fixture f;
  const auto j = to_json(tap_report(f.pred, f.gt, f.g));
  EXPECT_EQ(j["per_threshold"].size(), 5u);
  const auto fa = feature_age(f.pred, f.gt, 2.5);
  EXPECT_EQ(to_json(fa)["efa_variant"], "v1");
  const std::string csv = feature_age_csv(fa, f.gt.point_ids);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.substr(csv.rfind("\n2,")), "\n2," + io::format_double(fa.durations[2]) + ",0\n");
  EXPECT_NEAR(fa.durations[2], 200e-6, 1e-18);
}
