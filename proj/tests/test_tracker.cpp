#include <gtest/gtest.h>

#include <random>

#include "etap/tracker.hpp"
#include "test_util.hpp"

using namespace etap;
using etap::testing::code_of;
using etap::testing::random_pyramid;
using etap::testing::random_stream;

namespace {

std::vector<FeaturePyramid> pyramids_for(const ModelConfig& cfg, int steps, std::uint64_t seed, int side = 64) {
  std::mt19937_64 rng(seed);
  std::vector<FeaturePyramid> out;
  for (int t = 0; t < steps; ++t) {
    out.push_back(random_pyramid(side / cfg.base_stride, side / cfg.base_stride, cfg.feature_dim, cfg.levels,
                                 cfg.base_stride, rng));
  }
  return out;
}

/// Gives the zero-initialised heads random weights so refinement moves points.
void randomize_heads(TrackerModel& m, std::uint64_t seed, double scale = 0.05) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (ad::Var v : {m.refiner.dx_w, m.refiner.dx_b, m.refiner.dq_w, m.refiner.vis_w}) {
    for (double& x : v.mutable_value()) x = nd(rng);
  }
}

std::vector<QueryPoint> some_queries() {
  return {{0, 10.5, 20.25}, {0, 40.0, 12.0}, {3, 31.7, 50.2}, {0, 55.1, 44.9}};
}

std::vector<std::int64_t> schedule_of(int steps) {
  std::vector<std::int64_t> s;
  for (int t = 0; t < steps; ++t) s.push_back(1000 + 250 * t);
  return s;
}

}  // namespace

TEST(Initialize, BroadcastsQueryToAllSlots) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 1);
  const std::vector<QueryPoint> q = {{3, 21.3, 9.8}};
  const TrackWindowState st = initialize_window(q, pyrs, 0, cfg);
  const Descriptor d = sample_bilinear(pyrs[3].levels[0], 21.3 / 4, 9.8 / 4);
  ASSERT_EQ(st.rows(), 8u);
  for (std::size_t s = 0; s < 8; ++s) {
    EXPECT_EQ(st.x(0, s), 21.3);
    EXPECT_EQ(st.y(0, s), 9.8);
    EXPECT_TRUE(std::equal(d.begin(), d.end(), st.descriptors.begin() + static_cast<std::ptrdiff_t>(s * st.dim)));
    EXPECT_EQ(st.visibility_logits[s], 2.0);
    EXPECT_EQ(st.active[s], s >= 3 ? 1 : 0);
  }
}

TEST(Initialize, IntegerQueryReadsFeatureCell) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 2);
  const std::vector<QueryPoint> q = {{0, 8.0, 12.0}};
  const TrackWindowState st = initialize_window(q, pyrs, 0, cfg);
  const auto& map = pyrs[0].levels[0];
  const std::size_t W = map.dim(1), C = map.dim(2);
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(st.descriptors[c], map.value()[(3 * W + 2) * C + c]);
}

TEST(Initialize, ZeroQueriesAndOutOfSchedule) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 3);
  const TrackerModel model = init_model(cfg, 1);
  const TrackWindowState empty = initialize_window({}, pyrs, 0, cfg);
  EXPECT_EQ(empty.rows(), 0u);
  EXPECT_EQ(track_window(empty, pyrs, model.refiner, cfg, 3), empty);
  const std::vector<QueryPoint> late = {{9, 1.0, 1.0}};
  EXPECT_EQ(code_of([&] { initialize_window(late, pyrs, 0, cfg); }), ErrorCode::QueryOutOfSchedule);
  EXPECT_EQ(code_of([&] { track_pyramids(pyrs, late, schedule_of(8), model, 1); }), ErrorCode::QueryOutOfSchedule);
}

TEST(Tokens, LayoutAndWidth) {
  ModelConfig cfg = reference_model_config();
  EXPECT_EQ(cfg.token_dim(), cfg.eta_dim() + 128 + 196 + 1 + cfg.anchor_dim() + cfg.slot_dim());
  cfg.encoder = toy_encoder(cfg.feature_dim);
  const auto pyrs = pyramids_for(cfg, 8, 4);
  const std::vector<QueryPoint> q = {{0, 30.0, 20.0}, {2, 12.5, 50.0}};
  const TrackWindowState st = initialize_window(q, pyrs, 0, cfg);
  const auto tok = build_tokens(st, pyrs, cfg);
  const auto td = static_cast<std::size_t>(cfg.token_dim());
  ASSERT_EQ(tok.size(), st.rows() * td);
  // broadcast init: the offset encoding is eta(0) in every slot
  for (std::size_t r = 0; r < st.rows(); ++r)
    for (int j = 0; j < cfg.eta_dim(); ++j) EXPECT_EQ(tok[r * td + j], j % 2 == 0 ? 0.0 : 1.0);
  // the correlation block equals correlation_features at the slot position
  const std::size_t c0 = static_cast<std::size_t>(cfg.eta_dim() + cfg.feature_dim);
  const Descriptor d(st.descriptors.begin() + static_cast<std::ptrdiff_t>(st.row(1, 5) * st.dim),
                     st.descriptors.begin() + static_cast<std::ptrdiff_t>(st.row(1, 6) * st.dim));
  const auto corr = correlation_features(d, pyrs[5], 12.5, 50.0, cfg.corr_radius);
  for (std::size_t j = 0; j < corr.size(); ++j) EXPECT_NEAR(tok[st.row(1, 5) * td + c0 + j], corr[j], 1e-12);
  // visibility entry is sigmoid of the logit
  EXPECT_NEAR(tok[st.row(1, 5) * td + c0 + 196], 1.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Refine, ZeroHeadsAreAFixedPoint) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 5);
  const TrackerModel model = init_model(cfg, 2);
  const TrackWindowState st = initialize_window(some_queries(), pyrs, 0, cfg);
  const auto [dx, dq] = refine_once(st, pyrs, model.refiner, cfg);
  for (double v : dx) EXPECT_EQ(v, 0.0);
  for (double v : dq) EXPECT_EQ(v, 0.0);
  const TrackWindowState out = track_window(st, pyrs, model.refiner, cfg, 1);
  EXPECT_EQ(out.positions, st.positions);
  for (double l : out.visibility_logits) EXPECT_EQ(l, 2.0);
}

TEST(Refine, VisibilityHeadReadsDescriptors) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 6);
  TrackerModel model = init_model(cfg, 2);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (double& v : model.refiner.vis_w.mutable_value()) v = nd(rng);
  const TrackWindowState st = initialize_window(some_queries(), pyrs, 0, cfg);
  const TrackWindowState out = track_window(st, pyrs, model.refiner, cfg, 1);
  for (std::size_t r = 0; r < st.rows(); ++r) {
    double logit = model.refiner.vis_b.value()[0];
    for (std::size_t c = 0; c < st.dim; ++c) logit += st.descriptors[r * st.dim + c] * model.refiner.vis_w.value()[c];
    EXPECT_NEAR(out.visibility_logits[r], logit, 1e-12);
    const double p = ad::sigmoid_value(out.visibility_logits[r]);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(Refine, PointPermutationEquivariance) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 7);
  TrackerModel model = init_model(cfg, 3);
  randomize_heads(model, 11);
  const auto q = some_queries();
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<QueryPoint> qp;
  for (std::size_t i : perm) qp.push_back(q[i]);
  const auto a = track_window(initialize_window(q, pyrs, 0, cfg), pyrs, model.refiner, cfg, 3);
  const auto b = track_window(initialize_window(qp, pyrs, 0, cfg), pyrs, model.refiner, cfg, 3);
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (std::size_t s = 0; s < 8; ++s) {
      EXPECT_NEAR(b.x(k, s), a.x(perm[k], s), 1e-10);
      EXPECT_NEAR(b.y(k, s), a.y(perm[k], s), 1e-10);
      EXPECT_NEAR(b.visibility_logits[b.row(k, s)], a.visibility_logits[a.row(perm[k], s)], 1e-10);
    }
  // and the heads really move the points
  EXPECT_NE(a.positions, initialize_window(q, pyrs, 0, cfg).positions);
}

TEST(Refine, InactiveSlotsDoNotMoveAndRunsAreBitIdentical) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 8);
  TrackerModel model = init_model(cfg, 4);
  randomize_heads(model, 12);
  const TrackWindowState st = initialize_window(some_queries(), pyrs, 0, cfg);
  const auto a = track_window(st, pyrs, model.refiner, cfg, 4);
  const auto b = track_window(st, pyrs, model.refiner, cfg, 4);
  EXPECT_EQ(a, b);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(a.x(2, s), 31.7);
    EXPECT_EQ(a.y(2, s), 50.2);
  }
}

TEST(Refine, NonFiniteUpdateIsReported) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 9);
  TrackerModel model = init_model(cfg, 5);
  model.refiner.dx_b.mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  const TrackWindowState st = initialize_window(some_queries(), pyrs, 0, cfg);
  EXPECT_EQ(code_of([&] { track_window(st, pyrs, model.refiner, cfg, 1); }), ErrorCode::NonFiniteUpdate);
}

TEST(Sequence, WindowOffsets) {
  EXPECT_EQ(window_offsets(8, 8, 4), (std::vector<int>{0}));
  EXPECT_EQ(window_offsets(12, 8, 4), (std::vector<int>{0, 4}));
  EXPECT_EQ(window_offsets(16, 8, 4), (std::vector<int>{0, 4, 8}));
  EXPECT_EQ(window_offsets(14, 8, 4), (std::vector<int>{0, 4, 6}));
  EXPECT_EQ(window_offsets(5, 8, 4), (std::vector<int>{0}));
}

TEST(Sequence, SingleWindowEqualsTrackWindow) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 8, 10);
  TrackerModel model = init_model(cfg, 6);
  randomize_heads(model, 13);
  const auto q = some_queries();
  const TrackSet set = track_pyramids(pyrs, q, schedule_of(8), model, 3);
  const auto st = track_window(initialize_window(q, pyrs, 0, cfg), pyrs, model.refiner, cfg, 3);
  TrackSet expect = TrackSet::empty_like(schedule_of(8), q.size());
  write_window(expect, st, 0);
  EXPECT_EQ(set, expect);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(set.valid[set.idx(2, t)], 0);
}

TEST(Sequence, TwelveStepsNewestWindowWins) {
  const ModelConfig cfg = toy_model_config();
  const auto pyrs = pyramids_for(cfg, 12, 11);
  TrackerModel model = init_model(cfg, 7);
  randomize_heads(model, 14);
  const auto q = some_queries();
  const TrackSet set = track_pyramids(pyrs, q, schedule_of(12), model, 2);
  const std::span<const FeaturePyramid> all(pyrs);
  const auto w1 = track_window(initialize_window(q, all.subspan(0, 8), 0, cfg), all.subspan(0, 8), model.refiner, cfg, 2);
  const auto w2 = track_window(initialize_next_window(w1, 0, 4, q, all.subspan(4, 8), cfg), all.subspan(4, 8),
                               model.refiner, cfg, 2);
  for (std::size_t p = 0; p < q.size(); ++p) {
    for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(set.x[set.idx(p, t)], w1.x(p, t));
    for (std::size_t t = 4; t < 12; ++t) EXPECT_EQ(set.x[set.idx(p, t)], w2.x(p, t - 4));
  }
}

TEST(Sequence, HandOffMatchesManualCalls) {
  ModelConfig cfg = toy_model_config();
  cfg.window_stride = 8;
  const auto pyrs = pyramids_for(cfg, 16, 12);
  TrackerModel model = init_model(cfg, 8);
  randomize_heads(model, 15);
  const std::vector<QueryPoint> q = {{0, 20.0, 20.0}, {5, 33.3, 41.0}, {10, 47.0, 9.5}};
  const TrackSet whole = track_pyramids(pyrs, q, schedule_of(16), model, 2);
  const std::span<const FeaturePyramid> all(pyrs);
  TrackSet manual = TrackSet::empty_like(schedule_of(16), q.size());
  const auto a = track_window(initialize_window(q, all.subspan(0, 8), 0, cfg, true), all.subspan(0, 8),
                              model.refiner, cfg, 2);
  write_window(manual, a, 0);
  const auto b = track_window(initialize_next_window(a, 0, 8, q, all.subspan(8, 8), cfg), all.subspan(8, 8),
                              model.refiner, cfg, 2);
  write_window(manual, b, 8);
  EXPECT_EQ(whole, manual);
  // the late query is inactive until its own timestep
  for (std::size_t t = 0; t < 10; ++t) EXPECT_EQ(whole.valid[whole.idx(2, t)], 0);
  EXPECT_EQ(whole.valid[whole.idx(2, 10)], 1);
}

TEST(Sequence, StaticSceneIdentityEncoderStaysAtQueries) {
  // identity-stub features: the pyramid is the stack itself
  ModelConfig cfg = toy_model_config();
  cfg.bins = 4;
  cfg.feature_dim = 4;
  cfg.base_stride = 1;
  cfg.encoder = {{1, 1, 4, false, false}};
  const TrackerModel model = init_model(cfg, 9);
  const auto stream = random_stream({32, 32}, 4000, 3, false);
  std::vector<std::int64_t> sched;
  for (int t = 0; t < 12; ++t) sched.push_back(stream.events()[1500 + 200 * t].t_us);
  TrackOptions opt;
  opt.n_events = 1024;
  const auto stacks = build_schedule_stacks(stream, sched, cfg, opt);
  std::vector<FeaturePyramid> pyrs;
  for (const auto& s : stacks) pyrs.push_back(identity_pyramid(s, cfg.levels));
  const std::vector<QueryPoint> q = {{0, 5.5, 6.0}, {4, 20.0, 11.25}};
  const TrackSet set = track_pyramids(pyrs, q, sched, model, 6);
  for (std::size_t p = 0; p < q.size(); ++p)
    for (std::size_t t = 0; t < sched.size(); ++t) {
      const std::size_t k = set.idx(p, t);
      if (!set.valid[k]) continue;
      EXPECT_EQ(set.x[k], q[p].x);
      EXPECT_EQ(set.y[k], q[p].y);
      EXPECT_EQ(set.visible[k], 1);
    }
}

TEST(Sequence, InsufficientEventsNamesTheTimestep) {
  const ModelConfig cfg = toy_model_config();
  const TrackerModel model = init_model(cfg, 1);
  const auto stream = random_stream({64, 64}, 500, 4);
  const std::vector<QueryPoint> q = {{0, 3.0, 3.0}};
  TrackOptions opt;
  opt.n_events = 400;
  const std::vector<std::int64_t> sched = {stream.events()[100].t_us, stream.events()[450].t_us};
  try {
    track_sequence(stream, q, sched, model, opt);
    FAIL() << "expected InsufficientEvents";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientEvents);
    EXPECT_NE(std::string(e.what()).find("timestep 0"), std::string::npos);
  }
}

TEST(Serialization, TrackCsvRoundtrip) {
  TrackSet set = TrackSet::empty_like({10, 20, 30}, 2);
  set.point_ids = {4, 9};
  for (std::size_t k = 0; k < set.x.size(); ++k) {
    set.x[k] = 0.1 * static_cast<double>(k) + 1.0 / 3.0;
    set.y[k] = -2.5 * static_cast<double>(k);
    set.valid[k] = k != 0;
    set.visible[k] = k % 2;
  }
  EXPECT_EQ(decode_tracks_csv(encode_tracks_csv(set)), set);
  const auto summary = tracks_summary(set);
  EXPECT_EQ(summary["points"], 2);
  EXPECT_EQ(summary["valid_entries"], 5);
  std::string bad = encode_tracks_csv(set);
  bad += "4,10,1,1,1,1\n";
  EXPECT_EQ(code_of([&] { decode_tracks_csv(bad); }), ErrorCode::Format);
}

TEST(Serialization, QueryCsv) {
  const auto sched = schedule_of(5);
  const std::vector<QueryPoint> q = {{0, 1.5, 2.0}, {3, 7.25, 0.0}};
  const auto back = decode_queries_csv(encode_queries_csv(q, sched), sched);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].t_index, 3);
  EXPECT_EQ(back[1].x, 7.25);
  EXPECT_EQ(code_of([&] { decode_queries_csv("t_us,x,y\n1001,1,1\n", sched); }), ErrorCode::QueryOutOfSchedule);
}

TEST(Serialization, ParamsRoundtripAndChecksum) {
  TrackerModel model = init_model(toy_model_config(), 21);
  randomize_heads(model, 3);
  const std::string blob = encode_params(model, 21);
  const TrackerModel back = decode_params(blob);
  EXPECT_EQ(back.config, model.config);
  const auto a = model.named(), b = back.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.value(), b[i].second.value());
  }
  std::string corrupt = blob;
  corrupt[corrupt.size() - 3] ^= 0x40;
  EXPECT_EQ(code_of([&] { decode_params(corrupt); }), ErrorCode::ChecksumMismatch);
  EXPECT_EQ(code_of([&] { decode_params("nope"); }), ErrorCode::Format);
}
