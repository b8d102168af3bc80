#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "etap/autodiff.hpp"
#include "etap/event_sim.hpp"
#include "etap/feature_engine.hpp"
#include "etap/gt_tools.hpp"
#include "etap/losses.hpp"
#include "etap/metrics.hpp"
#include "etap/representation.hpp"
#include "etap/tracker.hpp"

namespace etap {

// ---------------------------------------------------------------------------
// Translating-texture dataset

struct ToyDatasetConfig {
  int width = 64;
  int height = 64;
  std::size_t scenes = 20;
  std::size_t points = 16;
  int steps = 8;                     // schedule length, one window
  std::int64_t step_us = 10000;      // tracking step
  double speed_min = 50.0;           // px/s
  double speed_max = 100.0;
  std::size_t n_events = 4000;       // N_e
  double render_fps = 400.0;
  std::int64_t warmup_min_us = 20000;
  std::int64_t warmup_max_us = 60000;
  double margin = 3.0;               // points stay this far inside the frame
  double contrast_lo = kContrastLo;
  double contrast_hi = kContrastHi;
  int bins = kToyBins;
  std::uint64_t seed = 1;

  void validate() const {
    require(width >= 8 && height >= 8 && steps >= 1 && step_us > 0 && n_events > 0, ErrorCode::ConfigInvalid,
            "invalid toy dataset sizes");
    require(speed_min >= 0 && speed_max >= speed_min && render_fps > 0, ErrorCode::ConfigInvalid,
            "invalid toy motion settings");
    require(warmup_max_us >= warmup_min_us && warmup_min_us >= 0, ErrorCode::ConfigInvalid, "invalid warm-up");
  }
};

/// One training/evaluation window: raw stacks at every schedule step, the
/// time-inverted stacks of the same windows, and exact GT tracks.
struct ToySample {
  Geometry geometry;
  std::vector<std::int64_t> schedule;
  std::vector<EventStack> stacks;
  std::vector<EventStack> inverted;
  std::vector<QueryPoint> queries;
  TrackSet gt;
  ToySceneConfig scene;
  ContrastConfig contrast;
  std::size_t event_count = 0;
};

/// Scene generator for a translating band-limited texture. Retries with a new
/// texture when the scene is too flat to reach N_e events in the warm-up.
inline ToySample make_toy_sample(const ToyDatasetConfig& cfg, std::uint64_t scene_seed) {
  cfg.validate();
  std::mt19937_64 rng(scene_seed);
  for (int attempt = 0; attempt < 16; ++attempt) {
    ToySceneConfig sc;
    sc.width = cfg.width;
    sc.height = cfg.height;
    sc.background_seed = rng();
    const double speed = std::uniform_real_distribution<double>(cfg.speed_min, cfg.speed_max)(rng);
    const double dir = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
    sc.background_vx = speed * std::cos(dir);
    sc.background_vy = speed * std::sin(dir);
    sc.base_fps = cfg.render_fps;
    sc.duration_us = cfg.warmup_max_us + (cfg.steps - 1) * cfg.step_us;
    const ContrastConfig contrast = sample_threshold(rng, cfg.contrast_lo, cfg.contrast_hi);
    const ToyScene scene(sc);
    const EventStream stream = simulate_events(scene.frames(), contrast);
    if (stream.size() < cfg.n_events) continue;
    std::int64_t t_start = std::max(cfg.warmup_min_us, stream.events()[cfg.n_events - 1].t_us);
    t_start = (t_start + 999) / 1000 * 1000;
    if (t_start > cfg.warmup_max_us) continue;

    ToySample s;
    s.geometry = {cfg.width, cfg.height};
    s.scene = sc;
    s.contrast = contrast;
    s.event_count = stream.size();
    for (int k = 0; k < cfg.steps; ++k) s.schedule.push_back(t_start + k * cfg.step_us);
    for (std::int64_t t : s.schedule) {
      const EventWindow w = select_window(stream, t, cfg.n_events);
      s.stacks.push_back(build_event_stack(w, cfg.bins));
      s.inverted.push_back(build_event_stack(invert_time(w), cfg.bins));
    }
    // points whose whole track stays inside the margin
    const double t0 = static_cast<double>(s.schedule.front()) * 1e-6;
    const double t1 = static_cast<double>(s.schedule.back()) * 1e-6;
    const double dx = sc.background_vx * (t1 - t0), dy = sc.background_vy * (t1 - t0);
    const double x_lo = cfg.margin + std::max(0.0, -dx), x_hi = cfg.width - 1 - cfg.margin - std::max(0.0, dx);
    const double y_lo = cfg.margin + std::max(0.0, -dy), y_hi = cfg.height - 1 - cfg.margin - std::max(0.0, dy);
    require(x_hi > x_lo && y_hi > y_lo, ErrorCode::ConfigInvalid, "motion too large for the frame");
    std::uniform_real_distribution<double> ux(x_lo, x_hi), uy(y_lo, y_hi);
    s.gt = TrackSet::empty_like(s.schedule, cfg.points);
    for (std::size_t i = 0; i < cfg.points; ++i) {
      const LayerPoint p = scene.local(-1, ux(rng), uy(rng), t0);
      scene.fill_track(s.gt, i, p, 0);
      s.queries.push_back({0, s.gt.x[s.gt.idx(i, 0)], s.gt.y[s.gt.idx(i, 0)]});
    }
    return s;
  }
  fail(ErrorCode::InsufficientEvents, "toy scene did not produce enough events during warm-up");
}

inline std::vector<ToySample> make_toy_dataset(const ToyDatasetConfig& cfg, std::size_t threads = 1) {
  std::vector<ToySample> out(cfg.scenes);
  std::mt19937_64 seeder(cfg.seed);
  std::vector<std::uint64_t> seeds(cfg.scenes);
  for (auto& s : seeds) s = seeder();
  parallel_for(cfg.scenes, threads, [&](std::size_t i) { out[i] = make_toy_sample(cfg, seeds[i]); });
  return out;
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // global gradient norm clip, <= 0 disables
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  /// Applies one update from the accumulated gradients; returns the
  /// pre-clip gradient norm.
  double step(const NamedParams& params, double lr_scale = 1.0) {
    if (m_.empty()) {
      for (const auto& [name, p] : params) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
      }
    }
    require(m_.size() == params.size(), ErrorCode::ShapeMismatch, "parameter set changed between steps");
    double sq = 0.0;
    for (const auto& [name, p] : params) {
      for (double g : const_cast<ad::Var&>(p).mutable_grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) fail(ErrorCode::NonFiniteLoss, "gradient norm is not finite");
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.lr * lr_scale;
    for (std::size_t k = 0; k < params.size(); ++k) {
      ad::Var p = params[k].second;
      auto& val = p.mutable_value();
      auto& grad = p.mutable_grad();
      const bool decay = p.shape().size() > 1;  // no decay on biases and norms
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double g = grad[i] * clip;
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * g * g;
        if (decay) val[i] -= lr * cfg_.weight_decay * val[i];
        val[i] -= lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.eps);
      }
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

inline void zero_grad(const NamedParams& params) {
  for (const auto& [name, p] : params) {
    auto& g = const_cast<ad::Var&>(p).mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

inline TrackerModel clone_model(const TrackerModel& model) { return decode_params(encode_params(model, 0)); }

// ---------------------------------------------------------------------------
// Differentiable forward pass on one sample

struct SampleLosses {
  ad::Var l_track, l_vis, l_fa, total;
  WindowRun run;
};

struct ForwardOptions {
  int iters = 4;
  bool detach_positions = true;
  bool with_fa = false;
  QuarterTurn turn = QuarterTurn::R0;
  double noise_sigma = 0.0;
  TrackNorm norm = TrackNorm::L1;
};

namespace detail {

template <typename Rng>
std::vector<EventStack> prepare_stacks(std::vector<EventStack> stacks, double sigma, Rng& rng) {
  if (sigma > 0) {
    for (auto& s : stacks) s = add_noise(std::move(s), sigma, rng);
  }
  return normalize_batch(StackBatch{std::move(stacks), {}, {}}).stacks;
}

inline ad::Var positions_var(const std::vector<std::pair<double, double>>& pts) {
  std::vector<double> v;
  for (const auto& [x, y] : pts) {
    v.push_back(x);
    v.push_back(y);
  }
  return ad::constant({pts.size(), 2}, std::move(v));
}

}  // namespace detail

/// Encodes the window, refines from the slot-0 queries and evaluates every
/// loss term. l_fa is zero (and not differentiated) unless with_fa is set.
template <typename Rng>
SampleLosses sample_forward(const TrackerModel& model, const ToySample& sample, const ForwardOptions& opt,
                            Rng& rng) {
  const ModelConfig& cfg = model.config;
  const std::size_t w = sample.stacks.size(), n = sample.queries.size();
  const auto stacks = detail::prepare_stacks(sample.stacks, opt.noise_sigma, rng);
  std::vector<FeaturePyramid> pyrs;
  for (const auto& s : stacks) pyrs.push_back(encode(s, model.encoder, cfg));

  WindowTensors wt;
  wt.num_points = n;
  wt.window = w;
  std::vector<std::pair<double, double>> qpos;
  for (const auto& q : sample.queries) {
    require(q.t_index == 0, ErrorCode::InvalidArgument, "training queries must sit at slot 0");
    qpos.emplace_back(q.x, q.y);
  }
  const ad::Var qdesc = ad::bilinear_sample(pyrs[0].levels[0], detail::positions_var(qpos), 1.0 / pyrs[0].stride(0));
  std::vector<std::size_t> bcast(n * w);
  std::vector<double> pos(n * w * 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < w; ++s) {
      bcast[i * w + s] = i;
      pos[2 * (i * w + s)] = qpos[i].first;
      pos[2 * (i * w + s) + 1] = qpos[i].second;
    }
  wt.descriptors = ad::gather_rows(qdesc, bcast);
  wt.positions = ad::constant({n * w, 2}, pos);
  wt.visibility_logits.assign(n * w, cfg.vis_init_logit);
  wt.active.assign(n * w, 1);
  for (std::size_t i = 0; i < n; ++i) {
    wt.anchors.push_back(qpos[i].first);
    wt.anchors.push_back(qpos[i].second);
  }

  SampleLosses out;
  out.run = run_window(wt, pyrs, model.refiner, cfg, opt.iters, opt.detach_positions);

  std::vector<double> gt_pos(n * w * 2);
  std::vector<std::uint8_t> gt_vis(n * w), valid(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < w; ++s) {
      const std::size_t k = sample.gt.idx(i, s), r = i * w + s;
      gt_pos[2 * r] = sample.gt.x[k];
      gt_pos[2 * r + 1] = sample.gt.y[k];
      gt_vis[r] = sample.gt.visible[k];
      valid[r] = sample.gt.valid[k];
    }
  out.l_track = loss_track_graph(out.run.positions_per_iter, gt_pos, valid, opt.norm);
  out.l_vis = loss_visibility_graph(out.run.visibility_logits, gt_vis, valid);

  if (opt.with_fa) {
    std::vector<EventStack> inv;
    for (std::size_t s = 0; s < w; ++s) inv.push_back(rotate_stack(sample.inverted[w - 1 - s], opt.turn));
    inv = detail::prepare_stacks(std::move(inv), opt.noise_sigma, rng);
    std::vector<FeaturePyramid> ipyrs;
    for (const auto& s : inv) ipyrs.push_back(encode(s, model.encoder, cfg));
    std::vector<ad::Var> d_parts, dt_parts;
    for (std::size_t s = 0; s < w; ++s) {
      std::vector<std::pair<double, double>> p, rp;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = sample.gt.idx(i, s);
        p.emplace_back(sample.gt.x[k], sample.gt.y[k]);
        rp.push_back(rotate_point(sample.gt.x[k], sample.gt.y[k], sample.geometry, opt.turn));
      }
      const FeaturePyramid& fp = pyrs[s];
      const FeaturePyramid& ip = ipyrs[w - 1 - s];
      d_parts.push_back(ad::bilinear_sample(fp.levels[0], detail::positions_var(p), 1.0 / fp.stride(0)));
      dt_parts.push_back(ad::bilinear_sample(ip.levels[0], detail::positions_var(rp), 1.0 / ip.stride(0)));
    }
    out.l_fa = cosine_alignment(ad::concat_rows(d_parts), ad::concat_rows(dt_parts),
                                std::vector<double>(n * w, 1.0 / static_cast<double>(n)));
  } else {
    out.l_fa = ad::scalar(0.0);
  }
  out.total = total_loss_graph(out.l_track, out.l_vis, out.l_fa);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  int steps = 500;
  int fa_start = -1;  // first step of the FA phase; -1 never
  int iters = 4;      // M during training
  double noise_sigma = kDefaultNoiseSigma;
  std::size_t batch = 1;
  AdamWConfig adam;
  int warmup_steps = 20;  // linear lr warm-up
  bool cosine_decay = true;
  std::uint64_t seed = 7;
};

struct TrainState {
  TrackerModel model;
  AdamW optimizer;
  LossCurve curve;
  int step = 0;
};

inline double lr_scale(const TrainConfig& cfg, int step, int total) {
  double s = 1.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) s = static_cast<double>(step + 1) / cfg.warmup_steps;
  if (cfg.cosine_decay && total > 0) {
    s *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
    s = std::max(s, 0.05);
  }
  return s;
}

/// Runs steps [state.step, until) single-threaded. Sample order, rotations
/// and noise derive from (seed, step) only, so a run split at any step and
/// resumed gives the same result as an uninterrupted one.
inline void train_steps(TrainState& state, const std::vector<ToySample>& data, const TrainConfig& cfg, int until,
                        const std::function<void(int, const LossBreakdown&)>& on_step = {}) {
  require(!data.empty(), ErrorCode::InvalidArgument, "empty training set");
  const NamedParams params = state.model.named();
  for (; state.step < until; ++state.step) {
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(state.step));
    zero_grad(params);
    LossBreakdown acc;
    const bool fa = cfg.fa_start >= 0 && state.step >= cfg.fa_start;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& sample = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
      ForwardOptions opt;
      opt.iters = cfg.iters;
      opt.with_fa = fa;
      opt.turn = static_cast<QuarterTurn>(std::uniform_int_distribution<int>(0, 3)(rng));
      opt.noise_sigma = cfg.noise_sigma;
      const SampleLosses l = sample_forward(state.model, sample, opt, rng);
      if (!std::isfinite(l.total.item())) {
        fail(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(state.step));
      }
      ad::backward(l.total, 1.0 / static_cast<double>(cfg.batch));
      acc.l_track += l.l_track.item() / cfg.batch;
      acc.l_vis += l.l_vis.item() / cfg.batch;
      acc.l_fa += l.l_fa.item() / cfg.batch;
    }
    acc = total_loss(acc.l_track, acc.l_vis, acc.l_fa);
    state.optimizer.step(params, lr_scale(cfg, state.step, cfg.steps));
    state.curve.steps.push_back(acc);
    if (on_step) on_step(state.step, acc);
  }
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Mean L_tp over a dataset without noise or gradients.
inline double mean_track_loss(const TrackerModel& model, const std::vector<ToySample>& data, int iters,
                              std::size_t threads = 1) {
  std::vector<double> per(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    ad::NoGradGuard no_grad;
    std::mt19937_64 rng(0);
    ForwardOptions opt;
    opt.iters = iters;
    per[i] = sample_forward(model, data[i], opt, rng).l_track.item();
  });
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(data.size());
}

/// Tracks every sample with the inference path and concatenates the results
/// into one prediction/GT pair for the TAP metrics.
inline std::pair<TrackSet, TrackSet> predict_dataset(const TrackerModel& model, const std::vector<ToySample>& data,
                                                     int iters, std::size_t threads = 1) {
  std::vector<TrackSet> preds(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto stacks = normalize_batch(StackBatch{data[i].stacks, {}, {}}).stacks;
    const auto pyrs = encode_all(stacks, model, 1);
    preds[i] = track_pyramids(pyrs, data[i].queries, data[i].schedule, model, iters);
  });
  // concatenate along points; timestamps are replaced by step indices
  TrackSet pred, gt;
  const std::size_t T = data.front().schedule.size();
  std::vector<std::int64_t> steps(T);
  for (std::size_t t = 0; t < T; ++t) steps[t] = static_cast<std::int64_t>(t);
  pred.timestamps_us = gt.timestamps_us = steps;
  int id = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    require(data[i].schedule.size() == T, ErrorCode::ShapeMismatch, "samples must share schedule length");
    for (std::size_t p = 0; p < preds[i].num_points(); ++p, ++id) {
      pred.point_ids.push_back(id);
      gt.point_ids.push_back(id);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t k = preds[i].idx(p, t);
        pred.x.push_back(preds[i].x[k]);
        pred.y.push_back(preds[i].y[k]);
        pred.visible.push_back(preds[i].visible[k]);
        pred.valid.push_back(preds[i].valid[k]);
        gt.x.push_back(data[i].gt.x[k]);
        gt.y.push_back(data[i].gt.y[k]);
        gt.visible.push_back(data[i].gt.visible[k]);
        gt.valid.push_back(data[i].gt.valid[k]);
      }
    }
  }
  return {pred, gt};
}

// ---------------------------------------------------------------------------
// Motion-direction probe

struct ProbeResult {
  double c_intra = 0.0;
  double c_inter = 0.0;
  double gap() const { return c_intra - c_inter; }
};

struct ProbeData {
  std::vector<ToySample> runs;  // [horizontal, vertical], same texture and points
};

/// The same texture moved horizontally and vertically at equal speed, with
/// the same three texture points tracked in both runs.
inline ProbeData make_probe(const ToyDatasetConfig& base, std::uint64_t texture_seed, double speed = 75.0) {
  ProbeData probe;
  const int w = base.width, h = base.height;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const std::vector<std::pair<double, double>> pts = {{cx - 10, cy - 8}, {cx + 9, cy + 2}, {cx - 3, cy + 11}};
  for (int dir = 0; dir < 2; ++dir) {
    ToySceneConfig sc;
    sc.width = w;
    sc.height = h;
    sc.background_seed = texture_seed;
    sc.background_vx = dir == 0 ? speed : 0.0;
    sc.background_vy = dir == 0 ? 0.0 : speed;
    sc.base_fps = base.render_fps;
    const std::int64_t t_start = base.warmup_max_us;
    sc.duration_us = t_start + (base.steps - 1) * base.step_us;
    const ToyScene scene(sc);
    const ContrastConfig contrast{0.25, 0.25, kDefaultLogEps};
    const EventStream stream = simulate_events(scene.frames(), contrast);
    ToySample s;
    s.geometry = {w, h};
    s.scene = sc;
    s.contrast = contrast;
    for (int k = 0; k < base.steps; ++k) s.schedule.push_back(t_start + k * base.step_us);
    for (std::int64_t t : s.schedule) {
      const EventWindow win = select_window(stream, t, base.n_events);
      s.stacks.push_back(build_event_stack(win, base.bins));
      s.inverted.push_back(build_event_stack(invert_time(win), base.bins));
    }
    s.gt = TrackSet::empty_like(s.schedule, pts.size());
    // same texture points: local coordinates at the first scheduled time of the horizontal run
    const double t0 = static_cast<double>(t_start) * 1e-6;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const LayerPoint p{-1, pts[i].first - speed * t0, pts[i].second};
      scene.fill_track(s.gt, i, p, 0);
      s.queries.push_back({0, s.gt.x[s.gt.idx(i, 0)], s.gt.y[s.gt.idx(i, 0)]});
    }
    probe.runs.push_back(std::move(s));
  }
  return probe;
}

inline double cosine(const Descriptor& a, const Descriptor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  require(aa > 0 && bb > 0, ErrorCode::ZeroNormDescriptor, "zero descriptor in probe");
  return ab / std::sqrt(aa * bb);
}

/// Mean cosine between a point's first descriptor and its later descriptors
/// in the same run (intra) and in the other run (inter).
inline ProbeResult run_probe(const TrackerModel& model, const ProbeData& probe) {
  ad::NoGradGuard no_grad;
  std::vector<std::vector<std::vector<Descriptor>>> d(2);  // [dir][point][t]
  for (std::size_t r = 0; r < 2; ++r) {
    const ToySample& s = probe.runs[r];
    const auto stacks = normalize_batch(StackBatch{s.stacks, {}, {}}).stacks;
    const auto pyrs = encode_all(stacks, model, 1);
    d[r].resize(s.gt.num_points());
    for (std::size_t i = 0; i < s.gt.num_points(); ++i)
      for (std::size_t t = 0; t < s.schedule.size(); ++t) {
        const std::size_t k = s.gt.idx(i, t);
        const double inv = 1.0 / pyrs[t].stride(0);
        d[r][i].push_back(sample_bilinear(pyrs[t].levels[0], s.gt.x[k] * inv, s.gt.y[k] * inv));
      }
  }
  ProbeResult res;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < d[0].size(); ++i)
    for (std::size_t t = 1; t < d[0][i].size(); ++t) {
      for (std::size_t r = 0; r < 2; ++r) {
        res.c_intra += cosine(d[r][i][0], d[r][i][t]);
        ++n_intra;
      }
      res.c_inter += cosine(d[0][i][0], d[1][i][t]);
      ++n_inter;
    }
  res.c_intra /= static_cast<double>(n_intra);
  res.c_inter /= static_cast<double>(n_inter);
  return res;
}

}  // namespace etap
