#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "etap/autodiff.hpp"
#include "etap/event_core.hpp"
#include "etap/io.hpp"
#include "etap/feature_engine.hpp"
#include "etap/model_config.hpp"
#include "etap/parallel.hpp"
#include "etap/representation.hpp"

namespace etap {

struct QueryPoint {
  int t_index = 0;  // index into the tracking schedule
  double x = 0.0;
  double y = 0.0;
};

/// Per-point, per-slot estimates for one sliding window. Row r = i * w + s.
struct TrackWindowState {
  std::size_t num_points = 0;
  std::size_t window = 0;
  std::size_t dim = 0;
  std::vector<double> positions;          // [N * w * 2]
  std::vector<double> descriptors;        // [N * w * d]
  std::vector<double> visibility_logits;  // [N * w]
  std::vector<std::uint8_t> active;       // [N * w]

  std::size_t rows() const { return num_points * window; }
  std::size_t row(std::size_t point, std::size_t slot) const { return point * window + slot; }
  double x(std::size_t p, std::size_t s) const { return positions[2 * row(p, s)]; }
  double y(std::size_t p, std::size_t s) const { return positions[2 * row(p, s) + 1]; }

  friend bool operator==(const TrackWindowState&, const TrackWindowState&) = default;
};

// ---------------------------------------------------------------------------
// Parameters

struct AttentionParams {
  ad::Var ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MlpParams {
  ad::Var ln_g, ln_b, w1, b1, w2, b2;
};

/// One refinement block: attention over the slots of each point, attention
/// over the points of each slot, then a feed-forward layer.
struct BlockParams {
  AttentionParams temporal;
  AttentionParams points;
  MlpParams mlp;
};

struct RefinerParams {
  ad::Var in_w, in_b;
  std::vector<BlockParams> blocks;
  ad::Var out_ln_g, out_ln_b;
  ad::Var dx_w, dx_b;
  ad::Var dq_w, dq_b;
  ad::Var vis_w, vis_b;  // visibility head applied to refined descriptors

  NamedParams named() const {
    NamedParams out{{"refiner.in.weight", in_w}, {"refiner.in.bias", in_b}};
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "refiner.block" + std::to_string(b) + ".";
      auto add_attn = [&](const std::string& name, const AttentionParams& a) {
        out.insert(out.end(), {{p + name + ".ln.gamma", a.ln_g}, {p + name + ".ln.beta", a.ln_b},
                               {p + name + ".q.weight", a.wq},   {p + name + ".q.bias", a.bq},
                               {p + name + ".k.weight", a.wk},   {p + name + ".k.bias", a.bk},
                               {p + name + ".v.weight", a.wv},   {p + name + ".v.bias", a.bv},
                               {p + name + ".out.weight", a.wo}, {p + name + ".out.bias", a.bo}});
      };
      add_attn("temporal", blocks[b].temporal);
      add_attn("points", blocks[b].points);
      const MlpParams& m = blocks[b].mlp;
      out.insert(out.end(), {{p + "mlp.ln.gamma", m.ln_g}, {p + "mlp.ln.beta", m.ln_b},
                             {p + "mlp.fc1.weight", m.w1}, {p + "mlp.fc1.bias", m.b1},
                             {p + "mlp.fc2.weight", m.w2}, {p + "mlp.fc2.bias", m.b2}});
    }
    out.insert(out.end(), {{"refiner.out_ln.gamma", out_ln_g}, {"refiner.out_ln.beta", out_ln_b},
                           {"refiner.head_dx.weight", dx_w},  {"refiner.head_dx.bias", dx_b},
                           {"refiner.head_dq.weight", dq_w},  {"refiner.head_dq.bias", dq_b},
                           {"refiner.vis.weight", vis_w},     {"refiner.vis.bias", vis_b}});
    return out;
  }
};

namespace detail {

template <typename Rng>
ad::Var dense(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  return ad::parameter({in, out}, normal_values(in * out, gain / std::sqrt(static_cast<double>(in)), rng));
}

inline ad::Var filled(std::size_t n, double v) { return ad::parameter({n}, std::vector<double>(n, v)); }

template <typename Rng>
AttentionParams init_attention(std::size_t h, Rng& rng) {
  return {filled(h, 1.0), filled(h, 0.0), dense(h, h, rng), filled(h, 0.0), dense(h, h, rng), filled(h, 0.0),
          dense(h, h, rng), filled(h, 0.0), dense(h, h, rng, 0.5), filled(h, 0.0)};
}

}  // namespace detail

/// Seeded initialisation. The position/descriptor heads start at zero so an
/// untrained refiner leaves its input state unchanged.
inline RefinerParams init_refiner(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto h = static_cast<std::size_t>(cfg.hidden);
  const auto d = static_cast<std::size_t>(cfg.feature_dim);
  RefinerParams p;
  p.in_w = detail::dense(static_cast<std::size_t>(cfg.token_dim()), h, rng);
  p.in_b = detail::filled(h, 0.0);
  for (int b = 0; b < cfg.blocks; ++b) {
    BlockParams bp;
    bp.temporal = detail::init_attention(h, rng);
    bp.points = detail::init_attention(h, rng);
    const std::size_t hm = h * static_cast<std::size_t>(cfg.mlp_ratio);
    bp.mlp = {detail::filled(h, 1.0), detail::filled(h, 0.0), detail::dense(h, hm, rng, std::sqrt(2.0)),
              detail::filled(hm, 0.0), detail::dense(hm, h, rng, 0.5), detail::filled(h, 0.0)};
    p.blocks.push_back(std::move(bp));
  }
  p.out_ln_g = detail::filled(h, 1.0);
  p.out_ln_b = detail::filled(h, 0.0);
  p.dx_w = ad::parameter({h, 2}, std::vector<double>(h * 2, 0.0));
  p.dx_b = detail::filled(2, 0.0);
  p.dq_w = ad::parameter({h, d}, std::vector<double>(h * d, 0.0));
  p.dq_b = detail::filled(d, 0.0);
  p.vis_w = ad::parameter({d, 1}, std::vector<double>(d, 0.0));
  p.vis_b = detail::filled(1, cfg.vis_init_logit);
  return p;
}

/// Encoder, refiner, and the configuration that shapes them.
struct TrackerModel {
  ModelConfig config;
  EncoderParams encoder;
  RefinerParams refiner;

  NamedParams named() const {
    NamedParams out = encoder.named();
    const NamedParams r = refiner.named();
    out.insert(out.end(), r.begin(), r.end());
    return out;
  }
};

inline TrackerModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 seeder(seed);
  const std::uint64_t enc_seed = seeder();
  const std::uint64_t ref_seed = seeder();
  return TrackerModel{cfg, init_encoder(cfg, enc_seed), init_refiner(cfg, ref_seed)};
}

// ---------------------------------------------------------------------------
// Initialisation

/// Broadcasts each query into every slot of a window whose first slot is
/// schedule index `offset`. `pyramids` holds one pyramid per window slot.
/// Slots before a query's time stay inactive. With allow_later, queries past
/// the window are kept fully inactive instead of rejected.
inline TrackWindowState initialize_window(std::span<const QueryPoint> queries, std::span<const FeaturePyramid> pyramids,
                                          int offset, const ModelConfig& cfg, bool allow_later = false) {
  TrackWindowState st;
  st.num_points = queries.size();
  st.window = pyramids.size();
  st.dim = static_cast<std::size_t>(cfg.feature_dim);
  st.positions.assign(st.rows() * 2, 0.0);
  st.descriptors.assign(st.rows() * st.dim, 0.0);
  st.visibility_logits.assign(st.rows(), cfg.vis_init_logit);
  st.active.assign(st.rows(), 0);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const QueryPoint& q = queries[i];
    const int rel = q.t_index - offset;
    if (allow_later && rel >= static_cast<int>(st.window)) {
      for (std::size_t s = 0; s < st.window; ++s) {
        st.positions[2 * st.row(i, s)] = q.x;
        st.positions[2 * st.row(i, s) + 1] = q.y;
      }
      continue;
    }
    if (rel < 0 || rel >= static_cast<int>(st.window)) {
      fail(ErrorCode::QueryOutOfSchedule, "query " + std::to_string(i) + " at index " + std::to_string(q.t_index) +
                                              " outside window starting at " + std::to_string(offset));
    }
    const FeaturePyramid& pyr = pyramids[static_cast<std::size_t>(rel)];
    const double inv = 1.0 / pyr.stride(0);
    const Descriptor desc = sample_bilinear(pyr.levels[0], q.x * inv, q.y * inv);
    require(desc.size() == st.dim, ErrorCode::ShapeMismatch, "pyramid width differs from model feature_dim");
    for (std::size_t s = 0; s < st.window; ++s) {
      const std::size_t r = st.row(i, s);
      st.positions[2 * r] = q.x;
      st.positions[2 * r + 1] = q.y;
      std::copy(desc.begin(), desc.end(), st.descriptors.begin() + static_cast<std::ptrdiff_t>(r * st.dim));
      st.active[r] = static_cast<std::uint8_t>(static_cast<int>(s) >= rel);
    }
  }
  return st;
}

/// Builds the next window's state from the previous one (carry-forward).
/// Overlapping slots copy the previous estimates, later slots repeat the
/// previous window's last slot; points whose query falls inside the new
/// window are initialised from their query; later queries stay inactive.
inline TrackWindowState carry_forward(const TrackWindowState& prev, int prev_offset, int offset,
                                      std::span<const QueryPoint> queries, std::span<const FeaturePyramid> pyramids,
                                      const ModelConfig& cfg) {
  require(prev.num_points == queries.size(), ErrorCode::ShapeMismatch, "query count differs from state");
  require(offset > prev_offset && offset <= prev_offset + static_cast<int>(prev.window), ErrorCode::InvalidArgument,
          "windows must advance without gaps");
  TrackWindowState st;
  st.num_points = queries.size();
  st.window = pyramids.size();
  st.dim = prev.dim;
  st.positions.assign(st.rows() * 2, 0.0);
  st.descriptors.assign(st.rows() * st.dim, 0.0);
  st.visibility_logits.assign(st.rows(), cfg.vis_init_logit);
  st.active.assign(st.rows(), 0);
  const int prev_end = prev_offset + static_cast<int>(prev.window);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const QueryPoint& q = queries[i];
    const int rel = q.t_index - offset;
    if (q.t_index < offset) {
      for (std::size_t s = 0; s < st.window; ++s) {
        const int global = offset + static_cast<int>(s);
        const auto src_slot = static_cast<std::size_t>(std::min(global, prev_end - 1) - prev_offset);
        const std::size_t src = prev.row(i, src_slot), dst = st.row(i, s);
        st.positions[2 * dst] = prev.positions[2 * src];
        st.positions[2 * dst + 1] = prev.positions[2 * src + 1];
        std::copy_n(prev.descriptors.begin() + static_cast<std::ptrdiff_t>(src * st.dim), st.dim,
                    st.descriptors.begin() + static_cast<std::ptrdiff_t>(dst * st.dim));
        st.visibility_logits[dst] = prev.visibility_logits[src];
        st.active[dst] = static_cast<std::uint8_t>(global >= q.t_index);
      }
    } else if (rel < static_cast<int>(st.window)) {
      const FeaturePyramid& pyr = pyramids[static_cast<std::size_t>(rel)];
      const double inv = 1.0 / pyr.stride(0);
      const Descriptor desc = sample_bilinear(pyr.levels[0], q.x * inv, q.y * inv);
      for (std::size_t s = 0; s < st.window; ++s) {
        const std::size_t r = st.row(i, s);
        st.positions[2 * r] = q.x;
        st.positions[2 * r + 1] = q.y;
        std::copy(desc.begin(), desc.end(), st.descriptors.begin() + static_cast<std::ptrdiff_t>(r * st.dim));
        st.active[r] = static_cast<std::uint8_t>(static_cast<int>(s) >= rel);
      }
    } else {
      for (std::size_t s = 0; s < st.window; ++s) {
        const std::size_t r = st.row(i, s);
        st.positions[2 * r] = q.x;
        st.positions[2 * r + 1] = q.y;
      }
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Tokens and refinement

namespace detail {

/// Geometric frequencies from 1 down to 1 / `span`.
inline std::vector<double> geometric_frequencies(int count, double span) {
  std::vector<double> f;
  for (int j = 0; j < count; ++j) f.push_back(count > 1 ? std::pow(span, -static_cast<double>(j) / (count - 1)) : 1.0);
  return f;
}

inline void put_sincos(double* out, double value, const std::vector<double>& freqs) {
  for (std::size_t j = 0; j < freqs.size(); ++j) {
    out[2 * j] = std::sin(value * freqs[j]);
    out[2 * j + 1] = std::cos(value * freqs[j]);
  }
}

inline std::vector<double> eta_frequencies(int count) {
  std::vector<double> f;
  for (int j = 0; j < count; ++j) f.push_back(std::ldexp(1.0, -j));
  return f;
}

inline std::shared_ptr<const ad::Groups> temporal_groups(std::size_t n, std::size_t w) {
  auto g = std::make_shared<ad::Groups>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < w; ++s) (*g)[i].push_back(i * w + s);
  return g;
}

inline std::shared_ptr<const ad::Groups> point_groups(std::size_t n, std::size_t w) {
  auto g = std::make_shared<ad::Groups>(w);
  for (std::size_t s = 0; s < w; ++s)
    for (std::size_t i = 0; i < n; ++i) (*g)[s].push_back(i * w + s);
  return g;
}

inline ad::Var attention_block(const ad::Var& h, const AttentionParams& a, std::shared_ptr<const ad::Groups> groups,
                               std::size_t heads, const std::vector<std::uint8_t>& mask) {
  const ad::Var n = ad::layer_norm(h, a.ln_g, a.ln_b);
  const ad::Var q = ad::linear(n, a.wq, a.bq);
  const ad::Var k = ad::linear(n, a.wk, a.bk);
  const ad::Var v = ad::linear(n, a.wv, a.bv);
  const ad::Var att = ad::grouped_attention(q, k, v, std::move(groups), heads, mask);
  return ad::add(h, ad::linear(att, a.wo, a.bo));
}

inline ad::Var mlp_block(const ad::Var& h, const MlpParams& m) {
  const ad::Var n = ad::layer_norm(h, m.ln_g, m.ln_b);
  return ad::add(h, ad::linear(ad::gelu(ad::linear(n, m.w1, m.b1)), m.w2, m.b2));
}

}  // namespace detail

/// Differentiable view of a window: positions [R, 2] and descriptors [R, d]
/// as graph nodes, the rest as constants.
struct WindowTensors {
  std::size_t num_points = 0;
  std::size_t window = 0;
  ad::Var positions;
  ad::Var descriptors;
  std::vector<double> visibility_logits;
  std::vector<std::uint8_t> active;
  std::vector<double> anchors;  // [N * 2] position of slot 0 at initialisation

  static WindowTensors from_state(const TrackWindowState& st) {
    WindowTensors t;
    t.num_points = st.num_points;
    t.window = st.window;
    t.positions = ad::constant({st.rows(), 2}, st.positions);
    t.descriptors = ad::constant({st.rows(), st.dim}, st.descriptors);
    t.visibility_logits = st.visibility_logits;
    t.active = st.active;
    t.anchors.resize(st.num_points * 2);
    for (std::size_t i = 0; i < st.num_points; ++i) {
      t.anchors[2 * i] = st.x(i, 0);
      t.anchors[2 * i + 1] = st.y(i, 0);
    }
    return t;
  }

  std::size_t rows() const { return num_points * window; }
};

/// Tokens (eta(x_s - x_1), Q_s, C_s, v_s) + eta'(x_1) + eta'(s), one row per
/// (point, slot), as a graph node [R, token_dim].
inline ad::Var build_tokens_graph(const WindowTensors& wt, std::span<const FeaturePyramid> pyramids,
                                  const ModelConfig& cfg) {
  const std::size_t n = wt.num_points, w = wt.window, R = wt.rows();
  require(pyramids.size() == w, ErrorCode::ShapeMismatch, "need one pyramid per window slot");
  std::vector<std::size_t> first_slot(R);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < w; ++s) first_slot[i * w + s] = i * w;
  const ad::Var offsets = ad::sub(wt.positions, ad::gather_rows(wt.positions, first_slot));
  const ad::Var eta = ad::sinusoid(offsets, detail::eta_frequencies(cfg.eta_freqs));

  // correlation per slot (its own pyramid), assembled slot-major then permuted
  std::vector<ad::Var> per_slot;
  for (std::size_t s = 0; s < w; ++s) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(i * w + s);
    const ad::Var q = ad::gather_rows(wt.descriptors, rows);
    const ad::Var p = ad::gather_rows(wt.positions, rows);
    std::vector<ad::Var> levels;
    for (std::size_t l = 0; l < pyramids[s].size(); ++l) {
      levels.push_back(ad::local_correlation(q, pyramids[s].levels[l], p, 1.0 / pyramids[s].stride(l), cfg.corr_radius));
    }
    per_slot.push_back(ad::concat_cols(levels));
  }
  std::vector<std::size_t> to_point_major(R);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < w; ++s) to_point_major[i * w + s] = s * n + i;
  const ad::Var corr = ad::gather_rows(ad::concat_rows(per_slot), to_point_major);
  require(corr.dim(1) == static_cast<std::size_t>(cfg.corr_dim()), ErrorCode::ShapeMismatch,
          "correlation width " + std::to_string(corr.dim(1)) + " differs from config");

  std::vector<double> vis(R);
  for (std::size_t r = 0; r < R; ++r) vis[r] = ad::sigmoid_value(wt.visibility_logits[r]);

  // query-position and slot encodings
  const auto fa = detail::geometric_frequencies(cfg.anchor_freqs, 256.0);
  const auto fs = detail::geometric_frequencies(cfg.slot_freqs, 8.0);
  const std::size_t ea = 4 * fa.size(), es = 2 * fs.size();
  std::vector<double> enc(R * (ea + es));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < w; ++s) {
      double* row = &enc[(i * w + s) * (ea + es)];
      detail::put_sincos(row, wt.anchors[2 * i], fa);
      detail::put_sincos(row + 2 * fa.size(), wt.anchors[2 * i + 1], fa);
      detail::put_sincos(row + ea, static_cast<double>(s), fs);
    }
  return ad::concat_cols({eta, wt.descriptors, corr, ad::constant({R, 1}, std::move(vis)),
                          ad::constant({R, ea + es}, std::move(enc))});
}

/// Token values for a window state (no graph).
inline std::vector<double> build_tokens(const TrackWindowState& st, std::span<const FeaturePyramid> pyramids,
                                        const ModelConfig& cfg) {
  ad::NoGradGuard no_grad;
  return build_tokens_graph(WindowTensors::from_state(st), pyramids, cfg).value();
}

struct RefineUpdate {
  ad::Var dx;  // [R, 2]
  ad::Var dq;  // [R, d]
};

inline void check_finite(const ad::Var& v, const char* what) {
  for (double x : v.value()) {
    if (!std::isfinite(x)) fail(ErrorCode::NonFiniteUpdate, std::string(what) + " contains non-finite values");
  }
}

/// One pass of the refiner. Updates of inactive slots are zero.
inline RefineUpdate refine_graph(const WindowTensors& wt, std::span<const FeaturePyramid> pyramids,
                                 const RefinerParams& params, const ModelConfig& cfg) {
  const std::size_t n = wt.num_points, w = wt.window, R = wt.rows();
  ad::Var h = ad::linear(build_tokens_graph(wt, pyramids, cfg), params.in_w, params.in_b);
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const auto tg = detail::temporal_groups(n, w);
  const auto pg = detail::point_groups(n, w);
  for (const BlockParams& b : params.blocks) {
    h = detail::attention_block(h, b.temporal, tg, heads, wt.active);
    h = detail::attention_block(h, b.points, pg, heads, wt.active);
    h = detail::mlp_block(h, b.mlp);
  }
  h = ad::layer_norm(h, params.out_ln_g, params.out_ln_b);
  const std::size_t d = wt.descriptors.dim(1);
  std::vector<double> m2(R * 2), md(R * d);
  for (std::size_t r = 0; r < R; ++r) {
    const double a = wt.active[r] ? 1.0 : 0.0;
    m2[2 * r] = m2[2 * r + 1] = a;
    std::fill_n(md.begin() + static_cast<std::ptrdiff_t>(r * d), d, a);
  }
  RefineUpdate up{ad::mul(ad::linear(h, params.dx_w, params.dx_b), ad::constant({R, 2}, std::move(m2))),
                  ad::mul(ad::linear(h, params.dq_w, params.dq_b), ad::constant({R, d}, std::move(md)))};
  check_finite(up.dx, "position update");
  check_finite(up.dq, "descriptor update");
  return up;
}

/// Value-level single refinement step: returns (dx, dq) without applying them.
inline std::pair<std::vector<double>, std::vector<double>> refine_once(const TrackWindowState& st,
                                                                       std::span<const FeaturePyramid> pyramids,
                                                                       const RefinerParams& params,
                                                                       const ModelConfig& cfg) {
  ad::NoGradGuard no_grad;
  if (st.rows() == 0) return {};
  const RefineUpdate up = refine_graph(WindowTensors::from_state(st), pyramids, params, cfg);
  return {up.dx.value(), up.dq.value()};
}

struct WindowRun {
  std::vector<ad::Var> positions_per_iter;  // after each iteration, [R, 2]
  ad::Var descriptors;                      // final [R, d]
  ad::Var visibility_logits;                // [R, 1]
};

/// Applies `iters` refinements. With detach_positions the position fed into
/// each iteration is treated as a constant, so the loss on iteration m only
/// reaches the update of iteration m.
inline WindowRun run_window(WindowTensors wt, std::span<const FeaturePyramid> pyramids, const RefinerParams& params,
                            const ModelConfig& cfg, int iters, bool detach_positions) {
  require(iters >= 1, ErrorCode::InvalidArgument, "need at least one refinement iteration");
  WindowRun run;
  for (int m = 0; m < iters; ++m) {
    if (detach_positions) wt.positions = ad::detach(wt.positions);
    const RefineUpdate up = refine_graph(wt, pyramids, params, cfg);
    wt.positions = ad::add(wt.positions, up.dx);
    wt.descriptors = ad::add(wt.descriptors, up.dq);
    run.positions_per_iter.push_back(wt.positions);
  }
  run.descriptors = wt.descriptors;
  run.visibility_logits = ad::linear(wt.descriptors, params.vis_w, params.vis_b);
  return run;
}

/// Refines a window state in place-free fashion and returns the new state
/// with visibility logits from the visibility head.
inline TrackWindowState track_window(const TrackWindowState& st, std::span<const FeaturePyramid> pyramids,
                                     const RefinerParams& params, const ModelConfig& cfg, int iters) {
  require(iters >= 1, ErrorCode::InvalidArgument, "need at least one refinement iteration");
  if (st.rows() == 0) return st;
  ad::NoGradGuard no_grad;
  const WindowRun run = run_window(WindowTensors::from_state(st), pyramids, params, cfg, iters, true);
  TrackWindowState out = st;
  out.positions = run.positions_per_iter.back().value();
  out.descriptors = run.descriptors.value();
  out.visibility_logits = run.visibility_logits.value();
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

/// Trajectories over a whole schedule, indexed [point][timestep].
struct TrackSet {
  std::vector<std::int64_t> timestamps_us;
  std::vector<int> point_ids;
  std::vector<double> x, y;            // [N * T]
  std::vector<std::uint8_t> visible;   // [N * T]
  std::vector<std::uint8_t> valid;     // [N * T]

  std::size_t num_points() const { return point_ids.size(); }
  std::size_t num_steps() const { return timestamps_us.size(); }
  std::size_t idx(std::size_t p, std::size_t t) const { return p * num_steps() + t; }

  static TrackSet empty_like(std::vector<std::int64_t> ts, std::size_t n) {
    TrackSet set;
    set.timestamps_us = std::move(ts);
    for (std::size_t i = 0; i < n; ++i) set.point_ids.push_back(static_cast<int>(i));
    const std::size_t total = n * set.timestamps_us.size();
    set.x.assign(total, 0.0);
    set.y.assign(total, 0.0);
    set.visible.assign(total, 0);
    set.valid.assign(total, 0);
    return set;
  }

  friend bool operator==(const TrackSet&, const TrackSet&) = default;
};

/// Window start offsets covering a schedule of `steps` with stride T_s; the
/// last window is aligned to the end when the stride does not divide evenly.
inline std::vector<int> window_offsets(int steps, int window, int stride) {
  std::vector<int> out{0};
  if (steps <= window) return out;
  int off = 0;
  while (off + window < steps) {
    off = std::min(off + stride, steps - window);
    out.push_back(off);
  }
  return out;
}

/// Writes a window's estimates into the track set (later windows overwrite).
inline void write_window(TrackSet& set, const TrackWindowState& st, int offset) {
  for (std::size_t i = 0; i < st.num_points; ++i)
    for (std::size_t s = 0; s < st.window; ++s) {
      const std::size_t r = st.row(i, s);
      const std::size_t k = set.idx(i, static_cast<std::size_t>(offset) + s);
      set.x[k] = st.positions[2 * r];
      set.y[k] = st.positions[2 * r + 1];
      set.valid[k] = st.active[r];
      set.visible[k] = static_cast<std::uint8_t>(st.active[r] && ad::sigmoid_value(st.visibility_logits[r]) > 0.5);
    }
}

struct TrackOptions {
  std::size_t n_events = 400000;  // N_e
  int iters = 6;                  // M at evaluation
  std::size_t threads = 1;
  bool normalize = true;
};

using StackBuilder = std::function<EventStack(const EventWindow&)>;

/// Event stacks at each scheduled timestamp, normalised jointly over time.
inline std::vector<EventStack> build_schedule_stacks(const EventStream& stream, std::span<const std::int64_t> schedule,
                                                     const ModelConfig& cfg, const TrackOptions& opt) {
  std::vector<EventStack> stacks(schedule.size());
  parallel_for(schedule.size(), opt.threads, [&](std::size_t t) {
    try {
      stacks[t] = build_event_stack(select_window(stream, schedule[t], opt.n_events), cfg.bins);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InsufficientEvents) throw;
      fail(ErrorCode::InsufficientEvents, "timestep " + std::to_string(t) + " (t=" + std::to_string(schedule[t]) +
                                              " us): " + e.what());
    }
  });
  if (opt.normalize && !stacks.empty()) stacks = normalize_batch(StackBatch{std::move(stacks), {}, {}}).stacks;
  return stacks;
}

inline std::vector<FeaturePyramid> encode_all(std::span<const EventStack> stacks, const TrackerModel& model,
                                              std::size_t threads) {
  std::vector<FeaturePyramid> out(stacks.size());
  parallel_for(stacks.size(), threads, [&](std::size_t t) {
    ad::NoGradGuard no_grad;
    out[t] = encode(stacks[t], model.encoder, model.config);
  });
  return out;
}

/// Tracks queries over precomputed per-timestep pyramids.
inline TrackSet track_pyramids(std::span<const FeaturePyramid> pyramids, std::span<const QueryPoint> queries,
                               std::vector<std::int64_t> schedule, const TrackerModel& model, int iters) {
  const ModelConfig& cfg = model.config;
  const int steps = static_cast<int>(pyramids.size());
  require(schedule.size() == pyramids.size(), ErrorCode::ShapeMismatch, "one pyramid per scheduled timestep");
  for (std::size_t i = 0; i < queries.size(); ++i) {
    require(queries[i].t_index >= 0 && queries[i].t_index < steps, ErrorCode::QueryOutOfSchedule,
            "query " + std::to_string(i) + " has index " + std::to_string(queries[i].t_index) + " outside schedule of " +
                std::to_string(steps));
  }
  TrackSet set = TrackSet::empty_like(std::move(schedule), queries.size());
  if (queries.empty() || steps == 0) return set;
  const int w = std::min(cfg.window, steps);
  const auto offsets = window_offsets(steps, w, cfg.window_stride);
  TrackWindowState state;
  int prev_offset = 0;
  for (std::size_t k = 0; k < offsets.size(); ++k) {
    const int off = offsets[k];
    const auto window_pyrs = pyramids.subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(w));
    if (k == 0) {
      state = initialize_window(queries, window_pyrs, off, cfg, true);
    } else {
      state = carry_forward(state, prev_offset, off, queries, window_pyrs, cfg);
    }
    bool any_active = false;
    for (auto a : state.active) any_active = any_active || a;
    if (any_active) state = track_window(state, window_pyrs, model.refiner, cfg, iters);
    write_window(set, state, off);
    prev_offset = off;
  }
  return set;
}

/// State hand-off between consecutive windows (same as track_sequence uses).
inline TrackWindowState initialize_next_window(const TrackWindowState& prev, int prev_offset, int offset,
                                               std::span<const QueryPoint> queries,
                                               std::span<const FeaturePyramid> pyramids, const ModelConfig& cfg) {
  return carry_forward(prev, prev_offset, offset, queries, pyramids, cfg);
}

/// Full pipeline: stacks and pyramids at each scheduled timestamp, then
/// sliding-window refinement.
inline TrackSet track_sequence(const EventStream& stream, std::span<const QueryPoint> queries,
                               std::vector<std::int64_t> schedule, const TrackerModel& model,
                               const TrackOptions& opt = {}) {
  for (std::size_t t = 1; t < schedule.size(); ++t) {
    require(schedule[t] > schedule[t - 1], ErrorCode::InvalidArgument, "schedule must be strictly increasing");
  }
  if (queries.empty()) return TrackSet::empty_like(std::move(schedule), 0);
  const auto stacks = build_schedule_stacks(stream, schedule, model.config, opt);
  const auto pyramids = encode_all(stacks, model, opt.threads);
  return track_pyramids(pyramids, queries, std::move(schedule), model, opt.iters);
}

// ---------------------------------------------------------------------------
// Serialisation

inline std::string encode_tracks_csv(const TrackSet& set) {
  std::string out = "point_id,t_us,x,y,visible,valid\n";
  for (std::size_t p = 0; p < set.num_points(); ++p)
    for (std::size_t t = 0; t < set.num_steps(); ++t) {
      const std::size_t k = set.idx(p, t);
      out += std::to_string(set.point_ids[p]) + "," + std::to_string(set.timestamps_us[t]) + "," +
             io::format_double(set.x[k]) + "," + io::format_double(set.y[k]) + "," +
             std::to_string(set.visible[k]) + "," + std::to_string(set.valid[k]) + "\n";
    }
  return out;
}

/// Parses the track CSV. Rows may come in any order but must form a full
/// point x timestep grid.
inline TrackSet decode_tracks_csv(const std::string& text) {
  const io::CsvTable table = io::parse_csv(text);
  for (const char* col : {"point_id", "t_us", "x", "y", "visible", "valid"}) table.column(col);
  const std::size_t c_id = table.column("point_id"), c_t = table.column("t_us"), c_x = table.column("x"),
                    c_y = table.column("y"), c_vis = table.column("visible"), c_val = table.column("valid");
  std::vector<int> ids;
  std::vector<std::int64_t> ts;
  for (const auto& r : table.rows) {
    ids.push_back(static_cast<int>(io::to_int(r[c_id])));
    ts.push_back(io::to_int(r[c_t]));
  }
  auto uniq = [](auto v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  TrackSet set = TrackSet::empty_like(uniq(ts), 0);
  set.point_ids = uniq(ids);
  const std::size_t total = set.num_points() * set.num_steps();
  require(table.rows.size() == total, ErrorCode::Format,
          "track file has " + std::to_string(table.rows.size()) + " rows, expected " + std::to_string(total));
  set.x.assign(total, 0.0);
  set.y.assign(total, 0.0);
  set.visible.assign(total, 0);
  set.valid.assign(total, 0);
  std::vector<std::uint8_t> seen(total, 0);
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    const auto p = static_cast<std::size_t>(std::lower_bound(set.point_ids.begin(), set.point_ids.end(), ids[i]) -
                                            set.point_ids.begin());
    const auto t = static_cast<std::size_t>(
        std::lower_bound(set.timestamps_us.begin(), set.timestamps_us.end(), ts[i]) - set.timestamps_us.begin());
    const std::size_t k = set.idx(p, t);
    require(!seen[k], ErrorCode::Format, "duplicate track row for point " + std::to_string(ids[i]));
    seen[k] = 1;
    set.x[k] = io::to_double(r[c_x]);
    set.y[k] = io::to_double(r[c_y]);
    const auto vis = io::to_int(r[c_vis]), val = io::to_int(r[c_val]);
    require((vis == 0 || vis == 1) && (val == 0 || val == 1), ErrorCode::Format, "flags must be 0 or 1");
    set.visible[k] = static_cast<std::uint8_t>(vis);
    set.valid[k] = static_cast<std::uint8_t>(val);
  }
  return set;
}

inline nlohmann::json tracks_summary(const TrackSet& set) {
  std::size_t valid = 0, visible = 0;
  for (std::size_t k = 0; k < set.valid.size(); ++k) {
    valid += set.valid[k];
    visible += set.valid[k] && set.visible[k];
  }
  return {{"points", set.num_points()},
          {"timesteps", set.num_steps()},
          {"valid_entries", valid},
          {"visible_entries", visible},
          {"t_first_us", set.timestamps_us.empty() ? 0 : set.timestamps_us.front()},
          {"t_last_us", set.timestamps_us.empty() ? 0 : set.timestamps_us.back()}};
}

/// Query CSV `t_us,x,y`; timestamps must appear in the schedule.
inline std::vector<QueryPoint> decode_queries_csv(const std::string& text, std::span<const std::int64_t> schedule) {
  const io::CsvTable table = io::parse_csv(text);
  const std::size_t c_t = table.column("t_us"), c_x = table.column("x"), c_y = table.column("y");
  std::vector<QueryPoint> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    const std::int64_t t = io::to_int(r[c_t]);
    const auto it = std::lower_bound(schedule.begin(), schedule.end(), t);
    require(it != schedule.end() && *it == t, ErrorCode::QueryOutOfSchedule,
            "query row " + std::to_string(i + 1) + " at t=" + std::to_string(t) + " us is not a scheduled timestamp");
    out.push_back({static_cast<int>(it - schedule.begin()), io::to_double(r[c_x]), io::to_double(r[c_y])});
  }
  return out;
}

inline std::string encode_queries_csv(std::span<const QueryPoint> queries, std::span<const std::int64_t> schedule) {
  std::string out = "t_us,x,y\n";
  for (const auto& q : queries) {
    out += std::to_string(schedule[static_cast<std::size_t>(q.t_index)]) + "," + io::format_double(q.x) + "," +
           io::format_double(q.y) + "\n";
  }
  return out;
}

// Parameter blob: "ETPW" | u64 header length | JSON header | f64 values.

inline std::string encode_params(const TrackerModel& model, std::uint64_t seed) {
  std::string data;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, var] : model.named()) {
    tensors.push_back({{"name", name}, {"shape", var.shape()}, {"offset", offset}});
    for (double v : var.value()) io::put_le<double>(data, v);
    offset += var.numel();
  }
  const nlohmann::json header = {{"format", "etap-params"}, {"version", 1},      {"dtype", "f64"},
                                 {"config", model.config},  {"seed", seed},       {"count", offset},
                                 {"tensors", tensors},      {"checksum", io::hex64(io::fnv1a64(data))}};
  const std::string h = header.dump();
  std::string out = "ETPW";
  io::put_le<std::uint64_t>(out, h.size());
  return out + h + data;
}

inline TrackerModel decode_params(const std::string& blob) {
  require(blob.size() >= 12 && blob.compare(0, 4, "ETPW") == 0, ErrorCode::Format, "not a parameter blob");
  const auto hlen = io::get_le<std::uint64_t>(blob, 4);
  require(12 + hlen <= blob.size(), ErrorCode::Format, "truncated parameter header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("parameter header: ") + e.what());
  }
  const std::string data = blob.substr(12 + hlen);
  require(io::hex64(io::fnv1a64(data)) == header.at("checksum").get<std::string>(), ErrorCode::ChecksumMismatch,
          "parameter data checksum mismatch");
  const auto count = header.at("count").get<std::size_t>();
  require(data.size() == count * 8, ErrorCode::Format, "parameter data size mismatch");
  TrackerModel model = init_model(header.at("config").get<ModelConfig>(), 0);
  auto named = model.named();
  require(named.size() == header.at("tensors").size(), ErrorCode::Format, "tensor count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& t = header["tensors"][i];
    auto& [name, var] = named[i];
    require(t.at("name").get<std::string>() == name, ErrorCode::Format, "unexpected tensor " + t.at("name").dump());
    require(t.at("shape").get<std::vector<std::size_t>>() == var.shape(), ErrorCode::ShapeMismatch,
            "shape mismatch for " + name);
    const auto off = t.at("offset").get<std::size_t>();
    require(off + var.numel() <= count, ErrorCode::Format, "tensor out of range: " + name);
    auto& values = var.mutable_value();
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = io::get_le<double>(data, (off + j) * 8);
  }
  return model;
}

}  // namespace etap
