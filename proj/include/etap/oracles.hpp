#pragma once

// Reference implementations written independently of the production paths:
// no shared helpers beyond plain data types. Slow by design.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "etap/event_core.hpp"
#include "etap/event_sim.hpp"
#include "etap/representation.hpp"
#include "etap/tracker.hpp"

namespace etap::oracle {

using EventKey = std::tuple<std::int64_t, int, int, int>;  // t, x, y, polarity

inline std::vector<EventKey> event_multiset(std::span<const Event> events) {
  std::vector<EventKey> keys;
  keys.reserve(events.size());
  for (const Event& e : events) {
    keys.emplace_back(e.t_us, static_cast<int>(std::lround(e.x)), static_cast<int>(std::lround(e.y)), e.polarity);
  }
  std::sort(keys.begin(), keys.end());
  return keys;
}

/// Steps every pixel through every integer microsecond and fires while the
/// level is at least C (minus tolerance) away from the reference.
inline std::vector<EventKey> dense_simulate(const FrameSequence& seq, const ContrastConfig& cfg,
                                            double tol = 1e-9) {
  const int W = seq.frames.front().width, H = seq.frames.front().height;
  std::vector<EventKey> out;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      std::vector<double> lv;
      for (const Image& f : seq.frames) lv.push_back(std::log(f.data[static_cast<std::size_t>(y) * W + x] + cfg.log_eps));
      double ref = lv[0];
      std::size_t k = 0;
      for (std::int64_t t = seq.timestamps_us.front() + 1; t <= seq.timestamps_us.back(); ++t) {
        while (seq.timestamps_us[k + 1] < t) ++k;
        const std::int64_t a = seq.timestamps_us[k], b = seq.timestamps_us[k + 1];
        const double level = lv[k] + (lv[k + 1] - lv[k]) * (static_cast<double>(t - a) / static_cast<double>(b - a));
        while (level - ref >= cfg.c_pos - tol) {
          out.emplace_back(t, x, y, 1);
          ref += cfg.c_pos;
        }
        while (ref - level >= cfg.c_neg - tol) {
          out.emplace_back(t, x, y, -1);
          ref -= cfg.c_neg;
        }
      }
    }
  std::sort(out.begin(), out.end());
  return out;
}

/// Size of the symmetric multiset difference.
inline std::size_t symmetric_difference(const std::vector<EventKey>& a, const std::vector<EventKey>& b) {
  std::vector<EventKey> d;
  std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(d));
  return d.size();
}

/// Channel c takes the newest floor(n / 2^c) events; each spreads its
/// polarity over the four surrounding pixels.
inline std::vector<double> naive_stack(const EventWindow& w, int bins) {
  const int W = w.geometry().width, H = w.geometry().height;
  std::vector<double> grid(static_cast<std::size_t>(W) * H * bins, 0.0);
  const auto ev = w.events();
  for (int c = 0; c < bins; ++c) {
    std::size_t take = ev.size();
    for (int j = 0; j < c; ++j) take /= 2;
    for (std::size_t i = ev.size() - take; i < ev.size(); ++i) {
      const double x = ev[i].x, y = ev[i].y;
      const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const int px = x0 + dx, py = y0 + dy;
          const double wt = (dx ? x - x0 : 1 - (x - x0)) * (dy ? y - y0 : 1 - (y - y0));
          if (px < 0 || py < 0 || px >= W || py >= H || wt == 0) continue;
          grid[(static_cast<std::size_t>(py) * W + px) * bins + c] += wt * ev[i].polarity;
        }
    }
  }
  return grid;
}

/// Bilinear read of an [H, W, C] map with zeros outside.
inline std::vector<double> naive_sample(const std::vector<double>& map, std::size_t H, std::size_t W, std::size_t C,
                                        double x, double y) {
  std::vector<double> out(C, 0.0);
  const double fx = std::floor(x), fy = std::floor(y);
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const double px = fx + dx, py = fy + dy;
      const double wt = (1 - std::abs(x - px)) * (1 - std::abs(y - py));
      if (px < 0 || py < 0 || px >= static_cast<double>(W) || py >= static_cast<double>(H)) continue;
      const auto base = (static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px)) * C;
      for (std::size_t c = 0; c < C; ++c) out[c] += wt * map[base + c];
    }
  return out;
}

/// Nested-loop correlation: level, then dy, then dx.
inline std::vector<double> naive_correlation(const std::vector<double>& q, const FeaturePyramid& pyr, double x,
                                             double y, int radius) {
  std::vector<double> out;
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const auto& map = pyr.levels[l];
    const double s = static_cast<double>(pyr.base_stride) * std::pow(2.0, static_cast<double>(l));
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        const auto f = naive_sample(map.value(), map.dim(0), map.dim(1), map.dim(2), x / s + dx, y / s + dy);
        double dot = 0.0;
        for (std::size_t c = 0; c < q.size(); ++c) dot += q[c] * f[c];
        out.push_back(dot);
      }
  }
  return out;
}

inline double naive_track_loss(const std::vector<std::vector<double>>& preds, const std::vector<double>& gt,
                               const std::vector<std::uint8_t>& valid) {
  const std::size_t M = preds.size();
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    double sum = 0.0;
    double n = 0.0;
    for (std::size_t r = 0; r < valid.size(); ++r) {
      if (!valid[r]) continue;
      n += 1;
      sum += std::abs(preds[m][2 * r] - gt[2 * r]) + std::abs(preds[m][2 * r + 1] - gt[2 * r + 1]);
    }
    double w = 1.0;
    for (std::size_t j = m + 1; j < M; ++j) w *= 0.8;
    total += w * sum / n;
  }
  return total;
}

inline double naive_visibility_loss(const std::vector<double>& logits, const std::vector<std::uint8_t>& gt,
                                    const std::vector<std::uint8_t>& valid) {
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!valid[i]) continue;
    const double z = std::min(30.0, std::max(-30.0, logits[i]));
    const double p = 1.0 / (1.0 + std::exp(-z));
    sum += gt[i] ? -std::log(p) : -std::log(1.0 - p);
    n += 1;
  }
  return sum / n;
}

struct TapOracle {
  std::vector<double> delta;
  std::vector<double> jaccard;
  double delta_avg = 0, oa = 0, aj = 0;
};

/// Entry-by-entry evaluation with explicit counters per threshold.
inline TapOracle enumerate_tap(const TrackSet& pred, const TrackSet& gt, Geometry g,
                               const std::vector<double>& thresholds, double ref_res = 512.0) {
  TapOracle o;
  const double scale = static_cast<double>(std::min(g.width, g.height)) / ref_res;
  double flags_ok = 0, flags_n = 0;
  for (double th_ref : thresholds) {
    const double th = th_ref * scale;
    double in = 0, vis = 0, tp = 0, fp = 0, fn = 0;
    for (std::size_t p = 0; p < gt.num_points(); ++p)
      for (std::size_t t = 0; t < gt.num_steps(); ++t) {
        const std::size_t k = p * gt.num_steps() + t;
        if (!gt.valid[k]) continue;
        const double dx = pred.x[k] - gt.x[k], dy = pred.y[k] - gt.y[k];
        const bool close = std::sqrt(dx * dx + dy * dy) < th;
        const bool gv = gt.visible[k] == 1, pv = pred.visible[k] == 1;
        if (gv) {
          vis += 1;
          if (close) in += 1;
        }
        if (gv && pv && close) tp += 1;
        else if (pv) fp += 1;
        if (gv && !(pv && close)) fn += 1;
      }
    o.delta.push_back(in / vis);
    o.jaccard.push_back(tp + fp + fn > 0 ? tp / (tp + fp + fn) : 1.0);
  }
  for (std::size_t k = 0; k < gt.valid.size(); ++k) {
    if (!gt.valid[k]) continue;
    flags_n += 1;
    if (pred.visible[k] == gt.visible[k]) flags_ok += 1;
  }
  for (double d : o.delta) o.delta_avg += d / static_cast<double>(o.delta.size());
  for (double j : o.jaccard) o.aj += j / static_cast<double>(o.jaccard.size());
  o.oa = flags_ok / flags_n;
  return o;
}

struct AgeOracle {
  std::vector<double> ages;
  double fa = 0, expected_fa = 0;
};

/// Walks each track forward until the error first exceeds the threshold.
inline AgeOracle enumerate_feature_age(const TrackSet& pred, const TrackSet& gt, double threshold) {
  AgeOracle o;
  double alive_sum = 0, alive_n = 0, wsum = 0, dsum = 0;
  for (std::size_t p = 0; p < gt.num_points(); ++p) {
    std::vector<std::size_t> steps;
    for (std::size_t t = 0; t < gt.num_steps(); ++t)
      if (gt.valid[p * gt.num_steps() + t]) steps.push_back(t);
    if (steps.size() < 2) {
      o.ages.push_back(std::nan(""));
      continue;
    }
    const double start = static_cast<double>(gt.timestamps_us[steps.front()]);
    const double dur = static_cast<double>(gt.timestamps_us[steps.back()]) - start;
    double age = 1.0;
    for (std::size_t t : steps) {
      const std::size_t k = p * gt.num_steps() + t;
      if (std::hypot(pred.x[k] - gt.x[k], pred.y[k] - gt.y[k]) > threshold) {
        age = (static_cast<double>(gt.timestamps_us[t]) - start) / dur;
        break;
      }
    }
    o.ages.push_back(age);
    wsum += age * dur;
    dsum += dur;
    if (age > 0) {
      alive_sum += age;
      alive_n += 1;
    }
  }
  o.fa = alive_n > 0 ? alive_sum / alive_n : 0.0;
  o.expected_fa = wsum / dsum;
  return o;
}

}  // namespace etap::oracle
