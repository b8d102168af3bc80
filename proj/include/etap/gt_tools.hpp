#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "etap/event_core.hpp"
#include "etap/event_sim.hpp"
#include "etap/image.hpp"
#include "etap/tracker.hpp"

namespace etap {

// ---------------------------------------------------------------------------
// Textures

/// Sum of random plane waves with spatial frequency in [f_min, f_max]
/// cycles/px, so the texture has edges in every direction but no aliasing.
struct Texture {
  struct Wave {
    double kx, ky, phase, amp;
  };
  double mean = 0.5;
  std::vector<Wave> waves;

  double eval(double u, double v) const {
    double s = mean;
    for (const auto& w : waves) s += w.amp * std::cos(w.kx * u + w.ky * v + w.phase);
    return std::clamp(s, 0.02, 0.98);
  }
};

inline Texture make_texture(std::uint64_t seed, double mean = 0.5, double contrast = 0.3, double f_min = 0.03,
                            double f_max = 0.12, int count = 24) {
  require(count >= 1 && f_min > 0 && f_max >= f_min && contrast >= 0, ErrorCode::ConfigInvalid,
          "invalid texture parameters");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi), freq(f_min, f_max);
  Texture t;
  t.mean = mean;
  const double amp = contrast * std::sqrt(2.0 / count);
  for (int i = 0; i < count; ++i) {
    const double a = angle(rng), f = 2.0 * std::numbers::pi * freq(rng);
    t.waves.push_back({f * std::cos(a), f * std::sin(a), angle(rng), amp});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Toy scenes

enum class SpriteShape { Rectangle, Disk };

/// Rigid textured sprite. World position of local point p at time t (s) is
/// center + velocity t + R(angle + omega t) p.
struct SpriteSpec {
  SpriteShape shape = SpriteShape::Rectangle;
  double half_w = 8.0;  // radius for disks
  double half_h = 8.0;
  double cx = 0.0, cy = 0.0;
  double vx = 0.0, vy = 0.0;  // px/s
  double angle = 0.0;
  double omega = 0.0;  // rad/s
  std::uint64_t texture_seed = 1;
  double texture_mean = 0.5;
};

struct ToySceneConfig {
  int width = 64;
  int height = 64;
  std::int64_t duration_us = 100000;
  double base_fps = 100.0;
  std::uint64_t background_seed = 0;
  double background_vx = 0.0, background_vy = 0.0;  // px/s
  double texture_contrast = 0.3;
  double f_min = 0.03, f_max = 0.12;
  std::vector<SpriteSpec> sprites;  // later entries are drawn on top

  void validate() const {
    require(width >= 2 && height >= 2, ErrorCode::ConfigInvalid, "scene must be at least 2x2");
    require(duration_us > 0 && base_fps > 0, ErrorCode::ConfigInvalid, "duration and fps must be positive");
    for (const auto& s : sprites) {
      require(s.half_w > 0 && s.half_h > 0, ErrorCode::ConfigInvalid, "sprite extents must be positive");
      require(std::isfinite(s.vx) && std::isfinite(s.vy) && std::isfinite(s.omega), ErrorCode::ConfigInvalid,
              "sprite motion must be finite");
    }
  }

  /// Largest displacement of any scene point between base frames, in px.
  double max_displacement_per_frame() const {
    double v = std::hypot(background_vx, background_vy);
    for (const auto& s : sprites) {
      v = std::max(v, std::hypot(s.vx, s.vy) + std::abs(s.omega) * std::hypot(s.half_w, s.half_h));
    }
    return v / base_fps;
  }
};

/// Which layer a tracked point belongs to: -1 background, otherwise a sprite.
struct LayerPoint {
  int layer = -1;
  double u = 0.0, v = 0.0;  // layer-local coordinates
};

class ToyScene {
 public:
  explicit ToyScene(ToySceneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    background_ = make_texture(cfg_.background_seed, 0.5, cfg_.texture_contrast, cfg_.f_min, cfg_.f_max);
    for (const auto& s : cfg_.sprites) {
      textures_.push_back(make_texture(s.texture_seed, s.texture_mean, cfg_.texture_contrast, cfg_.f_min, cfg_.f_max));
    }
  }

  const ToySceneConfig& config() const { return cfg_; }
  Geometry geometry() const { return {cfg_.width, cfg_.height}; }

  std::pair<double, double> world(const LayerPoint& p, double t_s) const {
    if (p.layer < 0) return {p.u + cfg_.background_vx * t_s, p.v + cfg_.background_vy * t_s};
    const SpriteSpec& s = cfg_.sprites[static_cast<std::size_t>(p.layer)];
    const double a = s.angle + s.omega * t_s, c = std::cos(a), sn = std::sin(a);
    return {s.cx + s.vx * t_s + c * p.u - sn * p.v, s.cy + s.vy * t_s + sn * p.u + c * p.v};
  }

  /// Local coordinates of world point (x, y) in `layer` at time t.
  LayerPoint local(int layer, double x, double y, double t_s) const {
    if (layer < 0) return {layer, x - cfg_.background_vx * t_s, y - cfg_.background_vy * t_s};
    const SpriteSpec& s = cfg_.sprites[static_cast<std::size_t>(layer)];
    const double a = s.angle + s.omega * t_s, c = std::cos(a), sn = std::sin(a);
    const double dx = x - s.cx - s.vx * t_s, dy = y - s.cy - s.vy * t_s;
    return {layer, c * dx + sn * dy, -sn * dx + c * dy};
  }

  bool inside(const LayerPoint& p) const {
    if (p.layer < 0) return true;
    const SpriteSpec& s = cfg_.sprites[static_cast<std::size_t>(p.layer)];
    if (s.shape == SpriteShape::Disk) return p.u * p.u + p.v * p.v <= s.half_w * s.half_w;
    return std::abs(p.u) <= s.half_w && std::abs(p.v) <= s.half_h;
  }

  /// Topmost layer covering world point (x, y) at time t.
  int top_layer(double x, double y, double t_s) const {
    for (int k = static_cast<int>(cfg_.sprites.size()) - 1; k >= 0; --k) {
      if (inside(local(k, x, y, t_s))) return k;
    }
    return -1;
  }

  double intensity(double x, double y, double t_s) const {
    const int k = top_layer(x, y, t_s);
    const LayerPoint p = local(k, x, y, t_s);
    return k < 0 ? background_.eval(p.u, p.v) : textures_[static_cast<std::size_t>(k)].eval(p.u, p.v);
  }

  Image render(std::int64_t t_us) const {
    Image img(cfg_.width, cfg_.height);
    const double t = static_cast<double>(t_us) * 1e-6;
    for (int y = 0; y < cfg_.height; ++y)
      for (int x = 0; x < cfg_.width; ++x) img.at(x, y) = intensity(x, y, t);
    return img;
  }

  /// Visible when in frame and not covered by a higher layer.
  bool visible(const LayerPoint& p, double t_s) const {
    const auto [x, y] = world(p, t_s);
    if (x < 0 || y < 0 || x > cfg_.width - 1 || y > cfg_.height - 1) return false;
    return top_layer(x, y, t_s) == p.layer;
  }

  /// Frame rate multiplier so that no point moves more than 1 px per frame.
  int upsample_factor() const { return required_upsample_factor(cfg_.max_displacement_per_frame()); }

  /// Frames rendered directly at the upsampled rate over [0, duration].
  FrameSequence frames() const {
    const double dt = 1e6 / (cfg_.base_fps * upsample_factor());
    FrameSequence seq;
    for (std::int64_t k = 0;; ++k) {
      const auto t = static_cast<std::int64_t>(std::llround(static_cast<double>(k) * dt));
      if (t > cfg_.duration_us) break;
      if (!seq.timestamps_us.empty() && t <= seq.timestamps_us.back()) continue;
      seq.timestamps_us.push_back(t);
      seq.frames.push_back(render(t));
    }
    return seq;
  }

  /// Track of a layer point over the schedule; entries before `query_index`
  /// are invalid.
  void fill_track(TrackSet& set, std::size_t point, const LayerPoint& p, std::size_t query_index) const {
    for (std::size_t t = 0; t < set.num_steps(); ++t) {
      const double ts = static_cast<double>(set.timestamps_us[t]) * 1e-6;
      const auto [x, y] = world(p, ts);
      const std::size_t k = set.idx(point, t);
      set.x[k] = x;
      set.y[k] = y;
      set.valid[k] = static_cast<std::uint8_t>(t >= query_index);
      set.visible[k] = static_cast<std::uint8_t>(visible(p, ts));
    }
  }

  /// Ground truth for every pixel centre at the first scheduled time.
  TrackSet dense_tracks(const std::vector<std::int64_t>& schedule) const {
    require(!schedule.empty(), ErrorCode::InvalidArgument, "empty schedule");
    TrackSet set = TrackSet::empty_like(schedule, static_cast<std::size_t>(cfg_.width) * cfg_.height);
    const double t0 = static_cast<double>(schedule.front()) * 1e-6;
    for (int y = 0; y < cfg_.height; ++y)
      for (int x = 0; x < cfg_.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * cfg_.width + x;
        fill_track(set, i, local(top_layer(x, y, t0), x, y, t0), 0);
      }
    return set;
  }

 private:
  ToySceneConfig cfg_;
  Texture background_;
  std::vector<Texture> textures_;
};

inline ToyScene generate_toy_scene(const ToySceneConfig& cfg) { return ToyScene(cfg); }

struct QuerySample {
  std::vector<QueryPoint> queries;
  std::vector<LayerPoint> points;
  TrackSet gt;
};

/// Samples n tracks: ceil(fraction * n) on sprites, the rest uniformly over
/// the frame at the first scheduled time. The query time is the first
/// visible timestep of each track.
template <typename Rng>
QuerySample sample_query_tracks(const ToyScene& scene, const std::vector<std::int64_t>& schedule, std::size_t n,
                                double foreground_fraction, Rng& rng) {
  require(foreground_fraction >= 0.0 && foreground_fraction <= 1.0, ErrorCode::InvalidArgument,
          "foreground fraction must be in [0, 1]");
  require(!schedule.empty(), ErrorCode::InvalidArgument, "empty schedule");
  const auto n_fg = static_cast<std::size_t>(std::ceil(foreground_fraction * static_cast<double>(n) - 1e-9));
  const auto& sprites = scene.config().sprites;
  const Geometry g = scene.geometry();
  std::uniform_real_distribution<double> ux(0.0, g.width - 1.0), uy(0.0, g.height - 1.0), unit(-1.0, 1.0);

  auto first_visible = [&](const LayerPoint& p) -> std::optional<std::size_t> {
    for (std::size_t t = 0; t < schedule.size(); ++t) {
      if (scene.visible(p, static_cast<double>(schedule[t]) * 1e-6)) return t;
    }
    return std::nullopt;
  };

  QuerySample out;
  std::vector<std::size_t> query_index;
  const std::size_t max_attempts = 1000 * std::max<std::size_t>(n, 1);
  std::size_t attempts = 0;
  while (out.points.size() < n_fg) {
    if (sprites.empty() || ++attempts > max_attempts) {
      fail(ErrorCode::InsufficientForeground, "could only place " + std::to_string(out.points.size()) + " of " +
                                                  std::to_string(n_fg) + " foreground queries");
    }
    const int k = std::uniform_int_distribution<int>(0, static_cast<int>(sprites.size()) - 1)(rng);
    const SpriteSpec& s = sprites[static_cast<std::size_t>(k)];
    LayerPoint p{k, unit(rng) * s.half_w, unit(rng) * (s.shape == SpriteShape::Disk ? s.half_w : s.half_h)};
    if (!scene.inside(p)) continue;
    if (auto t = first_visible(p)) {
      out.points.push_back(p);
      query_index.push_back(*t);
    }
  }
  attempts = 0;
  const double t0 = static_cast<double>(schedule.front()) * 1e-6;
  while (out.points.size() < n) {
    require(++attempts <= max_attempts, ErrorCode::InvalidArgument, "could not place background queries");
    const double x = ux(rng), y = uy(rng);
    const LayerPoint p = scene.local(scene.top_layer(x, y, t0), x, y, t0);
    out.points.push_back(p);
    query_index.push_back(0);
  }
  out.gt = TrackSet::empty_like(schedule, n);
  for (std::size_t i = 0; i < n; ++i) {
    scene.fill_track(out.gt, i, out.points[i], query_index[i]);
    const std::size_t k = out.gt.idx(i, query_index[i]);
    out.queries.push_back({static_cast<int>(query_index[i]), out.gt.x[k], out.gt.y[k]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotating-pattern ground truth

struct SpinSegment {
  double duration_us = 0.0;
  double omega = 0.0;  // rad/s
};

/// A disk annulus with a `lobes`-fold cosine pattern rotating with a
/// piecewise-constant angular velocity (the last segment continues).
struct SpinnerSceneConfig {
  int width = 96;
  int height = 96;
  double cx = 47.5, cy = 47.5;
  double r_inner = 8.0, r_outer = 40.0;
  int lobes = 3;
  double phase0 = 0.0;
  std::vector<SpinSegment> segments;
  double fps = 2000.0;
  std::int64_t duration_us = 500000;

  double phase(double t_us) const {
    double phi = phase0, t = 0.0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const bool last = i + 1 == segments.size();
      const double d = last ? std::max(t_us - t, 0.0) : std::min(segments[i].duration_us, std::max(t_us - t, 0.0));
      phi += segments[i].omega * d * 1e-6;
      t += segments[i].duration_us;
      if (t_us <= t) break;
    }
    return phi;
  }

  double intensity(double x, double y, double phi) const {
    const double dx = x - cx, dy = y - cy, r = std::hypot(dx, dy);
    if (r < r_inner || r > r_outer) return 0.5;
    return 0.5 + 0.35 * std::cos(lobes * (std::atan2(dy, dx) - phi));
  }

  FrameSequence frames() const {
    require(!segments.empty() && lobes >= 1 && fps > 0, ErrorCode::ConfigInvalid, "invalid spinner scene");
    FrameSequence seq;
    for (std::int64_t k = 0;; ++k) {
      const auto t = static_cast<std::int64_t>(std::llround(static_cast<double>(k) * 1e6 / fps));
      if (t > duration_us) break;
      const double phi = phase(static_cast<double>(t));
      Image img(width, height);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) img.at(x, y) = intensity(x, y, phi);
      seq.frames.push_back(std::move(img));
      seq.timestamps_us.push_back(t);
    }
    return seq;
  }
};

enum class MinimumRefine { None, Parabolic, Vee };

struct SpinnerGtConfig {
  std::size_t hist_events = 20000;
  double hist_rate_hz = 1000.0;
  int lobes = 3;
  double cx = 0.0, cy = 0.0;
  std::vector<double> radii;
  std::vector<double> angles;  // query phases (rad) at the first histogram time
  double output_rate_hz = 330.0;
  int min_half_window = 5;
  double min_prominence = 0.1;  // fraction of the series range
  int direction = 1;            // +1: angle increases with time
  std::int64_t t_start_us = -1;  // first histogram time; -1 = when enough events exist
  MinimumRefine refine = MinimumRefine::Vee;

  void validate() const {
    require(lobes >= 1, ErrorCode::ConfigInvalid, "lobe count must be >= 1");
    require(hist_rate_hz > 0 && output_rate_hz > 0, ErrorCode::ConfigInvalid, "rates must be positive");
    require(hist_events >= 1 && min_half_window >= 1, ErrorCode::ConfigInvalid, "invalid histogram settings");
    require(radii.size() == angles.size(), ErrorCode::ConfigInvalid, "one angle per query radius");
    require(direction == 1 || direction == -1, ErrorCode::ConfigInvalid, "direction must be +1 or -1");
  }
};

struct SpinnerGt {
  std::vector<std::int64_t> hist_times_us;
  std::vector<double> series;      // L2 distance to the first histogram
  std::vector<double> minima_us;   // refined times of completed 1/lobes turns
  std::vector<double> omega;       // rad/s between consecutive zeros
  TrackSet tracks;
};

/// Indices k with series[k] minimal in [k-h, k+h] (fully inside the series)
/// and prominence above `min_prominence` times the series range.
inline std::vector<std::size_t> find_local_minima(const std::vector<double>& s, int half_window,
                                                  double min_prominence) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(s.begin(), s.end());
  const double range = *hi_it - *lo_it;
  if (!(range > 0)) return out;
  const auto h = static_cast<std::size_t>(half_window);
  for (std::size_t k = h; k + h < s.size(); ++k) {
    bool is_min = true;
    for (std::size_t j = k - h; j <= k + h && is_min; ++j) {
      // ties resolve to the earliest index
      if (s[j] < s[k] || (s[j] == s[k] && j < k)) is_min = false;
    }
    if (!is_min) continue;
    double left = s[k], right = s[k];
    for (std::size_t j = k; j-- > 0 && s[j] >= s[k];) left = std::max(left, s[j]);
    for (std::size_t j = k + 1; j < s.size() && s[j] >= s[k]; ++j) right = std::max(right, s[j]);
    if (std::min(left, right) - s[k] > min_prominence * range) out.push_back(k);
  }
  return out;
}

/// Sub-sample offset of a minimum from its two neighbours.
inline double refine_minimum(double a, double b, double c, MinimumRefine mode) {
  if (mode == MinimumRefine::Parabolic) {
    const double den = a - 2 * b + c;
    return den > 0 ? std::clamp(0.5 * (a - c) / den, -0.5, 0.5) : 0.0;
  }
  if (mode == MinimumRefine::Vee) {
    const double den = 2.0 * (std::max(a, c) - b);
    return den > 0 ? std::clamp((a - c) / den, -0.5, 0.5) : 0.0;
  }
  return 0.0;
}

inline SpinnerGt spinner_groundtruth(const EventStream& stream, const SpinnerGtConfig& cfg) {
  cfg.validate();
  auto events = stream.events();
  const Geometry g = stream.geometry();
  require(events.size() >= cfg.hist_events, ErrorCode::InsufficientEvents,
          "stream has fewer events than one histogram");
  const std::int64_t t0 = cfg.t_start_us >= 0 ? cfg.t_start_us : events[cfg.hist_events - 1].t_us;
  const double dt = 1e6 / cfg.hist_rate_hz;
  SpinnerGt out;
  std::vector<double> first;
  for (std::size_t k = 0;; ++k) {
    const auto t = t0 + static_cast<std::int64_t>(std::llround(static_cast<double>(k) * dt));
    if (t > events.back().t_us) break;
    const std::size_t end = stream.count_until(t);
    require(end >= cfg.hist_events || k > 0, ErrorCode::InsufficientEvents,
            "not enough events before the first histogram time");
    if (end < cfg.hist_events) break;
    std::vector<double> h(static_cast<std::size_t>(g.width) * g.height, 0.0);
    for (std::size_t i = end - cfg.hist_events; i < end; ++i) {
      const Event& e = events[i];
      h[static_cast<std::size_t>(std::lround(e.y)) * g.width + static_cast<std::size_t>(std::lround(e.x))] +=
          e.polarity;
    }
    if (k == 0) first = h;
    double ss = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) ss += (h[i] - first[i]) * (h[i] - first[i]);
    out.series.push_back(std::sqrt(ss));
    out.hist_times_us.push_back(t);
  }
  require(out.series.size() >= 2, ErrorCode::InsufficientEvents, "need at least two histograms");

  const auto minima = find_local_minima(out.series, cfg.min_half_window, cfg.min_prominence);
  if (minima.empty()) fail(ErrorCode::NoMinimaFound, "no local minima in the histogram distance series");
  for (std::size_t k : minima) {
    const double off = refine_minimum(out.series[k - 1], out.series[k], out.series[k + 1], cfg.refine);
    out.minima_us.push_back(static_cast<double>(t0) + (static_cast<double>(k) + off) * dt);
  }
  const double step = 2.0 * std::numbers::pi / cfg.lobes;
  double prev = static_cast<double>(t0);
  for (double m : out.minima_us) {
    out.omega.push_back(step / ((m - prev) * 1e-6));
    prev = m;
  }

  // phase at time t by integrating the piecewise-constant velocity
  auto phase_offset = [&](double t) {
    double phi = 0.0, start = static_cast<double>(t0);
    for (std::size_t j = 0; j < out.minima_us.size(); ++j) {
      const double end = out.minima_us[j];
      phi += out.omega[j] * (std::clamp(t, start, end) - start) * 1e-6;
      start = end;
    }
    return cfg.direction * phi;
  };
  std::vector<std::int64_t> times;
  const double out_dt = 1e6 / cfg.output_rate_hz;
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(t0) + static_cast<double>(k) * out_dt;
    if (t > out.minima_us.back()) break;
    times.push_back(static_cast<std::int64_t>(std::llround(t)));
  }
  out.tracks = TrackSet::empty_like(times, cfg.radii.size());
  for (std::size_t i = 0; i < cfg.radii.size(); ++i)
    for (std::size_t t = 0; t < times.size(); ++t) {
      const double phi = cfg.angles[i] + phase_offset(static_cast<double>(times[t]));
      const std::size_t k = out.tracks.idx(i, t);
      out.tracks.x[k] = cfg.cx + cfg.radii[i] * std::cos(phi);
      out.tracks.y[k] = cfg.cy + cfg.radii[i] * std::sin(phi);
      out.tracks.visible[k] = 1;
      out.tracks.valid[k] = 1;
    }
  return out;
}

}  // namespace etap
