#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "etap/event_core.hpp"
#include "etap/image.hpp"
#include "etap/io.hpp"
#include "etap/parallel.hpp"

namespace etap {

/// Frames with strictly increasing microsecond timestamps.
struct FrameSequence {
  std::vector<Image> frames;
  std::vector<std::int64_t> timestamps_us;

  Geometry geometry() const {
    return frames.empty() ? Geometry{} : Geometry{frames.front().width, frames.front().height};
  }

  void validate() const {
    require(frames.size() >= 2, ErrorCode::InvalidArgument, "need at least two frames");
    require(frames.size() == timestamps_us.size(), ErrorCode::InvalidArgument,
            "frame and timestamp counts differ");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      require(frames[i].width == frames[0].width && frames[i].height == frames[0].height,
              ErrorCode::ShapeMismatch, "frame " + std::to_string(i) + " has a different size");
      require(i == 0 || timestamps_us[i] > timestamps_us[i - 1], ErrorCode::InvalidArgument,
              "timestamps must increase strictly");
    }
  }
};

struct ContrastConfig {
  double c_pos = 0.2;
  double c_neg = 0.2;
  double log_eps = 1e-3;

  void validate() const {
    require(c_pos > 0 && c_neg > 0 && log_eps > 0, ErrorCode::InvalidArgument,
            "contrast thresholds and log offset must be positive");
  }
};

inline constexpr double kContrastLo = 0.16;
inline constexpr double kContrastHi = 0.34;
inline constexpr double kDefaultLogEps = 1e-3;

/// Draws one contrast sensitivity C ~ U(lo, hi) shared by both polarities.
template <typename Rng>
ContrastConfig sample_threshold(Rng& rng, double lo = kContrastLo, double hi = kContrastHi,
                                double log_eps = kDefaultLogEps) {
  if (!(lo > 0.0) || !(lo <= hi)) {
    fail(ErrorCode::InvalidRange, "contrast range must satisfy 0 < lo <= hi");
  }
  double c = lo;
  if (hi > lo) c = std::uniform_real_distribution<double>(lo, hi)(rng);
  return ContrastConfig{c, c, log_eps};
}

inline Image log_intensity(const Image& frame, double log_eps = kDefaultLogEps) {
  Image out(frame.width, frame.height);
  for (std::size_t i = 0; i < frame.data.size(); ++i) out.data[i] = std::log(frame.data[i] + log_eps);
  return out;
}

/// Inserts factor-1 intensity-interpolated frames between each pair.
inline FrameSequence upsample_linear(const FrameSequence& seq, int factor) {
  require(factor >= 1, ErrorCode::InvalidArgument, "upsampling factor must be >= 1");
  seq.validate();
  if (factor == 1) return seq;
  FrameSequence out;
  for (std::size_t k = 0; k + 1 < seq.frames.size(); ++k) {
    const Image& a = seq.frames[k];
    const Image& b = seq.frames[k + 1];
    const std::int64_t t0 = seq.timestamps_us[k];
    const std::int64_t dt = seq.timestamps_us[k + 1] - t0;
    require(dt >= factor, ErrorCode::InvalidArgument,
            "frame interval too short for integer-microsecond upsampling");
    for (int j = 0; j < factor; ++j) {
      const double alpha = static_cast<double>(j) / factor;
      Image f(a.width, a.height);
      for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = (1.0 - alpha) * a.data[i] + alpha * b.data[i];
      out.frames.push_back(std::move(f));
      out.timestamps_us.push_back(t0 + dt * j / factor);
    }
  }
  out.frames.push_back(seq.frames.back());
  out.timestamps_us.push_back(seq.timestamps_us.back());
  return out;
}

/// Smallest integer factor that brings a per-frame displacement down to <= 1 px.
inline int required_upsample_factor(double max_displacement_px) {
  return std::max(1, static_cast<int>(std::ceil(max_displacement_px - 1e-12)));
}

struct SimOptions {
  /// Abort with NotUpsampled if any pixel's log intensity changes by more
  /// than this between consecutive frames. Zero disables the check.
  double max_log_step = 0.0;
  /// Slack on the threshold comparison so an exact multiple of C fires.
  double threshold_tolerance = 1e-9;
  std::size_t threads = 1;
};

namespace detail {

/// Log level of one pixel at integer time t inside the interval (t0, t1].
inline double interpolated_level(double l0, double l1, std::int64_t t0, std::int64_t t1, std::int64_t t) {
  return l0 + (l1 - l0) * (static_cast<double>(t - t0) / static_cast<double>(t1 - t0));
}

struct PixelEvent {
  std::int64_t t_us;
  std::int8_t polarity;
};

/// Integrates one pixel. An event fires at the first integer microsecond at
/// which the interpolated log level is at least C away from the reference;
/// the reference then moves by exactly C.
inline void integrate_pixel(const std::vector<double>& levels, const std::vector<std::int64_t>& ts,
                            const ContrastConfig& cfg, double tol, std::vector<PixelEvent>& out) {
  double ref = levels[0];
  for (std::size_t k = 0; k + 1 < levels.size(); ++k) {
    const double l0 = levels[k], l1 = levels[k + 1];
    const std::int64_t t0 = ts[k], t1 = ts[k + 1];
    std::int64_t lo = t0 + 1;
    auto level = [&](std::int64_t t) { return interpolated_level(l0, l1, t0, t1, t); };
    const double end_level = level(t1);
    for (int sign : {+1, -1}) {
      const double c = sign > 0 ? cfg.c_pos : cfg.c_neg;
      auto fired = [&](std::int64_t t) { return sign * (level(t) - ref) >= c - tol; };
      while (sign * (end_level - ref) >= c - tol) {
        // First crossing estimate from the analytic line, then settle on the
        // exact integer boundary of the predicate (monotone within the interval).
        const double target = ref + sign * (c - tol);
        double frac = (l1 != l0) ? (target - l0) / (l1 - l0) : 1.0;
        frac = std::clamp(frac, 0.0, 1.0);
        auto tc = static_cast<std::int64_t>(std::ceil(static_cast<double>(t0) + frac * static_cast<double>(t1 - t0)));
        tc = std::clamp(tc, lo, t1);
        while (tc > lo && fired(tc - 1)) --tc;
        while (tc < t1 && !fired(tc)) ++tc;
        out.push_back(PixelEvent{tc, static_cast<std::int8_t>(sign)});
        ref += sign * c;
        lo = tc;
      }
    }
  }
}

}  // namespace detail

/// Converts frames to events with a per-pixel log-intensity integrator,
/// linear in log between frames and without refractory period.
inline EventStream simulate_events(const FrameSequence& seq, const ContrastConfig& cfg,
                                   const SimOptions& options = {}) {
  seq.validate();
  cfg.validate();
  const Geometry g = seq.geometry();
  std::vector<Image> logs;
  logs.reserve(seq.frames.size());
  for (const Image& f : seq.frames) logs.push_back(log_intensity(f, cfg.log_eps));

  if (options.max_log_step > 0.0) {
    for (std::size_t k = 0; k + 1 < logs.size(); ++k) {
      for (std::size_t i = 0; i < logs[k].data.size(); ++i) {
        if (std::abs(logs[k + 1].data[i] - logs[k].data[i]) > options.max_log_step) {
          fail(ErrorCode::NotUpsampled, "log change between frames " + std::to_string(k) + " and " +
                                            std::to_string(k + 1) + " exceeds " +
                                            io::format_double(options.max_log_step));
        }
      }
    }
  }

  std::vector<std::vector<Event>> rows(static_cast<std::size_t>(g.height));
  parallel_for(rows.size(), options.threads, [&](std::size_t y) {
    std::vector<double> levels(logs.size());
    std::vector<detail::PixelEvent> pixel;
    for (int x = 0; x < g.width; ++x) {
      for (std::size_t k = 0; k < logs.size(); ++k) levels[k] = logs[k].at(x, static_cast<int>(y));
      pixel.clear();
      detail::integrate_pixel(levels, seq.timestamps_us, cfg, options.threshold_tolerance, pixel);
      for (const auto& pe : pixel) {
        rows[y].push_back(Event{static_cast<float>(x), static_cast<float>(y), pe.t_us, pe.polarity});
      }
    }
  });

  std::vector<Event> events;
  for (auto& r : rows) events.insert(events.end(), r.begin(), r.end());
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  return EventStream(g, std::move(events));
}

// Frame directories: frame_NNNNNN.{pgm,png} plus manifest.csv with `index,t_us`.

inline std::string frame_filename(std::size_t index, const std::string& ext = ".pgm") {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06zu", index);
  return std::string(buf) + ext;
}

inline FrameSequence read_frame_directory(const std::filesystem::path& dir) {
  const io::CsvTable table = io::parse_csv(io::read_text(dir / "manifest.csv"));
  const std::size_t ci = table.column("index"), ct = table.column("t_us");
  FrameSequence seq;
  for (const auto& row : table.rows) {
    const auto index = static_cast<std::size_t>(io::to_int(row[ci]));
    std::filesystem::path path = dir / frame_filename(index, ".pgm");
    if (!std::filesystem::exists(path)) path = dir / frame_filename(index, ".png");
    seq.frames.push_back(read_image(path));
    seq.timestamps_us.push_back(io::to_int(row[ct]));
  }
  seq.validate();
  return seq;
}

inline void write_frame_directory(const std::filesystem::path& dir, const FrameSequence& seq) {
  std::filesystem::create_directories(dir);
  std::string manifest = "index,t_us\n";
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    io::write_atomic(dir / frame_filename(i), encode_pgm(seq.frames[i]));
    manifest += std::to_string(i) + "," + std::to_string(seq.timestamps_us[i]) + "\n";
  }
  io::write_atomic(dir / "manifest.csv", manifest);
}

}  // namespace etap
