#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "etap/event_core.hpp"
#include "etap/io.hpp"

namespace etap {

inline constexpr int kDefaultBins = 10;
inline constexpr double kNormStdFloor = 1e-6;
inline constexpr double kDefaultNoiseSigma = 0.1;

/// H x W x B grid stored channel-last: index (y * W + x) * B + c.
struct EventStack {
  int width = 0;
  int height = 0;
  int bins = 0;
  std::size_t n_events = 0;
  std::int64_t t_end_us = 0;
  std::vector<double> data;

  EventStack() = default;
  EventStack(int w, int h, int b, std::size_t n = 0, std::int64_t t_end = 0)
      : width(w), height(h), bins(b), n_events(n), t_end_us(t_end),
        data(static_cast<std::size_t>(w) * h * b, 0.0) {}

  double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * bins + c]; }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * bins + c];
  }
  Geometry geometry() const { return Geometry{width, height}; }

  double channel_sum(int c) const {
    double s = 0.0;
    for (std::size_t i = static_cast<std::size_t>(c); i < data.size(); i += bins) s += data[i];
    return s;
  }
};

/// Number of events feeding channel c (0-based): floor(N_e / 2^c).
inline std::size_t channel_event_count(std::size_t n_events, int channel) {
  return channel >= 64 ? 0 : (n_events >> channel);
}

namespace detail {

/// Splats `mass` at continuous (x, y) onto the four surrounding pixels.
/// Neighbours outside the grid receive nothing.
inline void splat_bilinear(EventStack& s, double x, double y, int c, double mass) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  const double ax = x - fx0, ay = y - fy0;
  const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (wts[k] == 0.0) continue;
    if (xs[k] < 0 || ys[k] < 0 || xs[k] >= s.width || ys[k] >= s.height) continue;
    s.at(xs[k], ys[k], c) += wts[k] * mass;
  }
}

}  // namespace detail

/// Mixed-density stack: channel c accumulates the floor(N_e / 2^c) most
/// recent events of the window as polarity-signed bilinear histograms.
inline EventStack build_event_stack(const EventWindow& window, int bins = kDefaultBins) {
  require(!window.empty(), ErrorCode::EmptyWindow, "cannot build a stack from an empty window");
  require(bins >= 1, ErrorCode::InvalidArgument, "bins must be >= 1");
  const Geometry g = window.geometry();
  const std::size_t n = window.size();
  EventStack stack(g.width, g.height, bins, n, window.t_end_us());
  auto events = window.events();
  for (std::size_t rank = 0; rank < n; ++rank) {
    const Event& e = events[n - 1 - rank];  // rank 0 is the most recent
    for (int c = 0; c < bins && rank < channel_event_count(n, c); ++c) {
      detail::splat_bilinear(stack, e.x, e.y, c, static_cast<double>(e.polarity));
    }
  }
  return stack;
}

/// Voxel grid over uniform time slices of the window interval. Bin b is
/// centred at normalised time b in [0, bins-1]; each event splits its
/// polarity between the two nearest bins and bilinearly in space.
inline EventStack build_voxel_grid(const EventWindow& window, int bins = kDefaultBins) {
  require(!window.empty(), ErrorCode::EmptyWindow, "cannot build a voxel grid from an empty window");
  require(bins >= 1, ErrorCode::InvalidArgument, "bins must be >= 1");
  const Geometry g = window.geometry();
  EventStack grid(g.width, g.height, bins, window.size(), window.t_end_us());
  const double t_start = static_cast<double>(window.t_end_us() - window.span_us());
  const double span = static_cast<double>(window.span_us());
  for (const Event& e : window.events()) {
    const double tn = (bins == 1) ? 0.0
                      : (span > 0.0 ? (bins - 1) * (static_cast<double>(e.t_us) - t_start) / span
                                    : static_cast<double>(bins - 1));
    const int b0 = static_cast<int>(std::floor(tn));
    const double frac = tn - b0;
    if (b0 >= 0 && b0 < bins && 1.0 - frac > 0.0) {
      detail::splat_bilinear(grid, e.x, e.y, b0, e.polarity * (1.0 - frac));
    }
    if (b0 + 1 < bins && frac > 0.0) detail::splat_bilinear(grid, e.x, e.y, b0 + 1, e.polarity * frac);
  }
  return grid;
}

struct StackBatch {
  std::vector<EventStack> stacks;
  std::vector<double> channel_mean;
  std::vector<double> channel_std;
};

/// Per-channel standardisation with statistics pooled over every stack and
/// pixel in the batch.
inline StackBatch normalize_batch(StackBatch batch) {
  require(!batch.stacks.empty(), ErrorCode::InvalidArgument, "empty stack batch");
  const EventStack& first = batch.stacks.front();
  const int bins = first.bins;
  for (const auto& s : batch.stacks) {
    require(s.bins == bins && s.width == first.width && s.height == first.height,
            ErrorCode::ShapeMismatch, "stacks in a batch must share geometry and bins");
  }
  std::vector<double> sum(bins, 0.0), sq(bins, 0.0);
  std::size_t count = 0;
  for (const auto& s : batch.stacks) {
    for (std::size_t i = 0; i < s.data.size(); ++i) sum[i % bins] += s.data[i];
    count += s.data.size() / bins;
  }
  std::vector<double> mean(bins), stdev(bins);
  for (int c = 0; c < bins; ++c) mean[c] = sum[c] / static_cast<double>(count);
  for (const auto& s : batch.stacks) {
    for (std::size_t i = 0; i < s.data.size(); ++i) {
      const double d = s.data[i] - mean[i % bins];
      sq[i % bins] += d * d;
    }
  }
  for (int c = 0; c < bins; ++c) {
    stdev[c] = std::max(std::sqrt(sq[c] / static_cast<double>(count)), kNormStdFloor);
  }
  for (auto& s : batch.stacks) {
    for (std::size_t i = 0; i < s.data.size(); ++i) {
      const auto c = i % bins;
      s.data[i] = (s.data[i] - mean[c]) / stdev[c];
    }
  }
  batch.channel_mean = std::move(mean);
  batch.channel_std = std::move(stdev);
  return batch;
}

/// Noise std for channel c: sigma scaled by that channel's share of events.
inline double noise_std_for_channel(double sigma, int channel) {
  return sigma / static_cast<double>(std::uint64_t{1} << channel);
}

template <typename Rng>
EventStack add_noise(EventStack stack, double sigma, Rng& rng) {
  require(sigma >= 0.0, ErrorCode::InvalidArgument, "noise sigma must be >= 0");
  if (sigma == 0.0) return stack;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < stack.data.size(); ++i) {
    const int c = static_cast<int>(i % stack.bins);
    // n_c / N_e uses the exact floor counts, which equals 2^-c up to rounding.
    const double share = stack.n_events > 0
                             ? static_cast<double>(channel_event_count(stack.n_events, c)) /
                                   static_cast<double>(stack.n_events)
                             : std::ldexp(1.0, -c);
    stack.data[i] += sigma * share * normal(rng);
  }
  return stack;
}

/// Rotates the grid by quarter turns with the same pixel mapping as
/// rotate_events, so stacks of integer-coordinate events commute with it.
inline EventStack rotate_stack(const EventStack& stack, QuarterTurn turn) {
  const Geometry g = stack.geometry();
  const Geometry rg = rotated_geometry(g, turn);
  EventStack out(rg.width, rg.height, stack.bins, stack.n_events, stack.t_end_us);
  for (int y = 0; y < stack.height; ++y)
    for (int x = 0; x < stack.width; ++x) {
      const auto [rx, ry] = rotate_point(x, y, g, turn);
      const int ix = static_cast<int>(std::lround(rx)), iy = static_cast<int>(std::lround(ry));
      for (int c = 0; c < stack.bins; ++c) out.at(ix, iy, c) = stack.at(x, y, c);
    }
  return out;
}

/// Flat little-endian f32 dump (HWC order) plus a JSON sidecar.
inline void export_stack(const EventStack& stack, const std::filesystem::path& bin_path,
                         const std::filesystem::path& json_path) {
  std::string blob;
  blob.reserve(stack.data.size() * 4);
  for (double v : stack.data) io::put_le<float>(blob, static_cast<float>(v));
  io::write_atomic(bin_path, blob);
  nlohmann::json meta = {{"W", stack.width},     {"H", stack.height},
                         {"B", stack.bins},      {"t_end_us", stack.t_end_us},
                         {"n_events", stack.n_events}, {"layout", "HWC"},
                         {"dtype", "f32"}};
  io::write_atomic(json_path, meta.dump(2) + "\n");
}

}  // namespace etap
