#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "etap/error.hpp"

namespace etap {

/// Sensor geometry in pixels.
struct Geometry {
  int width = 0;
  int height = 0;

  bool contains(double x, double y) const noexcept {
    return x >= 0.0 && y >= 0.0 && x < width && y < height;
  }
  friend bool operator==(const Geometry&, const Geometry&) = default;
};

/// One brightness-change report. Coordinates are continuous so rescaled
/// streams can be represented; the simulator only emits integer positions.
struct Event {
  float x = 0.0F;
  float y = 0.0F;
  std::int64_t t_us = 0;
  std::int8_t polarity = 1;

  friend bool operator==(const Event&, const Event&) = default;
};

namespace detail {

inline void validate_events(std::span<const Event> events, Geometry geometry) {
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    require(e.polarity == 1 || e.polarity == -1, ErrorCode::InvalidArgument,
            [&] { return "event " + std::to_string(i) + " has polarity " + std::to_string(e.polarity); });
    require(geometry.contains(e.x, e.y), ErrorCode::InvalidArgument,
            [&] {
              return "event " + std::to_string(i) + " outside " + std::to_string(geometry.width) + "x" +
                     std::to_string(geometry.height);
            });
    require(i == 0 || events[i - 1].t_us <= e.t_us, ErrorCode::InvalidArgument,
            [&] { return "timestamps decrease at event " + std::to_string(i); });
  }
}

}  // namespace detail

/// Time-ordered event sequence over a fixed sensor geometry.
class EventStream {
 public:
  EventStream() = default;
  EventStream(Geometry geometry, std::vector<Event> events)
      : geometry_(geometry), events_(std::move(events)) {
    require(geometry.width > 0 && geometry.height > 0, ErrorCode::InvalidArgument,
            "stream geometry must be positive");
    detail::validate_events(events_, geometry_);
  }

  Geometry geometry() const noexcept { return geometry_; }
  std::span<const Event> events() const noexcept { return events_; }
  std::size_t size() const noexcept { return events_.size(); }
  bool empty() const noexcept { return events_.empty(); }

  /// Number of events with t_us <= t.
  std::size_t count_until(std::int64_t t) const {
    auto it = std::upper_bound(events_.begin(), events_.end(), t,
                               [](std::int64_t v, const Event& e) { return v < e.t_us; });
    return static_cast<std::size_t>(it - events_.begin());
  }

  friend bool operator==(const EventStream&, const EventStream&) = default;

 private:
  Geometry geometry_{};
  std::vector<Event> events_;
};

/// Time-aligned slice of a stream ending at t_end_us. Events lie in
/// [t_end_us - span_us, t_end_us].
class EventWindow {
 public:
  EventWindow() = default;
  EventWindow(Geometry geometry, std::vector<Event> events, std::int64_t t_end_us,
              std::int64_t span_us)
      : geometry_(geometry), events_(std::move(events)), t_end_us_(t_end_us), span_us_(span_us) {
    require(span_us >= 0, ErrorCode::InvalidArgument, "negative window span");
    detail::validate_events(events_, geometry_);
    for (const Event& e : events_) {
      require(e.t_us <= t_end_us && e.t_us >= t_end_us - span_us, ErrorCode::InvalidArgument,
              "event timestamp outside window interval");
    }
  }

  Geometry geometry() const noexcept { return geometry_; }
  std::span<const Event> events() const noexcept { return events_; }
  std::size_t size() const noexcept { return events_.size(); }
  bool empty() const noexcept { return events_.empty(); }
  std::int64_t t_end_us() const noexcept { return t_end_us_; }
  std::int64_t span_us() const noexcept { return span_us_; }

  friend bool operator==(const EventWindow&, const EventWindow&) = default;

 private:
  Geometry geometry_{};
  std::vector<Event> events_;
  std::int64_t t_end_us_ = 0;
  std::int64_t span_us_ = 0;
};

/// The n_events most recent events with t_us <= t_end_us, in stream order.
inline EventWindow select_window(const EventStream& stream, std::int64_t t_end_us,
                                 std::size_t n_events) {
  require(n_events > 0, ErrorCode::InvalidArgument, "window needs at least one event");
  const std::size_t end = stream.count_until(t_end_us);
  if (end < n_events) {
    fail(ErrorCode::InsufficientEvents, "only " + std::to_string(end) + " events precede t=" +
                                            std::to_string(t_end_us) + " us, need " +
                                            std::to_string(n_events));
  }
  auto all = stream.events();
  std::vector<Event> events(all.begin() + static_cast<std::ptrdiff_t>(end - n_events),
                            all.begin() + static_cast<std::ptrdiff_t>(end));
  const std::int64_t span = t_end_us - events.front().t_us;
  return EventWindow(stream.geometry(), std::move(events), t_end_us, span);
}

/// Replays the window backwards: t -> 2*mid - t with flipped polarity.
/// Reversing the sequence keeps it sorted and makes the map an exact involution.
inline EventWindow invert_time(const EventWindow& window) {
  require(!window.empty(), ErrorCode::EmptyWindow, "cannot invert an empty window");
  // 2 * midpoint = 2 * t_end - span, kept in integers.
  const std::int64_t twice_mid = 2 * window.t_end_us() - window.span_us();
  std::vector<Event> out;
  out.reserve(window.size());
  auto in = window.events();
  for (auto it = in.rbegin(); it != in.rend(); ++it) {
    out.push_back(Event{it->x, it->y, twice_mid - it->t_us, static_cast<std::int8_t>(-it->polarity)});
  }
  return EventWindow(window.geometry(), std::move(out), window.t_end_us(), window.span_us());
}

enum class QuarterTurn { R0 = 0, R90 = 1, R180 = 2, R270 = 3 };

inline QuarterTurn quarter_turn_from_degrees(int degrees) {
  switch (((degrees % 360) + 360) % 360) {
    case 0: return QuarterTurn::R0;
    case 90: return QuarterTurn::R90;
    case 180: return QuarterTurn::R180;
    case 270: return QuarterTurn::R270;
    default: fail(ErrorCode::InvalidArgument, "rotation must be a multiple of 90 degrees");
  }
}

inline int degrees(QuarterTurn turn) noexcept { return 90 * static_cast<int>(turn); }

inline QuarterTurn inverse(QuarterTurn turn) noexcept {
  return static_cast<QuarterTurn>((4 - static_cast<int>(turn)) % 4);
}

inline Geometry rotated_geometry(Geometry g, QuarterTurn turn) noexcept {
  return (static_cast<int>(turn) % 2 == 0) ? g : Geometry{g.height, g.width};
}

/// Rotates a pixel-grid position counter-clockwise by quarter turns:
/// one step maps (x, y) to (y, W - 1 - x) and swaps the geometry.
inline std::pair<double, double> rotate_point(double x, double y, Geometry g, QuarterTurn turn) {
  for (int i = 0; i < static_cast<int>(turn); ++i) {
    const double nx = y;
    const double ny = static_cast<double>(g.width) - 1.0 - x;
    x = nx;
    y = ny;
    g = Geometry{g.height, g.width};
  }
  return {x, y};
}

inline EventWindow rotate_events(const EventWindow& window, QuarterTurn turn) {
  const Geometry g = window.geometry();
  std::vector<Event> out;
  out.reserve(window.size());
  for (const Event& e : window.events()) {
    auto [x, y] = rotate_point(e.x, e.y, g, turn);
    out.push_back(Event{static_cast<float>(x), static_cast<float>(y), e.t_us, e.polarity});
  }
  return EventWindow(rotated_geometry(g, turn), std::move(out), window.t_end_us(), window.span_us());
}

}  // namespace etap
