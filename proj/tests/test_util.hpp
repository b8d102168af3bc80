#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "etap/error.hpp"
#include "etap/event_core.hpp"
#include "etap/event_sim.hpp"
#include "etap/feature_engine.hpp"

namespace etap::testing {

/// Error code thrown by f, empty when it returns normally.
inline std::optional<ErrorCode> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

/// Uniform-noise frames with random strictly increasing timestamps.
inline FrameSequence random_frames(int w, int h, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> val(0.05, 1.0);
  std::uniform_int_distribution<int> gap(3, 400);
  FrameSequence seq;
  std::int64_t t = 0;
  for (int k = 0; k < n; ++k) {
    Image f(w, h);
    for (double& v : f.data) v = val(rng);
    seq.frames.push_back(std::move(f));
    seq.timestamps_us.push_back(t);
    t += gap(rng);
  }
  return seq;
}

inline EventStream random_stream(Geometry g, std::size_t n, std::uint64_t seed, bool integer_xy = true) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> ux(0, g.width - 1), uy(0, g.height - 1), dt(0, 3), pol(0, 1);
  std::uniform_real_distribution<float> fx(0.f, static_cast<float>(g.width - 1)),
      fy(0.f, static_cast<float>(g.height - 1));
  std::vector<Event> ev;
  std::int64_t t = 100;
  for (std::size_t i = 0; i < n; ++i) {
    t += dt(rng);
    const float x = integer_xy ? static_cast<float>(ux(rng)) : fx(rng);
    const float y = integer_xy ? static_cast<float>(uy(rng)) : fy(rng);
    ev.push_back({x, y, t, static_cast<std::int8_t>(pol(rng) ? 1 : -1)});
  }
  return EventStream(g, std::move(ev));
}

/// Gaussian feature maps halving per level, as constants.
inline FeaturePyramid random_pyramid(int h, int w, int d, int levels, int stride, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  FeaturePyramid p;
  p.base_stride = stride;
  for (int l = 0; l < levels; ++l) {
    const auto hh = static_cast<std::size_t>(h >> l), ww = static_cast<std::size_t>(w >> l);
    std::vector<double> v(hh * ww * static_cast<std::size_t>(d));
    for (double& x : v) x = nd(rng);
    p.levels.push_back(ad::constant({hh, ww, static_cast<std::size_t>(d)}, v));
  }
  return p;
}

}  // namespace etap::testing
