#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "etap/autodiff.hpp"
#include "etap/model_config.hpp"
#include "etap/representation.hpp"

namespace etap {

using Descriptor = std::vector<double>;
using NamedParams = std::vector<std::pair<std::string, ad::Var>>;

/// Multi-scale feature maps. Level l (0-based) has stride k * 2^l relative to
/// the input and shape [H / (k 2^l), W / (k 2^l), d].
struct FeaturePyramid {
  int base_stride = 4;
  std::vector<ad::Var> levels;

  std::size_t size() const { return levels.size(); }
  int stride(std::size_t level) const { return base_stride << level; }
  std::size_t height(std::size_t level) const { return levels[level].dim(0); }
  std::size_t width(std::size_t level) const { return levels[level].dim(1); }
  std::size_t dim() const { return levels.front().dim(2); }
};

struct EncoderParams {
  std::vector<ConvSpec> layers;
  std::vector<ad::Var> weights;  // [k, k, Cin, Cout]
  std::vector<ad::Var> biases;   // [Cout]

  NamedParams named() const {
    NamedParams out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.emplace_back("encoder." + std::to_string(i) + ".weight", weights[i]);
      out.emplace_back("encoder." + std::to_string(i) + ".bias", biases[i]);
    }
    return out;
  }
};

namespace detail {

template <typename Rng>
std::vector<double> normal_values(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace detail

/// He-style initialisation. With zero_final the last layer starts at zero,
/// which makes the whole pyramid zero.
inline EncoderParams init_encoder(const ModelConfig& cfg, std::uint64_t seed, bool zero_final = false) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  EncoderParams p;
  p.layers = cfg.encoder;
  int in = cfg.bins;
  for (std::size_t i = 0; i < cfg.encoder.size(); ++i) {
    const ConvSpec& l = cfg.encoder[i];
    const auto fan_in = static_cast<double>(l.kernel * l.kernel * in);
    double stddev = std::sqrt((l.activation ? 2.0 : 1.0) / fan_in);
    if (l.residual) stddev *= 0.5;
    const bool last = i + 1 == cfg.encoder.size();
    const std::size_t n = static_cast<std::size_t>(l.kernel) * l.kernel * in * l.out_channels;
    std::vector<double> w = (last && zero_final) ? std::vector<double>(n, 0.0) : detail::normal_values(n, stddev, rng);
    p.weights.push_back(ad::parameter({static_cast<std::size_t>(l.kernel), static_cast<std::size_t>(l.kernel),
                                       static_cast<std::size_t>(in), static_cast<std::size_t>(l.out_channels)},
                                      std::move(w)));
    p.biases.push_back(ad::parameter({static_cast<std::size_t>(l.out_channels)},
                                     std::vector<double>(static_cast<std::size_t>(l.out_channels), 0.0)));
    in = l.out_channels;
  }
  return p;
}

/// Stack as an [H', W', B] tensor, zero-padded on the bottom/right so both
/// sides are multiples of `multiple`.
inline ad::Var stack_tensor(const EventStack& stack, int multiple) {
  const int hp = (stack.height + multiple - 1) / multiple * multiple;
  const int wp = (stack.width + multiple - 1) / multiple * multiple;
  std::vector<double> data(static_cast<std::size_t>(hp) * wp * stack.bins, 0.0);
  for (int y = 0; y < stack.height; ++y)
    for (int x = 0; x < stack.width; ++x)
      for (int c = 0; c < stack.bins; ++c)
        data[(static_cast<std::size_t>(y) * wp + x) * stack.bins + c] = stack.at(x, y, c);
  return ad::constant({static_cast<std::size_t>(hp), static_cast<std::size_t>(wp), static_cast<std::size_t>(stack.bins)},
                      std::move(data));
}

/// Runs the encoder on an already padded [H, W, B] tensor and average-pools
/// the stride-k output into `levels` scales.
inline FeaturePyramid encode_tensor(const ad::Var& input, const EncoderParams& params, int levels, int base_stride) {
  require(input.shape().size() == 3, ErrorCode::ShapeMismatch, "encoder input must be [H, W, B]");
  const std::size_t multiple = static_cast<std::size_t>(base_stride) << (levels - 1);
  require(input.dim(0) % multiple == 0 && input.dim(1) % multiple == 0, ErrorCode::ShapeMismatch,
          "encoder input " + ad::shape_string(input.shape()) + " not a multiple of " + std::to_string(multiple));
  require(!params.weights.empty() && params.weights.front().dim(2) == input.dim(2), ErrorCode::ShapeMismatch,
          "encoder expects " + std::to_string(params.weights.front().dim(2)) + " input channels");
  ad::Var h = input;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const ConvSpec& l = params.layers[i];
    ad::Var y = ad::conv2d(h, params.weights[i], params.biases[i], static_cast<std::size_t>(l.stride),
                           static_cast<std::size_t>(l.kernel / 2));
    if (l.activation) y = ad::gelu(y);
    h = l.residual ? ad::add(h, y) : y;
  }
  FeaturePyramid pyr;
  pyr.base_stride = base_stride;
  pyr.levels.push_back(h);
  for (int l = 1; l < levels; ++l) pyr.levels.push_back(ad::avg_pool2(pyr.levels.back()));
  return pyr;
}

inline FeaturePyramid encode(const EventStack& stack, const EncoderParams& params, const ModelConfig& cfg) {
  require(stack.bins == cfg.bins, ErrorCode::ShapeMismatch,
          "stack has " + std::to_string(stack.bins) + " bins, model expects " + std::to_string(cfg.bins));
  return encode_tensor(stack_tensor(stack, cfg.size_multiple()), params, cfg.levels, cfg.base_stride);
}

/// Pyramid whose first level is the (padded) input itself: the identity
/// encoder used to test geometric properties without learned weights.
inline FeaturePyramid identity_pyramid(const EventStack& stack, int levels, int base_stride = 1) {
  require(base_stride == 1, ErrorCode::InvalidArgument, "identity pyramid has stride 1");
  ad::NoGradGuard no_grad;
  FeaturePyramid pyr;
  pyr.base_stride = 1;
  pyr.levels.push_back(stack_tensor(stack, 1 << (levels - 1)));
  for (int l = 1; l < levels; ++l) pyr.levels.push_back(ad::avg_pool2(pyr.levels.back()));
  return pyr;
}

/// Feature vector at continuous level coordinates (x, y); zero outside.
inline Descriptor sample_bilinear(const ad::Var& level, double x, double y) {
  ad::NoGradGuard no_grad;
  return ad::bilinear_sample(level, ad::constant({1, 2}, {x, y}), 1.0).value();
}

/// Inner products of q with samples around a full-resolution position on
/// every level, offsets |delta|_inf <= radius, level-major then dy, dx.
inline std::vector<double> correlation_features(const Descriptor& q, const FeaturePyramid& pyr, double x, double y,
                                                int radius) {
  ad::NoGradGuard no_grad;
  const ad::Var qv = ad::constant({1, q.size()}, q);
  const ad::Var pos = ad::constant({1, 2}, {x, y});
  std::vector<double> out;
  for (std::size_t l = 0; l < pyr.size(); ++l) {
    const auto c = ad::local_correlation(qv, pyr.levels[l], pos, 1.0 / pyr.stride(l), radius);
    out.insert(out.end(), c.value().begin(), c.value().end());
  }
  return out;
}

}  // namespace etap
