#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "etap/error.hpp"

namespace etap {

/// One convolution of the encoder. Residual layers add their activated
/// output to the input and therefore keep width and resolution.
struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int out_channels = 0;
  bool activation = true;
  bool residual = false;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct ModelConfig {
  int bins = 10;           // B
  int feature_dim = 128;   // d
  int levels = 4;          // S
  int base_stride = 4;     // k
  int corr_radius = 3;     // delta
  int window = 8;          // w
  int window_stride = 4;   // T_s
  int iters_train = 4;     // M (training)
  int iters_eval = 6;      // M (evaluation)
  int hidden = 128;
  int heads = 4;
  int blocks = 2;
  int mlp_ratio = 2;
  int eta_freqs = 4;       // frequencies per coordinate of the offset encoding
  int anchor_freqs = 8;    // frequencies per coordinate of the query-position encoding
  int slot_freqs = 4;      // frequencies of the slot-index encoding
  double vis_init_logit = 2.0;
  std::vector<ConvSpec> encoder;

  int corr_dim() const { return levels * (2 * corr_radius + 1) * (2 * corr_radius + 1); }
  int eta_dim() const { return 2 * 2 * eta_freqs; }
  int anchor_dim() const { return 2 * 2 * anchor_freqs; }
  int slot_dim() const { return 2 * slot_freqs; }
  int token_dim() const { return eta_dim() + feature_dim + corr_dim() + 1 + anchor_dim() + slot_dim(); }

  /// Input side lengths must be multiples of this (zero padding otherwise).
  int size_multiple() const { return base_stride << (levels - 1); }

  int encoder_stride() const {
    int s = 1;
    for (const auto& l : encoder) s *= l.stride;
    return s;
  }

  void validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::ConfigInvalid, what); };
    check(bins >= 1 && feature_dim >= 1 && levels >= 1 && base_stride >= 1, "model sizes must be positive");
    check(corr_radius >= 0, "correlation radius must be >= 0");
    check(eta_freqs >= 0 && anchor_freqs >= 0 && slot_freqs >= 0, "encoding widths must be >= 0");
    check(window >= 1 && window_stride >= 1 && window_stride <= window, "invalid window/stride");
    check(iters_train >= 1 && iters_eval >= 1, "refinement iterations must be >= 1");
    check(hidden % heads == 0, "hidden width must be divisible by heads");
    check(!encoder.empty(), "encoder has no layers");
    check(encoder.back().out_channels == feature_dim, "last encoder layer must emit feature_dim channels");
    check(encoder_stride() == base_stride, "encoder stride product must equal base_stride");
    int ch = bins;
    for (const auto& l : encoder) {
      check(l.kernel >= 1 && l.stride >= 1 && l.out_channels >= 1, "invalid encoder layer");
      if (l.residual) check(l.stride == 1 && l.out_channels == ch, "residual layer must keep shape");
      ch = l.out_channels;
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Four-layer reference encoder used for desk-scale training.
inline std::vector<ConvSpec> toy_encoder(int feature_dim) {
  return {{3, 2, 16, true, false}, {3, 2, 32, true, false}, {3, 1, 32, true, true}, {1, 1, feature_dim, false, false}};
}

/// Wider encoder with residual stages for full-resolution inputs.
inline std::vector<ConvSpec> full_encoder(int feature_dim) {
  return {{3, 2, 64, true, false},  {3, 1, 64, true, true},  {3, 2, 96, true, false},
          {3, 1, 96, true, true},   {3, 1, 96, true, true},  {1, 1, feature_dim, false, false}};
}

/// Reference constants: w=8, T_s=4, B=10, d=128, S=4, k=4, delta=3, M=4/6.
inline ModelConfig reference_model_config() {
  ModelConfig c;
  c.encoder = full_encoder(c.feature_dim);
  return c;
}

/// Toy scenes carry a few thousand events per window; channels past the
/// third hold too few of them to be more than noise.
inline constexpr int kToyBins = 3;

/// Small preset for CPU training on 64x64 toy scenes.
inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.bins = kToyBins;
  c.feature_dim = 32;
  c.hidden = 64;
  c.encoder = toy_encoder(c.feature_dim);
  return c;
}

inline void to_json(nlohmann::json& j, const ConvSpec& c) {
  j = {{"kernel", c.kernel}, {"stride", c.stride}, {"out_channels", c.out_channels},
       {"activation", c.activation}, {"residual", c.residual}};
}

inline void from_json(const nlohmann::json& j, ConvSpec& c) {
  j.at("kernel").get_to(c.kernel);
  j.at("stride").get_to(c.stride);
  j.at("out_channels").get_to(c.out_channels);
  j.at("activation").get_to(c.activation);
  j.at("residual").get_to(c.residual);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"bins", c.bins},           {"feature_dim", c.feature_dim},   {"levels", c.levels},
       {"base_stride", c.base_stride}, {"corr_radius", c.corr_radius}, {"window", c.window},
       {"window_stride", c.window_stride}, {"iters_train", c.iters_train}, {"iters_eval", c.iters_eval},
       {"hidden", c.hidden},       {"heads", c.heads},               {"blocks", c.blocks},
       {"mlp_ratio", c.mlp_ratio}, {"eta_freqs", c.eta_freqs},
       {"anchor_freqs", c.anchor_freqs}, {"slot_freqs", c.slot_freqs}, {"vis_init_logit", c.vis_init_logit},
       {"encoder", c.encoder}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("bins").get_to(c.bins);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("levels").get_to(c.levels);
  j.at("base_stride").get_to(c.base_stride);
  j.at("corr_radius").get_to(c.corr_radius);
  j.at("window").get_to(c.window);
  j.at("window_stride").get_to(c.window_stride);
  j.at("iters_train").get_to(c.iters_train);
  j.at("iters_eval").get_to(c.iters_eval);
  j.at("hidden").get_to(c.hidden);
  j.at("heads").get_to(c.heads);
  j.at("blocks").get_to(c.blocks);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("eta_freqs").get_to(c.eta_freqs);
  j.at("anchor_freqs").get_to(c.anchor_freqs);
  j.at("slot_freqs").get_to(c.slot_freqs);
  j.at("vis_init_logit").get_to(c.vis_init_logit);
  j.at("encoder").get_to(c.encoder);
}

}  // namespace etap
