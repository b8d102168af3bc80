#pragma once

// Key-value pipeline configuration and the run manifest written next to
// every CLI output.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "etap/error.hpp"
#include "etap/io.hpp"
#include "etap/metrics.hpp"
#include "etap/model_config.hpp"
#include "etap/representation.hpp"
#include "etap/train.hpp"

namespace etap {

/// Every key with its default. Unknown keys are rejected.
inline const std::vector<std::pair<std::string, std::string>>& pipeline_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"preset", "reference"},  // reference | toy
      {"window", "8"},
      {"window_stride", "4"},
      {"bins", "10"},
      {"feature_dim", "128"},
      {"levels", "4"},
      {"base_stride", "4"},
      {"corr_radius", "3"},
      {"iters_train", "4"},
      {"iters_eval", "6"},
      {"n_events", "400000"},
      {"thresholds", "1,2,4,8,16"},
      {"age_threshold", "5"},
      {"noise_sigma", "0.1"},
      {"contrast_lo", "0.16"},
      {"contrast_hi", "0.34"},
      {"log_eps", "0.001"},
      {"seed", "0"},
      {"toy_width", "64"},
      {"toy_height", "64"},
      {"toy_scenes", "20"},
      {"toy_points", "16"},
      {"toy_steps", "8"},
      {"toy_step_us", "10000"},
      {"toy_n_events", "4000"},
      {"toy_bins", "3"},
      {"train_steps", "500"},
      {"fa_start", "-1"},
      {"lr", "0.001"},
      {"batch", "1"},
  };
  return d;
}

class PipelineConfig {
 public:
  PipelineConfig() {
    for (const auto& [k, v] : pipeline_defaults()) values_[k] = v;
  }

  /// Parses `key = value` lines; `#` starts a comment.
  static PipelineConfig parse(std::string_view text) {
    PipelineConfig cfg;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string line(text.substr(pos, end - pos));
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = io::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorCode::ConfigInvalid, "config line " + std::to_string(line_no) + " has no '='");
      cfg.set(io::trim(line.substr(0, eq)), io::trim(line.substr(eq + 1)), "file");
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value, const std::string& source) {
    require(values_.contains(key), ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
    values_[key] = value;
    overrides_.push_back({{"key", key}, {"value", value}, {"source", source}});
  }

  /// Applies a `key=value` override.
  void set_assignment(const std::string& kv, const std::string& source) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::ConfigInvalid, "override '" + kv + "' is not key=value");
    set(io::trim(kv.substr(0, eq)), io::trim(kv.substr(eq + 1)), source);
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    require(it != values_.end(), ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key) const {
    try {
      return io::to_int(str(key));
    } catch (const Error&) {
      fail(ErrorCode::ConfigInvalid, "key '" + key + "' is not an integer: " + str(key));
    }
  }

  double number(const std::string& key) const {
    try {
      return io::to_double(str(key));
    } catch (const Error&) {
      fail(ErrorCode::ConfigInvalid, "key '" + key + "' is not a number: " + str(key));
    }
  }

  std::vector<double> numbers(const std::string& key) const {
    std::vector<double> out;
    for (const auto& part : io::split(str(key), ',')) out.push_back(io::to_double(io::trim(part)));
    return out;
  }

  ModelConfig model() const {
    const std::string& preset = str("preset");
    require(preset == "reference" || preset == "toy", ErrorCode::ConfigInvalid, "preset must be reference or toy");
    ModelConfig c = preset == "toy" ? toy_model_config() : reference_model_config();
    // the toy preset keeps its own widths unless the keys were set explicitly
    auto pick = [&](const char* key, int& field) {
      if (preset == "reference" || explicitly_set(key)) field = static_cast<int>(integer(key));
    };
    pick("window", c.window);
    pick("window_stride", c.window_stride);
    pick("bins", c.bins);
    pick("levels", c.levels);
    pick("base_stride", c.base_stride);
    pick("corr_radius", c.corr_radius);
    pick("iters_train", c.iters_train);
    pick("iters_eval", c.iters_eval);
    if (preset == "reference" || explicitly_set("feature_dim")) {
      c.feature_dim = static_cast<int>(integer("feature_dim"));
      c.encoder.back().out_channels = c.feature_dim;
    }
    c.validate();
    return c;
  }

  ToyDatasetConfig toy() const {
    ToyDatasetConfig d;
    d.width = static_cast<int>(integer("toy_width"));
    d.height = static_cast<int>(integer("toy_height"));
    d.scenes = static_cast<std::size_t>(integer("toy_scenes"));
    d.points = static_cast<std::size_t>(integer("toy_points"));
    d.steps = static_cast<int>(integer("toy_steps"));
    d.step_us = integer("toy_step_us");
    d.n_events = static_cast<std::size_t>(integer("toy_n_events"));
    d.bins = static_cast<int>(integer("toy_bins"));
    d.contrast_lo = number("contrast_lo");
    d.contrast_hi = number("contrast_hi");
    d.seed = static_cast<std::uint64_t>(integer("seed"));
    d.validate();
    return d;
  }

  bool explicitly_set(const std::string& key) const {
    for (const auto& o : overrides_)
      if (o["key"] == key) return true;
    return false;
  }

  nlohmann::json snapshot() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  const nlohmann::json& overrides() const { return overrides_; }

 private:
  std::map<std::string, std::string> values_;
  nlohmann::json overrides_ = nlohmann::json::array();
};

/// Seed precedence: explicit flag, then ETAPKIT_SEED, then the config value.
inline std::uint64_t resolve_seed(const PipelineConfig& cfg, long long flag_seed) {
  if (flag_seed >= 0) return static_cast<std::uint64_t>(flag_seed);
  if (const char* env = std::getenv("ETAPKIT_SEED"); env && *env) {
    try {
      return static_cast<std::uint64_t>(io::to_int(env));
    } catch (const Error&) {
      fail(ErrorCode::ConfigInvalid, std::string("ETAPKIT_SEED is not an integer: ") + env);
    }
  }
  return static_cast<std::uint64_t>(cfg.integer("seed"));
}

/// Everything needed to rerun a command. Only `timing_s` varies between
/// identical runs.
class RunManifest {
 public:
  RunManifest(std::string command, const PipelineConfig& cfg, std::uint64_t seed, std::vector<std::string> argv)
      : start_(std::chrono::steady_clock::now()) {
    j_["tool"] = "etapkit";
#ifdef ETAP_VERSION
    j_["version"] = ETAP_VERSION;
#else
    j_["version"] = "dev";
#endif
    j_["command"] = std::move(command);
    j_["argv"] = std::move(argv);
    j_["config"] = cfg.snapshot();
    j_["overrides"] = cfg.overrides();
    j_["seed"] = seed;
    j_["inputs"] = nlohmann::json::object();
    j_["outputs"] = nlohmann::json::array();
  }

  void input(const std::filesystem::path& path) {
    j_["inputs"][path.filename().string()] = io::hex64(io::fnv1a64(io::read_text(path)));
  }

  void output(const std::filesystem::path& path) { j_["outputs"].push_back(path.filename().string()); }

  void note(const std::string& key, nlohmann::json value) { j_[key] = std::move(value); }

  void write(const std::filesystem::path& path) {
    j_["timing_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    io::write_atomic(path, j_.dump(2) + "\n");
  }

  const nlohmann::json& json() const { return j_; }

 private:
  nlohmann::json j_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace etap
