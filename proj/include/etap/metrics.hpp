#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "etap/error.hpp"
#include "etap/event_core.hpp"
#include "etap/io.hpp"
#include "etap/tracker.hpp"

namespace etap {

inline const std::vector<double> kDefaultThresholds = {1, 2, 4, 8, 16};
inline constexpr double kReferenceResolution = 512.0;
inline constexpr double kDefaultAgeThreshold = 5.0;
inline constexpr const char* kEfaVariant = "v1";

struct TapReport {
  std::vector<double> thresholds;        // in px at the evaluated resolution
  std::vector<double> delta_per_threshold;
  std::vector<double> jaccard_per_threshold;
  double delta_avg = 0.0;
  double oa = 0.0;
  double aj = 0.0;
  std::size_t point_count = 0;
  std::size_t timestep_count = 0;
};

struct FeatureAgeReport {
  double fa = 0.0;
  double expected_fa = 0.0;
  std::vector<double> ages;       // per point, NaN when the track has zero duration
  std::vector<double> durations;  // s
  double threshold_px = kDefaultAgeThreshold;
};

/// Point ids and timestamps must agree exactly.
inline void check_aligned(const TrackSet& pred, const TrackSet& gt) {
  require(pred.point_ids == gt.point_ids, ErrorCode::AlignmentError,
          "point ids differ between prediction (" + std::to_string(pred.num_points()) + ") and ground truth (" +
              std::to_string(gt.num_points()) + ")");
  require(pred.timestamps_us == gt.timestamps_us, ErrorCode::AlignmentError,
          "timestamps differ between prediction and ground truth");
}

inline std::vector<double> scaled_thresholds(const std::vector<double>& thresholds, Geometry g,
                                             double ref_resolution = kReferenceResolution) {
  require(ref_resolution > 0 && g.width > 0 && g.height > 0, ErrorCode::InvalidArgument, "invalid resolution");
  const double s = std::min(g.width, g.height) / ref_resolution;
  std::vector<double> out;
  for (double t : thresholds) out.push_back(t * s);
  return out;
}

namespace detail {

inline double entry_error(const TrackSet& pred, const TrackSet& gt, std::size_t k) {
  return std::hypot(pred.x[k] - gt.x[k], pred.y[k] - gt.y[k]);
}

}  // namespace detail

/// Fraction of GT-visible valid entries within each threshold.
inline std::vector<double> delta_fractions(const TrackSet& pred, const TrackSet& gt, Geometry g,
                                           const std::vector<double>& thresholds = kDefaultThresholds,
                                           double ref_resolution = kReferenceResolution) {
  check_aligned(pred, gt);
  const auto th = scaled_thresholds(thresholds, g, ref_resolution);
  std::vector<double> within(th.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t k = 0; k < gt.valid.size(); ++k) {
    if (!gt.valid[k] || !gt.visible[k]) continue;
    ++count;
    const double e = detail::entry_error(pred, gt, k);
    for (std::size_t j = 0; j < th.size(); ++j) within[j] += e < th[j];
  }
  require(count > 0, ErrorCode::NoVisiblePoints, "no visible ground-truth entries");
  for (double& w : within) w /= static_cast<double>(count);
  return within;
}

inline double delta_avg(const TrackSet& pred, const TrackSet& gt, Geometry g,
                        const std::vector<double>& thresholds = kDefaultThresholds,
                        double ref_resolution = kReferenceResolution) {
  const auto f = delta_fractions(pred, gt, g, thresholds, ref_resolution);
  double s = 0.0;
  for (double v : f) s += v;
  return s / static_cast<double>(f.size());
}

inline double occlusion_accuracy(const TrackSet& pred, const TrackSet& gt) {
  check_aligned(pred, gt);
  std::size_t count = 0, correct = 0;
  for (std::size_t k = 0; k < gt.valid.size(); ++k) {
    if (!gt.valid[k]) continue;
    ++count;
    correct += (pred.visible[k] != 0) == (gt.visible[k] != 0);
  }
  require(count > 0, ErrorCode::EmptySet, "no valid entries");
  return static_cast<double>(correct) / static_cast<double>(count);
}

/// Jaccard per threshold. A threshold with no positives at all (nothing
/// visible in either set) scores 1.
inline std::vector<double> jaccard_per_threshold(const TrackSet& pred, const TrackSet& gt, Geometry g,
                                                 const std::vector<double>& thresholds = kDefaultThresholds,
                                                 double ref_resolution = kReferenceResolution) {
  check_aligned(pred, gt);
  const auto th = scaled_thresholds(thresholds, g, ref_resolution);
  std::vector<double> tp(th.size(), 0), fp(th.size(), 0), fn(th.size(), 0);
  std::size_t count = 0;
  for (std::size_t k = 0; k < gt.valid.size(); ++k) {
    if (!gt.valid[k]) continue;
    ++count;
    const bool pv = pred.visible[k] != 0, gv = gt.visible[k] != 0;
    const double e = detail::entry_error(pred, gt, k);
    for (std::size_t j = 0; j < th.size(); ++j) {
      const bool close = e < th[j];
      if (pv && gv && close) tp[j] += 1;
      if (pv && (!gv || !close)) fp[j] += 1;
      if (gv && (!pv || !close)) fn[j] += 1;
    }
  }
  require(count > 0, ErrorCode::EmptySet, "no valid entries");
  std::vector<double> out(th.size());
  for (std::size_t j = 0; j < th.size(); ++j) {
    const double den = tp[j] + fp[j] + fn[j];
    out[j] = den > 0 ? tp[j] / den : 1.0;
  }
  return out;
}

inline double average_jaccard(const TrackSet& pred, const TrackSet& gt, Geometry g,
                              const std::vector<double>& thresholds = kDefaultThresholds,
                              double ref_resolution = kReferenceResolution) {
  const auto j = jaccard_per_threshold(pred, gt, g, thresholds, ref_resolution);
  double s = 0.0;
  for (double v : j) s += v;
  return s / static_cast<double>(j.size());
}

inline TapReport tap_report(const TrackSet& pred, const TrackSet& gt, Geometry g,
                            const std::vector<double>& thresholds = kDefaultThresholds,
                            double ref_resolution = kReferenceResolution) {
  TapReport r;
  r.thresholds = scaled_thresholds(thresholds, g, ref_resolution);
  r.delta_per_threshold = delta_fractions(pred, gt, g, thresholds, ref_resolution);
  r.jaccard_per_threshold = jaccard_per_threshold(pred, gt, g, thresholds, ref_resolution);
  for (double v : r.delta_per_threshold) r.delta_avg += v;
  r.delta_avg /= static_cast<double>(r.delta_per_threshold.size());
  for (double v : r.jaccard_per_threshold) r.aj += v;
  r.aj /= static_cast<double>(r.jaccard_per_threshold.size());
  r.oa = occlusion_accuracy(pred, gt);
  r.point_count = gt.num_points();
  r.timestep_count = gt.num_steps();
  return r;
}

/// Per track: time from the query (first valid entry) to the first valid
/// entry farther than `threshold_px` from GT, over the GT duration (last
/// valid minus query time); 1 when it never deviates. fa averages tracks
/// with positive age; expected_fa weights every track by its duration.
inline FeatureAgeReport feature_age(const TrackSet& pred, const TrackSet& gt,
                                    double threshold_px = kDefaultAgeThreshold) {
  check_aligned(pred, gt);
  require(threshold_px > 0, ErrorCode::InvalidArgument, "distance threshold must be > 0");
  FeatureAgeReport r;
  r.threshold_px = threshold_px;
  double sum_age = 0.0, weighted = 0.0, total_dur = 0.0;
  std::size_t alive = 0, usable = 0;
  for (std::size_t p = 0; p < gt.num_points(); ++p) {
    std::ptrdiff_t first = -1, last = -1, exceed = -1;
    for (std::size_t t = 0; t < gt.num_steps(); ++t) {
      const std::size_t k = gt.idx(p, t);
      if (!gt.valid[k]) continue;
      if (first < 0) first = static_cast<std::ptrdiff_t>(t);
      last = static_cast<std::ptrdiff_t>(t);
      if (exceed < 0 && detail::entry_error(pred, gt, k) > threshold_px) exceed = static_cast<std::ptrdiff_t>(t);
    }
    const double duration =
        first < 0 ? 0.0 : static_cast<double>(gt.timestamps_us[last] - gt.timestamps_us[first]) * 1e-6;
    r.durations.push_back(duration);
    if (!(duration > 0)) {
      r.ages.push_back(std::nan(""));
      continue;
    }
    const double age =
        exceed < 0 ? 1.0
                   : static_cast<double>(gt.timestamps_us[exceed] - gt.timestamps_us[first]) * 1e-6 / duration;
    r.ages.push_back(age);
    ++usable;
    total_dur += duration;
    weighted += duration * age;
    if (age > 0) {
      sum_age += age;
      ++alive;
    }
  }
  require(usable > 0, ErrorCode::EmptySet, "no track with positive ground-truth duration");
  r.fa = alive > 0 ? sum_age / static_cast<double>(alive) : 0.0;
  r.expected_fa = weighted / total_dur;
  return r;
}

inline nlohmann::json to_json(const TapReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t j = 0; j < r.thresholds.size(); ++j) {
    per.push_back({{"threshold_px", r.thresholds[j]},
                   {"delta", r.delta_per_threshold[j]},
                   {"jaccard", r.jaccard_per_threshold[j]}});
  }
  return {{"delta_avg", r.delta_avg}, {"oa", r.oa},  {"aj", r.aj},
          {"per_threshold", per},     {"points", r.point_count}, {"timesteps", r.timestep_count}};
}

inline nlohmann::json to_json(const FeatureAgeReport& r) {
  nlohmann::json ages = nlohmann::json::array();
  for (double a : r.ages) ages.push_back(std::isnan(a) ? nlohmann::json(nullptr) : nlohmann::json(a));
  return {{"fa", r.fa},           {"expected_fa", r.expected_fa}, {"efa_variant", kEfaVariant},
          {"threshold_px", r.threshold_px}, {"ages", ages}};
}

/// One row per point: point_id,duration_s,age.
inline std::string feature_age_csv(const FeatureAgeReport& r, const std::vector<int>& ids) {
  std::string out = "point_id,duration_s,age\n";
  for (std::size_t i = 0; i < r.ages.size(); ++i) {
    out += std::to_string(ids[i]) + "," + io::format_double(r.durations[i]) + "," +
           (std::isnan(r.ages[i]) ? std::string("nan") : io::format_double(r.ages[i])) + "\n";
  }
  return out;
}

inline std::string tap_csv(const TapReport& r) {
  std::string out = "threshold_px,delta,jaccard\n";
  for (std::size_t j = 0; j < r.thresholds.size(); ++j) {
    out += io::format_double(r.thresholds[j]) + "," + io::format_double(r.delta_per_threshold[j]) + "," +
           io::format_double(r.jaccard_per_threshold[j]) + "\n";
  }
  return out;
}

}  // namespace etap
