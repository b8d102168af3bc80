#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "etap/autodiff.hpp"
#include "etap/error.hpp"
#include "etap/io.hpp"

namespace etap {

inline constexpr double kTrackWeight = 0.1;
inline constexpr double kVisWeight = 1.0;
inline constexpr double kFaWeight = 0.1;
inline constexpr double kIterDecay = 0.8;
inline constexpr double kLogitClamp = 30.0;
inline constexpr double kMinDescriptorNorm = 1e-12;

enum class TrackNorm { L1, L2 };

struct LossBreakdown {
  double l_track = 0.0;
  double l_vis = 0.0;
  double l_fa = 0.0;
  double total = 0.0;
};

/// total = 0.1 l_track + l_vis + 0.1 l_fa.
inline LossBreakdown total_loss(double l_track, double l_vis, double l_fa) {
  for (double v : {l_track, l_vis, l_fa}) {
    require(std::isfinite(v), ErrorCode::NonFinitePart, "loss part is not finite");
  }
  return {l_track, l_vis, l_fa, kTrackWeight * l_track + kVisWeight * l_vis + kFaWeight * l_fa};
}

inline ad::Var total_loss_graph(const ad::Var& l_track, const ad::Var& l_vis, const ad::Var& l_fa) {
  for (const ad::Var* v : {&l_track, &l_vis, &l_fa}) {
    require(std::isfinite(v->item()), ErrorCode::NonFinitePart, "loss part is not finite");
  }
  return ad::weighted_sum({l_track, l_vis, l_fa}, {kTrackWeight, kVisWeight, kFaWeight});
}

namespace detail {

inline std::size_t count_valid(const std::vector<std::uint8_t>& valid) {
  std::size_t n = 0;
  for (auto v : valid) n += v != 0;
  require(n > 0, ErrorCode::EmptyMask, "no valid entries");
  return n;
}

/// Mean over valid rows of |a - gt|_1 (or the Euclidean norm with L2).
inline ad::Var masked_point_error(const ad::Var& pred, const std::vector<double>& gt,
                                  const std::vector<std::uint8_t>& valid, TrackNorm norm) {
  const std::size_t rows = valid.size();
  require(pred.numel() == rows * 2 && gt.size() == rows * 2, ErrorCode::ShapeMismatch, "track loss shape mismatch");
  const double inv = 1.0 / static_cast<double>(count_valid(valid));
  std::vector<double> diff(rows * 2);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    diff[2 * r] = pred.value()[2 * r] - gt[2 * r];
    diff[2 * r + 1] = pred.value()[2 * r + 1] - gt[2 * r + 1];
    if (!valid[r]) continue;
    total += norm == TrackNorm::L1 ? std::abs(diff[2 * r]) + std::abs(diff[2 * r + 1])
                                   : std::hypot(diff[2 * r], diff[2 * r + 1]);
  }
  return ad::detail::make_result({1}, {total * inv}, {pred}, [diff, valid, inv, norm](ad::Node& self) {
    auto& g = self.parents[0]->g();
    const double up = self.grad[0] * inv;
    for (std::size_t r = 0; r < valid.size(); ++r) {
      if (!valid[r]) continue;
      const double dx = diff[2 * r], dy = diff[2 * r + 1];
      if (norm == TrackNorm::L1) {
        g[2 * r] += up * ((dx > 0) - (dx < 0));
        g[2 * r + 1] += up * ((dy > 0) - (dy < 0));
      } else {
        const double len = std::hypot(dx, dy);
        if (len > 0) {
          g[2 * r] += up * dx / len;
          g[2 * r + 1] += up * dy / len;
        }
      }
    }
  });
}

}  // namespace detail

/// sum_m 0.8^(M-m) * mean_valid |x_m - x_gt|_1 over iterations m = 1..M.
inline ad::Var loss_track_graph(const std::vector<ad::Var>& preds, const std::vector<double>& gt,
                                const std::vector<std::uint8_t>& valid, TrackNorm norm = TrackNorm::L1) {
  require(!preds.empty(), ErrorCode::InvalidArgument, "need at least one iteration");
  std::vector<ad::Var> parts;
  std::vector<double> weights;
  const std::size_t M = preds.size();
  for (std::size_t m = 0; m < M; ++m) {
    parts.push_back(detail::masked_point_error(preds[m], gt, valid, norm));
    weights.push_back(std::pow(kIterDecay, static_cast<double>(M - 1 - m)));
  }
  return ad::weighted_sum(parts, weights);
}

inline double loss_track(const std::vector<std::vector<double>>& preds, const std::vector<double>& gt,
                         const std::vector<std::uint8_t>& valid, TrackNorm norm = TrackNorm::L1) {
  ad::NoGradGuard no_grad;
  std::vector<ad::Var> vars;
  for (const auto& p : preds) vars.push_back(ad::constant({p.size() / 2, 2}, p));
  return loss_track_graph(vars, gt, valid, norm).item();
}

/// Mean binary cross-entropy over valid entries, logits clamped to +-30.
inline ad::Var loss_visibility_graph(const ad::Var& logits, const std::vector<std::uint8_t>& gt,
                                     const std::vector<std::uint8_t>& valid) {
  const std::size_t n = valid.size();
  require(logits.numel() == n && gt.size() == n, ErrorCode::ShapeMismatch, "visibility loss shape mismatch");
  const double inv = 1.0 / static_cast<double>(detail::count_valid(valid));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    require(gt[i] <= 1, ErrorCode::InvalidArgument, "visibility flags must be 0 or 1");
    const double z = std::clamp(logits.value()[i], -kLogitClamp, kLogitClamp);
    // softplus(z) - y z, stable for either sign
    total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - gt[i] * z;
  }
  return ad::detail::make_result({1}, {total * inv}, {logits}, [gt, valid, inv](ad::Node& self) {
    auto& g = self.parents[0]->g();
    const auto& z = self.parents[0]->value;
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (!valid[i] || std::abs(z[i]) > kLogitClamp) continue;
      g[i] += self.grad[0] * inv * (ad::sigmoid_value(z[i]) - gt[i]);
    }
  });
}

inline double loss_visibility(const std::vector<double>& logits, const std::vector<std::uint8_t>& gt,
                              const std::vector<std::uint8_t>& valid) {
  ad::NoGradGuard no_grad;
  return loss_visibility_graph(ad::constant({logits.size()}, logits), gt, valid).item();
}

/// sum_j w_j (1 - <u(a_j), u(b_j)>)^2 over rows j of [P, d] descriptor pairs.
/// The FA loss uses w_j = 1 / |points in row j's window|.
inline ad::Var cosine_alignment(const ad::Var& a, const ad::Var& b, const std::vector<double>& weights) {
  require(a.shape() == b.shape() && a.shape().size() == 2, ErrorCode::ShapeMismatch,
          "descriptor pairs must share a [P, d] shape");
  const std::size_t P = a.dim(0), d = a.dim(1);
  require(weights.size() == P, ErrorCode::ShapeMismatch, "one weight per descriptor pair");
  std::vector<double> na(P), nb(P), cs(P);
  double total = 0.0;
  for (std::size_t j = 0; j < P; ++j) {
    double aa = 0, bb = 0, ab = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double x = a.value()[j * d + k], y = b.value()[j * d + k];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    na[j] = std::sqrt(aa);
    nb[j] = std::sqrt(bb);
    if (na[j] < kMinDescriptorNorm || nb[j] < kMinDescriptorNorm) {
      fail(ErrorCode::ZeroNormDescriptor, "descriptor pair " + std::to_string(j) + " has zero norm");
    }
    cs[j] = ab / (na[j] * nb[j]);
    total += weights[j] * (1.0 - cs[j]) * (1.0 - cs[j]);
  }
  return ad::detail::make_result({1}, {total}, {a, b}, [na, nb, cs, weights, d](ad::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const bool ga = ad::detail::wants(self, 0), gb = ad::detail::wants(self, 1);
    for (std::size_t j = 0; j < na.size(); ++j) {
      const double coef = -2.0 * weights[j] * (1.0 - cs[j]) * self.grad[0];
      for (std::size_t k = 0; k < d; ++k) {
        const double x = av[j * d + k], y = bv[j * d + k];
        if (ga) self.parents[0]->g()[j * d + k] += coef * (y / (na[j] * nb[j]) - cs[j] * x / (na[j] * na[j]));
        if (gb) self.parents[1]->g()[j * d + k] += coef * (x / (na[j] * nb[j]) - cs[j] * y / (nb[j] * nb[j]));
      }
    }
  });
}

/// Value form of the alignment loss for one window: sum over pairs, divided
/// by the number of points.
inline double loss_fa_window(const std::vector<std::vector<double>>& d, const std::vector<std::vector<double>>& d_inv,
                             std::size_t num_points) {
  require(d.size() == d_inv.size() && !d.empty(), ErrorCode::ShapeMismatch, "descriptor lists must match");
  require(num_points > 0, ErrorCode::EmptySet, "window has no points");
  ad::NoGradGuard no_grad;
  const std::size_t dim = d.front().size();
  std::vector<double> a, b;
  for (std::size_t j = 0; j < d.size(); ++j) {
    require(d[j].size() == dim && d_inv[j].size() == dim, ErrorCode::ShapeMismatch, "descriptor lengths differ");
    a.insert(a.end(), d[j].begin(), d[j].end());
    b.insert(b.end(), d_inv[j].begin(), d_inv[j].end());
  }
  const std::vector<double> w(d.size(), 1.0 / static_cast<double>(num_points));
  return cosine_alignment(ad::constant({d.size(), dim}, a), ad::constant({d.size(), dim}, b), w).item();
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double epsilon = 1e-4;
  std::size_t max_per_param = 0;  // 0 checks every element
  std::uint64_t seed = 0;
  double denom_floor = 1e-6;
};

/// Compares the tape gradient of `fn` with central differences. Relative
/// error uses max(|analytic|, denom_floor) as denominator.
inline GradCheckResult grad_check(const std::function<ad::Var()>& fn,
                                  const std::vector<std::pair<std::string, ad::Var>>& params,
                                  const GradCheckOptions& opt = {}) {
  require(opt.epsilon > 0, ErrorCode::InvalidArgument, "epsilon must be > 0");
  for (const auto& [name, p] : params) {
    auto& g = const_cast<ad::Var&>(p).mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  ad::backward(fn());
  std::mt19937_64 rng(opt.seed);
  GradCheckResult res;
  for (const auto& [name, pc] : params) {
    ad::Var p = pc;
    const std::vector<double> analytic = p.mutable_grad();
    std::vector<std::size_t> idx(p.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_per_param > 0 && idx.size() > opt.max_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      double& v = p.mutable_value()[i];
      const double orig = v;
      double fp, fm;
      {
        ad::NoGradGuard no_grad;
        v = orig + opt.epsilon;
        fp = fn().item();
        v = orig - opt.epsilon;
        fm = fn().item();
        v = orig;
      }
      const double numeric = (fp - fm) / (2.0 * opt.epsilon);
      const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), opt.denom_floor);
      ++res.checked;
      if (res.worst_param.empty() || rel > res.max_rel_error) {
        res = {rel, name, i, analytic[i], numeric, res.checked};
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Loss curve

struct LossCurve {
  std::vector<LossBreakdown> steps;

  std::string to_csv() const {
    std::string out = "step,l_track,l_vis,l_fa,total\n";
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& s = steps[i];
      out += std::to_string(i) + "," + io::format_double(s.l_track) + "," + io::format_double(s.l_vis) + "," +
             io::format_double(s.l_fa) + "," + io::format_double(s.total) + "\n";
    }
    return out;
  }
};

}  // namespace etap
