#pragma once

// Tensor-level reverse-mode differentiation. Every op computes its value
// eagerly and, when any input requires a gradient, records a closure that
// scatters the output gradient back into its parents.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "etap/error.hpp"

namespace etap::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct Node {
  std::vector<double> value;
  std::vector<double> grad;
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& g() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->g(); }
  std::vector<double>& mutable_grad() { return node_->g(); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double item() const {
    assert(numel() == 1);
    return node_->value[0];
  }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {
inline thread_local bool grad_mode = true;
}

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

/// Test hook: multiplies the recorded weight gradient of `linear`. Only the
/// verification harness touches it, to prove gradient checks catch faults.
inline double& gradient_fault_scale() {
  static double scale = 1.0;
  return scale;
}

inline Var constant(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  if (numel_of(shape) != value.size()) {
    fail(ErrorCode::ShapeMismatch, "constant " + shape_string(shape) + " with " +
                                       std::to_string(value.size()) + " values");
  }
  n->shape = std::move(shape);
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var parameter(Shape shape, std::vector<double> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.node()->requires_grad = true;
  return v;
}

inline Var scalar(double v) { return constant({1}, {v}); }

inline Var detach(const Var& v) { return constant(v.shape(), v.value()); }

namespace detail {

using BackwardFn = std::function<void(Node&)>;

inline Var make_result(Shape shape, std::vector<double> value, std::vector<Var> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (ad::grad_enabled()) {
    for (const Var& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Var& v : inputs) n->parents.push_back(v.node());
    n->backward = std::move(fn);
  }
  return Var(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (a.numel() != b.numel()) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                                       shape_string(b.shape()));
  }
}

}  // namespace detail

/// Accumulates d(root)/d(node) into every reachable node's grad.
inline void backward(const Var& root, double seed = 1.0) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& rg = root.node()->g();
  for (double& g : rg) g += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    // nodes no gradient reached have nothing to propagate
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(self, k)) continue;
      auto& g = self.parents[k]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = self.parents[0]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.parents[1]->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  std::vector<double> out(a.value());
  for (double& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// Same values under a new shape.
inline Var reshape(const Var& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    fail(ErrorCode::ShapeMismatch, "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  return detail::make_result(std::move(shape), a.value(), {a}, [](Node& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
  return detail::make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    const auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->g();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

inline Var gelu(const Var& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

inline Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Var sigmoid(const Var& a) {
  return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  return detail::make_result({1}, {s}, {a}, [](Node& self) {
    auto& g = self.parents[0]->g();
    for (double& v : g) v += self.grad[0];
  });
}

/// Weighted sum of scalars: sum_i w_i * s_i.
inline Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  require(scalars.size() == weights.size() && !scalars.empty(), ErrorCode::ShapeMismatch,
          "weighted_sum needs matching non-empty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) s += weights[i] * scalars[i].item();
  return detail::make_result({1}, {s}, scalars, [weights](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (detail::wants(self, i)) self.parents[i]->g()[0] += weights[i] * self.grad[0];
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix ops on [rows, cols] tensors

inline Var matmul(const Var& a, const Var& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  require(b.dim(0) == k, ErrorCode::ShapeMismatch,
          [&] { return "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()); });
  std::vector<double> out(n * m, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }
  return detail::make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& go = self.grad;
    if (detail::wants(self, 0)) {
      auto& ga = self.parents[0]->g();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += go[i * m + j] * bv[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (detail::wants(self, 1)) {
      auto& gb = self.parents[1]->g();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += x * go[i * m + j];
        }
    }
  });
}

/// x[n,k] * W[k,m] + bias[m].
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
  require(w.dim(0) == k && bias.numel() == m, ErrorCode::ShapeMismatch,
          [&] { return "linear " + shape_string(x.shape()) + " x " + shape_string(w.shape()); });
  std::vector<double> out(n * m);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out[i * m];
    for (std::size_t j = 0; j < m; ++j) orow[j] = bv[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double a = xv[i * k + p];
      if (a == 0.0) continue;
      const double* wrow = &wv[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += a * wrow[j];
    }
  }
  return detail::make_result({n, m}, std::move(out), {x, w, bias}, [n, k, m](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const auto& go = self.grad;
    if (detail::wants(self, 0)) {
      auto& gx = self.parents[0]->g();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* wrow = &wv[p * m];
          const double* grow = &go[i * m];
          for (std::size_t j = 0; j < m; ++j) s += grow[j] * wrow[j];
          gx[i * k + p] += s;
        }
    }
    if (detail::wants(self, 1)) {
      auto& gw = self.parents[1]->g();
      const double fault = gradient_fault_scale();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double a = xv[i * k + p] * fault;
          if (a == 0.0) continue;
          double* gwrow = &gw[p * m];
          const double* grow = &go[i * m];
          for (std::size_t j = 0; j < m; ++j) gwrow[j] += a * grow[j];
        }
    }
    if (detail::wants(self, 2)) {
      auto& gb = self.parents[2]->g();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
    }
  });
}

/// Row-wise layer normalisation of x[n, m] with affine gamma, beta [m].
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(n * m), xhat(n * m), inv_std(n);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += xv[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (xv[i * m + j] - mu) * (xv[i * m + j] - mu);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (xv[i * m + j] - mu) * inv_std[i];
      out[i * m + j] = xhat[i * m + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result(
      {n, m}, std::move(out), {x, gamma, beta},
      [n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = self.parents[1]->value;
        const auto& go = self.grad;
        if (detail::wants(self, 1)) {
          auto& gg = self.parents[1]->g();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gg[j] += go[i * m + j] * xhat[i * m + j];
        }
        if (detail::wants(self, 2)) {
          auto& gb = self.parents[2]->g();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
        }
        if (detail::wants(self, 0)) {
          auto& gx = self.parents[0]->g();
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = go[i * m + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * m + j];
            }
            mean_d /= static_cast<double>(m);
            mean_dx /= static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) {
              const double d = go[i * m + j] * gv[j];
              gx[i * m + j] += inv_std[i] * (d - mean_d - xhat[i * m + j] * mean_dx);
            }
          }
        }
      });
}

/// Concatenates [n, m_i] blocks along columns.
inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat of nothing");
  const std::size_t n = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.dim(0) == n, ErrorCode::ShapeMismatch, "concat row mismatch");
    widths.push_back(p.numel() / n);
    total += widths.back();
  }
  std::vector<double> out(n * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(&v[i * widths[k]], widths[k], &out[i * total + off]);
    off += widths[k];
  }
  return detail::make_result({n, total}, std::move(out), parts, [n, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (detail::wants(self, k)) {
        auto& g = self.parents[k]->g();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.dim(0), m = x.dim(1), w = end - begin;
  require(begin <= end && end <= m, ErrorCode::ShapeMismatch, "slice_cols out of range");
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(&x.value()[i * m + begin], w, &out[i * w]);
  return detail::make_result({n, w}, std::move(out), {x}, [n, m, w, begin](Node& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * m + begin + j] += self.grad[i * w + j];
  });
}

/// Stacks [n_i, m] blocks vertically.
inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat of nothing");
  const std::size_t m = parts[0].numel() / std::max<std::size_t>(1, parts[0].dim(0));
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Var& p : parts) {
    require(p.dim(0) == 0 || p.numel() / p.dim(0) == m, ErrorCode::ShapeMismatch, "concat_rows width mismatch");
    rows += p.dim(0);
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  return detail::make_result({rows, m}, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t n = self.parents[k]->value.size();
      if (detail::wants(self, k)) {
        auto& g = self.parents[k]->g();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

/// Picks rows of x[n, m] by index; repeated indices accumulate gradient.
inline Var gather_rows(const Var& x, std::vector<std::size_t> rows) {
  const std::size_t m = x.numel() / x.dim(0);
  std::vector<double> out(rows.size() * m);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(&x.value()[rows[r] * m], m, &out[r * m]);
  const std::size_t count = rows.size();
  return detail::make_result({count, m}, std::move(out), {x}, [m, rows = std::move(rows)](Node& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) g[rows[r] * m + j] += self.grad[r * m + j];
  });
}

/// Sinusoidal features of x[n, c]: for each column and frequency f, sin(f x), cos(f x).
inline Var sinusoid(const Var& x, std::vector<double> freqs) {
  const std::size_t n = x.dim(0), c = x.numel() / n, nf = freqs.size();
  const std::size_t width = c * nf * 2;
  std::vector<double> out(n * width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t f = 0; f < nf; ++f) {
        const double a = freqs[f] * x.value()[i * c + j];
        out[i * width + (j * nf + f) * 2] = std::sin(a);
        out[i * width + (j * nf + f) * 2 + 1] = std::cos(a);
      }
  return detail::make_result({n, width}, std::move(out), {x}, [n, c, nf, width, freqs](Node& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t f = 0; f < nf; ++f) {
          const double s = self.value[i * width + (j * nf + f) * 2];
          const double co = self.value[i * width + (j * nf + f) * 2 + 1];
          g[i * c + j] += freqs[f] * (co * self.grad[i * width + (j * nf + f) * 2] -
                                      s * self.grad[i * width + (j * nf + f) * 2 + 1]);
        }
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Row groups that attend among themselves, e.g. all slots of one point.
using Groups = std::vector<std::vector<std::size_t>>;

/// Multi-head scaled dot-product attention within each group of rows of
/// q, k, v [R, D]. Rows whose key_mask entry is 0 are never attended to;
/// a query with no admissible key outputs zeros.
inline Var grouped_attention(const Var& q, const Var& k, const Var& v, std::shared_ptr<const Groups> groups,
                             std::size_t heads, std::vector<std::uint8_t> key_mask = {}) {
  const std::size_t rows = q.dim(0), dmodel = q.dim(1);
  require(dmodel % heads == 0, ErrorCode::ShapeMismatch, "model width not divisible by heads");
  require(k.numel() == q.numel() && v.numel() == q.numel(), ErrorCode::ShapeMismatch, "qkv mismatch");
  if (key_mask.empty()) key_mask.assign(rows, 1);
  const std::size_t dh = dmodel / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  std::vector<double> out(rows * dmodel, 0.0);
  // probabilities per group, per head, L x L
  std::vector<std::vector<double>> probs(groups->size());
  for (std::size_t gi = 0; gi < groups->size(); ++gi) {
    const auto& grp = (*groups)[gi];
    const std::size_t L = grp.size();
    auto& P = probs[gi];
    P.assign(heads * L * L, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t a = 0; a < L; ++a) {
        double* prow = &P[(h * L + a) * L];
        double mx = -std::numeric_limits<double>::infinity();
        const double* qa = &qv[grp[a] * dmodel + h * dh];
        for (std::size_t b = 0; b < L; ++b) {
          if (!key_mask[grp[b]]) continue;
          const double* kb = &kv[grp[b] * dmodel + h * dh];
          double s = 0.0;
          for (std::size_t j = 0; j < dh; ++j) s += qa[j] * kb[j];
          prow[b] = s * inv;
          mx = std::max(mx, prow[b]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double z = 0.0;
        for (std::size_t b = 0; b < L; ++b) {
          prow[b] = key_mask[grp[b]] ? std::exp(prow[b] - mx) : 0.0;
          z += prow[b];
        }
        double* oa = &out[grp[a] * dmodel + h * dh];
        for (std::size_t b = 0; b < L; ++b) {
          prow[b] /= z;
          if (prow[b] == 0.0) continue;
          const double* vb = &vv[grp[b] * dmodel + h * dh];
          for (std::size_t j = 0; j < dh; ++j) oa[j] += prow[b] * vb[j];
        }
      }
    }
  }
  return detail::make_result(
      {rows, dmodel}, std::move(out), {q, k, v},
      [groups, heads, dh, dmodel, inv, probs = std::move(probs)](Node& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        const bool wq = detail::wants(self, 0), wk = detail::wants(self, 1), wv = detail::wants(self, 2);
        std::vector<double>* gq = wq ? &self.parents[0]->g() : nullptr;
        std::vector<double>* gk = wk ? &self.parents[1]->g() : nullptr;
        std::vector<double>* gv = wv ? &self.parents[2]->g() : nullptr;
        const auto& go = self.grad;
        std::vector<double> dp;
        for (std::size_t gi = 0; gi < groups->size(); ++gi) {
          const auto& grp = (*groups)[gi];
          const std::size_t L = grp.size();
          const auto& P = probs[gi];
          dp.assign(L, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t a = 0; a < L; ++a) {
              const double* prow = &P[(h * L + a) * L];
              const double* goa = &go[grp[a] * dmodel + h * dh];
              double dot = 0.0;
              for (std::size_t b = 0; b < L; ++b) {
                if (prow[b] == 0.0) {
                  dp[b] = 0.0;
                  continue;
                }
                const double* vb = &vv[grp[b] * dmodel + h * dh];
                double s = 0.0;
                for (std::size_t j = 0; j < dh; ++j) s += goa[j] * vb[j];
                dp[b] = s;
                dot += prow[b] * s;
                if (wv) {
                  double* gvb = &(*gv)[grp[b] * dmodel + h * dh];
                  for (std::size_t j = 0; j < dh; ++j) gvb[j] += prow[b] * goa[j];
                }
              }
              const double* qa = &qv[grp[a] * dmodel + h * dh];
              for (std::size_t b = 0; b < L; ++b) {
                if (prow[b] == 0.0) continue;
                const double ds = prow[b] * (dp[b] - dot) * inv;
                const double* kb = &kv[grp[b] * dmodel + h * dh];
                if (wq) {
                  double* gqa = &(*gq)[grp[a] * dmodel + h * dh];
                  for (std::size_t j = 0; j < dh; ++j) gqa[j] += ds * kb[j];
                }
                if (wk) {
                  double* gkb = &(*gk)[grp[b] * dmodel + h * dh];
                  for (std::size_t j = 0; j < dh; ++j) gkb[j] += ds * qa[j];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Image-shaped ops on [H, W, C] tensors

/// 2-D convolution, channel-last input [H, W, Cin], weights [kh, kw, Cin, Cout].
inline Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
  const std::size_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
  const std::size_t kh = w.dim(0), kw = w.dim(1), Co = w.dim(3);
  require(w.dim(2) == Ci && bias.numel() == Co, ErrorCode::ShapeMismatch,
          [&] { return "conv2d " + shape_string(x.shape()) + " with " + shape_string(w.shape()); });
  require(H + 2 * pad >= kh && W + 2 * pad >= kw, ErrorCode::ShapeMismatch, "conv2d input too small");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(Ho * Wo * Co);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      double* o = &out[(oy * Wo + ox) * Co];
      for (std::size_t co = 0; co < Co; ++co) o[co] = bv[co];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* in = &xv[(static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Ci];
          const double* wk = &wv[(ky * kw + kx) * Ci * Co];
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double a = in[ci];
            if (a == 0.0) continue;
            const double* wrow = wk + ci * Co;
            for (std::size_t co = 0; co < Co; ++co) o[co] += a * wrow[co];
          }
        }
      }
    }
  return detail::make_result(
      {Ho, Wo, Co}, std::move(out), {x, w, bias},
      [H, W, Ci, kh, kw, Co, Ho, Wo, stride, pad](Node& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        const auto& go = self.grad;
        const bool wx = detail::wants(self, 0), ww = detail::wants(self, 1);
        std::vector<double>* gx = wx ? &self.parents[0]->g() : nullptr;
        std::vector<double>* gw = ww ? &self.parents[1]->g() : nullptr;
        if (detail::wants(self, 2)) {
          auto& gb = self.parents[2]->g();
          for (std::size_t p = 0; p < Ho * Wo; ++p)
            for (std::size_t co = 0; co < Co; ++co) gb[co] += go[p * Co + co];
        }
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const double* g = &go[(oy * Wo + ox) * Co];
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t in_off = (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Ci;
                const std::size_t w_off = (ky * kw + kx) * Ci * Co;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                  const double* wrow = &wv[w_off + ci * Co];
                  if (wx) {
                    double s = 0.0;
                    for (std::size_t co = 0; co < Co; ++co) s += wrow[co] * g[co];
                    (*gx)[in_off + ci] += s;
                  }
                  if (ww) {
                    const double a = xv[in_off + ci];
                    if (a == 0.0) continue;
                    double* gwrow = &(*gw)[w_off + ci * Co];
                    for (std::size_t co = 0; co < Co; ++co) gwrow[co] += a * g[co];
                  }
                }
              }
            }
          }
      });
}

/// 2x2 average pooling with floor semantics on [H, W, C].
inline Var avg_pool2(const Var& x) {
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<double> out(Ho * Wo * C, 0.0);
  const auto& xv = x.value();
  for (std::size_t y = 0; y < Ho; ++y)
    for (std::size_t xx = 0; xx < Wo; ++xx)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const double* in = &xv[((2 * y + dy) * W + 2 * xx + dx) * C];
          double* o = &out[(y * Wo + xx) * C];
          for (std::size_t c = 0; c < C; ++c) o[c] += 0.25 * in[c];
        }
  return detail::make_result({Ho, Wo, C}, std::move(out), {x}, [W, C, Ho, Wo](Node& self) {
    auto& g = self.parents[0]->g();
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            double* gi = &g[((2 * y + dy) * W + 2 * xx + dx) * C];
            const double* go = &self.grad[(y * Wo + xx) * C];
            for (std::size_t c = 0; c < C; ++c) gi[c] += 0.25 * go[c];
          }
  });
}

namespace detail {

/// Bilinear corner weights at continuous (u, v) in cell units.
struct BilinearTaps {
  std::ptrdiff_t x0, y0;
  double ax, ay;

  BilinearTaps(double u, double v) {
    const double fu = std::floor(u), fv = std::floor(v);
    x0 = static_cast<std::ptrdiff_t>(fu);
    y0 = static_cast<std::ptrdiff_t>(fv);
    ax = u - fu;
    ay = v - fv;
  }
};

/// Reads a C-vector at an integer cell, or nullptr outside the map.
inline const double* cell(const std::vector<double>& map, std::size_t H, std::size_t W, std::size_t C,
                          std::ptrdiff_t x, std::ptrdiff_t y) {
  if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(W) || y >= static_cast<std::ptrdiff_t>(H)) return nullptr;
  return &map[(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C];
}

inline double* cell_mut(std::vector<double>& map, std::size_t H, std::size_t W, std::size_t C, std::ptrdiff_t x,
                        std::ptrdiff_t y) {
  if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(W) || y >= static_cast<std::ptrdiff_t>(H)) return nullptr;
  return &map[(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C];
}

}  // namespace detail

/// Bilinear samples of map [H, W, C] at rows of pos [N, 2] (x, y) multiplied
/// by `pos_scale`; cells outside the map read as zero.
inline Var bilinear_sample(const Var& map, const Var& pos, double pos_scale) {
  const std::size_t H = map.dim(0), W = map.dim(1), C = map.dim(2), N = pos.dim(0);
  std::vector<double> out(N * C, 0.0);
  const auto& mv = map.value();
  for (std::size_t i = 0; i < N; ++i) {
    const detail::BilinearTaps t(pos.value()[2 * i] * pos_scale, pos.value()[2 * i + 1] * pos_scale);
    const double w[4] = {(1 - t.ax) * (1 - t.ay), t.ax * (1 - t.ay), (1 - t.ax) * t.ay, t.ax * t.ay};
    const std::ptrdiff_t xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1}, ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
    for (int c4 = 0; c4 < 4; ++c4) {
      const double* f = detail::cell(mv, H, W, C, xs[c4], ys[c4]);
      if (!f || w[c4] == 0.0) continue;
      for (std::size_t c = 0; c < C; ++c) out[i * C + c] += w[c4] * f[c];
    }
  }
  return detail::make_result({N, C}, std::move(out), {map, pos}, [H, W, C, N, pos_scale](Node& self) {
    const auto& mv = self.parents[0]->value;
    const auto& pv = self.parents[1]->value;
    const bool wm = detail::wants(self, 0), wp = detail::wants(self, 1);
    for (std::size_t i = 0; i < N; ++i) {
      const detail::BilinearTaps t(pv[2 * i] * pos_scale, pv[2 * i + 1] * pos_scale);
      const double w[4] = {(1 - t.ax) * (1 - t.ay), t.ax * (1 - t.ay), (1 - t.ax) * t.ay, t.ax * t.ay};
      const double dwx[4] = {-(1 - t.ay), (1 - t.ay), -t.ay, t.ay};
      const double dwy[4] = {-(1 - t.ax), -t.ax, (1 - t.ax), t.ax};
      const std::ptrdiff_t xs[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1}, ys[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
      const double* go = &self.grad[i * C];
      for (int c4 = 0; c4 < 4; ++c4) {
        if (wm && w[c4] != 0.0) {
          double* gm = detail::cell_mut(self.parents[0]->g(), H, W, C, xs[c4], ys[c4]);
          if (gm)
            for (std::size_t c = 0; c < C; ++c) gm[c] += w[c4] * go[c];
        }
        if (wp) {
          const double* f = detail::cell(mv, H, W, C, xs[c4], ys[c4]);
          if (!f) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c) s += f[c] * go[c];
          auto& gp = self.parents[1]->g();
          gp[2 * i] += dwx[c4] * s * pos_scale;
          gp[2 * i + 1] += dwy[c4] * s * pos_scale;
        }
      }
    }
  });
}

/// Local correlation: for each row i, <q_i, map(pos_i * pos_scale + delta)>
/// for every integer offset with |delta|_inf <= radius, ordered dy-major.
inline Var local_correlation(const Var& q, const Var& map, const Var& pos, double pos_scale, int radius) {
  const std::size_t H = map.dim(0), W = map.dim(1), C = map.dim(2), N = pos.dim(0);
  require(q.dim(0) == N && q.numel() == N * C, ErrorCode::ShapeMismatch, "correlation descriptor width");
  const std::size_t side = 2 * static_cast<std::size_t>(radius) + 1, P = side * side;
  std::vector<double> out(N * P, 0.0);
  const auto& mv = map.value();
  const auto& qv = q.value();
  for (std::size_t i = 0; i < N; ++i) {
    const detail::BilinearTaps t(pos.value()[2 * i] * pos_scale, pos.value()[2 * i + 1] * pos_scale);
    const double w[4] = {(1 - t.ax) * (1 - t.ay), t.ax * (1 - t.ay), (1 - t.ax) * t.ay, t.ax * t.ay};
    const double* qi = &qv[i * C];
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        const std::size_t p = static_cast<std::size_t>(dy + radius) * side + static_cast<std::size_t>(dx + radius);
        const std::ptrdiff_t xs[4] = {t.x0 + dx, t.x0 + dx + 1, t.x0 + dx, t.x0 + dx + 1};
        const std::ptrdiff_t ys[4] = {t.y0 + dy, t.y0 + dy, t.y0 + dy + 1, t.y0 + dy + 1};
        double s = 0.0;
        for (int c4 = 0; c4 < 4; ++c4) {
          const double* f = detail::cell(mv, H, W, C, xs[c4], ys[c4]);
          if (!f || w[c4] == 0.0) continue;
          double d = 0.0;
          for (std::size_t c = 0; c < C; ++c) d += qi[c] * f[c];
          s += w[c4] * d;
        }
        out[i * P + p] = s;
      }
  }
  return detail::make_result(
      {N, P}, std::move(out), {q, map, pos}, [H, W, C, N, P, side, radius, pos_scale](Node& self) {
        const auto& qv = self.parents[0]->value;
        const auto& mv = self.parents[1]->value;
        const auto& pv = self.parents[2]->value;
        const bool wq = detail::wants(self, 0), wm = detail::wants(self, 1), wp = detail::wants(self, 2);
        for (std::size_t i = 0; i < N; ++i) {
          const detail::BilinearTaps t(pv[2 * i] * pos_scale, pv[2 * i + 1] * pos_scale);
          const double w[4] = {(1 - t.ax) * (1 - t.ay), t.ax * (1 - t.ay), (1 - t.ax) * t.ay, t.ax * t.ay};
          const double dwx[4] = {-(1 - t.ay), (1 - t.ay), -t.ay, t.ay};
          const double dwy[4] = {-(1 - t.ax), -t.ax, (1 - t.ax), t.ax};
          const double* qi = &qv[i * C];
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              const std::size_t p =
                  static_cast<std::size_t>(dy + radius) * side + static_cast<std::size_t>(dx + radius);
              const double go = self.grad[i * P + p];
              if (go == 0.0) continue;
              const std::ptrdiff_t xs[4] = {t.x0 + dx, t.x0 + dx + 1, t.x0 + dx, t.x0 + dx + 1};
              const std::ptrdiff_t ys[4] = {t.y0 + dy, t.y0 + dy, t.y0 + dy + 1, t.y0 + dy + 1};
              for (int c4 = 0; c4 < 4; ++c4) {
                const double* f = detail::cell(mv, H, W, C, xs[c4], ys[c4]);
                if (!f) continue;
                if (wq && w[c4] != 0.0) {
                  double* gq = &self.parents[0]->g()[i * C];
                  for (std::size_t c = 0; c < C; ++c) gq[c] += go * w[c4] * f[c];
                }
                if (wm && w[c4] != 0.0) {
                  double* gm = detail::cell_mut(self.parents[1]->g(), H, W, C, xs[c4], ys[c4]);
                  for (std::size_t c = 0; c < C; ++c) gm[c] += go * w[c4] * qi[c];
                }
                if (wp) {
                  double d = 0.0;
                  for (std::size_t c = 0; c < C; ++c) d += qi[c] * f[c];
                  auto& gp = self.parents[2]->g();
                  gp[2 * i] += go * dwx[c4] * d * pos_scale;
                  gp[2 * i + 1] += go * dwy[c4] * d * pos_scale;
                }
              }
            }
        }
      });
}

}  // namespace etap::ad
