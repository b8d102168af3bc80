#include <gtest/gtest.h>

#include <random>

#include "etap/autodiff.hpp"
#include "etap/feature_engine.hpp"
#include "etap/losses.hpp"

using namespace etap;

namespace {

struct Rand {
  std::mt19937_64 rng{42};
  std::vector<double> vec(std::size_t n, double s = 1.0) {
    std::normal_distribution<double> nd(0.0, s);
    std::vector<double> v(n);
    for (double& x : v) x = nd(rng);
    return v;
  }
  ad::Var param(ad::Shape shape, double s = 1.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return ad::parameter(shape, vec(n, s));
  }
};

/// Random linear read-out so every output element matters.
ad::Var project(const ad::Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> r(y.numel());
  for (double& x : r) x = nd(rng);
  return ad::sum(ad::mul(y, ad::constant(y.shape(), r)));
}

void expect_grads(const std::function<ad::Var()>& f, const NamedParams& params, double tol = 1e-6) {
  GradCheckOptions opt;
  opt.epsilon = 1e-5;
  const GradCheckResult r = grad_check([&] { return project(f(), 7); }, params, opt);
  EXPECT_LT(r.max_rel_error, tol) << r.worst_param << "[" << r.worst_index << "] analytic " << r.analytic
                                  << " numeric " << r.numeric;
  EXPECT_GT(r.checked, 0u);
}

}  // namespace

TEST(Autodiff, Elementwise) {
  Rand R;
  auto a = R.param({3, 4}), b = R.param({3, 4});
  expect_grads([&] { return ad::add(a, b); }, {{"a", a}, {"b", b}});
  expect_grads([&] { return ad::sub(a, b); }, {{"a", a}, {"b", b}});
  expect_grads([&] { return ad::mul(a, b); }, {{"a", a}, {"b", b}});
  expect_grads([&] { return ad::scale(a, -2.5); }, {{"a", a}});
  expect_grads([&] { return ad::gelu(a); }, {{"a", a}});
  expect_grads([&] { return ad::sigmoid(a); }, {{"a", a}});
  expect_grads([&] { return ad::reshape(a, {4, 3}); }, {{"a", a}});
}

TEST(Autodiff, Reductions) {
  Rand R;
  auto a = R.param({2, 5});
  expect_grads([&] { return ad::sum(a); }, {{"a", a}});
  auto s1 = R.param({1}), s2 = R.param({1});
  expect_grads([&] { return ad::weighted_sum({s1, s2}, {0.8, 1.0}); }, {{"s1", s1}, {"s2", s2}});
}

TEST(Autodiff, MatmulAndLinear) {
  Rand R;
  auto x = R.param({4, 3}), w = R.param({3, 5}), b = R.param({5});
  expect_grads([&] { return ad::matmul(x, w); }, {{"x", x}, {"w", w}});
  expect_grads([&] { return ad::linear(x, w, b); }, {{"x", x}, {"w", w}, {"b", b}});
}

TEST(Autodiff, LayerNorm) {
  Rand R;
  auto x = R.param({3, 6}), g = R.param({6}), b = R.param({6});
  expect_grads([&] { return ad::layer_norm(x, g, b); }, {{"x", x}, {"g", g}, {"b", b}});
}

TEST(Autodiff, Shuffles) {
  Rand R;
  auto a = R.param({3, 2}), b = R.param({3, 4}), c = R.param({2, 2});
  expect_grads([&] { return ad::concat_cols({a, b}); }, {{"a", a}, {"b", b}});
  expect_grads([&] { return ad::slice_cols(b, 1, 3); }, {{"b", b}});
  expect_grads([&] { return ad::concat_rows({a, c}); }, {{"a", a}, {"c", c}});
  expect_grads([&] { return ad::gather_rows(a, {2, 0, 0, 1}); }, {{"a", a}});
  expect_grads([&] { return ad::sinusoid(a, {1.0, 0.5, 0.25}); }, {{"a", a}});
}

TEST(Autodiff, GroupedAttentionWithMask) {
  Rand R;
  auto q = R.param({6, 4}), k = R.param({6, 4}), v = R.param({6, 4});
  auto groups = std::make_shared<ad::Groups>(ad::Groups{{0, 1, 2}, {3, 4, 5}});
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 1};
  expect_grads([&] { return ad::grouped_attention(q, k, v, groups, 2, mask); }, {{"q", q}, {"k", k}, {"v", v}});
}

TEST(Autodiff, AttentionRespectsGroupsAndMask) {
  Rand R;
  auto q = R.param({4, 2}), k = R.param({4, 2}), v = R.param({4, 2});
  auto groups = std::make_shared<ad::Groups>(ad::Groups{{0, 1}, {2, 3}});
  const auto out = ad::grouped_attention(q, k, v, groups, 1, {1, 0, 0, 0});
  // group 0 only sees row 0; group 1 has no admissible key
  for (int c = 0; c < 2; ++c) {
    EXPECT_NEAR(out.value()[c], v.value()[c], 1e-12);
    EXPECT_NEAR(out.value()[2 + c], v.value()[c], 1e-12);
    EXPECT_EQ(out.value()[4 + c], 0.0);
    EXPECT_EQ(out.value()[6 + c], 0.0);
  }
}

TEST(Autodiff, Conv2dAndPool) {
  Rand R;
  auto x = R.param({6, 5, 2}), w = R.param({3, 3, 2, 3}, 0.5), b = R.param({3});
  expect_grads([&] { return ad::conv2d(x, w, b, 1, 1); }, {{"x", x}, {"w", w}, {"b", b}});
  expect_grads([&] { return ad::conv2d(x, w, b, 2, 1); }, {{"x", x}, {"w", w}, {"b", b}});
  auto y = R.param({4, 6, 3});
  expect_grads([&] { return ad::avg_pool2(y); }, {{"y", y}});
}

TEST(Autodiff, BilinearAndCorrelation) {
  Rand R;
  auto map = R.param({5, 6, 3});
  // positions away from integer cells keep the sample differentiable
  auto pos = ad::parameter({3, 2}, {1.3, 2.6, 4.7, 0.2, -0.4, 3.1});
  expect_grads([&] { return ad::bilinear_sample(map, pos, 1.0); }, {{"map", map}, {"pos", pos}});
  auto q = R.param({3, 3});
  auto pos2 = ad::parameter({3, 2}, {2.6, 5.2, 9.4, 0.6, 4.2, 7.4});
  expect_grads([&] { return ad::local_correlation(q, map, pos2, 0.5, 1); },
               {{"q", q}, {"map", map}, {"pos", pos2}});
}

TEST(Autodiff, BackwardAccumulatesAndDetachStops) {
  auto a = ad::parameter({1}, {3.0});
  ad::backward(ad::mul(a, a));
  ad::backward(ad::mul(a, a));
  EXPECT_DOUBLE_EQ(a.grad()[0], 12.0);
  auto b = ad::parameter({1}, {2.0});
  ad::backward(ad::mul(ad::detach(b), b));
  EXPECT_DOUBLE_EQ(b.grad()[0], 2.0);
}

TEST(Autodiff, NoGradGuardBuildsNoTape) {
  auto a = ad::parameter({2}, {1.0, 2.0});
  ad::Var y;
  {
    ad::NoGradGuard g;
    EXPECT_FALSE(ad::grad_enabled());
    y = ad::mul(a, a);
  }
  EXPECT_TRUE(ad::grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, ShapeMismatchThrows) {
  auto a = ad::parameter({2, 3}, std::vector<double>(6, 1.0));
  auto b = ad::parameter({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_THROW(ad::matmul(a, b), Error);
  EXPECT_THROW(ad::add(a, ad::parameter({3}, {1, 2, 3})), Error);
}
