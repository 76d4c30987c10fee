#include "r2r/autodiff.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <vector>

#include "test_util.hpp"

namespace r2r::ad {
namespace {

using r2r::testing::random_tensor;
using r2r::testing::rel_err;

TEST(Evaluate, IdentityGraph) {
  GraphDescription g{{Shape{2}}, [](Tape&, std::span<const Var> in) {
                       return std::vector<Var>{in[0]};
                     }};
  const std::array<Tensor, 1> inputs{Tensor::from({2}, {1, 2})};
  auto ev = evaluate(g, inputs);
  EXPECT_EQ(ev.outputs[0].vec(), (std::vector<float>{1, 2}));
}

TEST(Evaluate, AffineGraph) {
  GraphDescription g{{Shape{1, 1}, Shape{1, 1}, Shape{1}},
                     [](Tape&, std::span<const Var> in) {
                       return std::vector<Var>{bias_add(matmul(in[0], in[1], false, true), in[2])};
                     }};
  const std::array<Tensor, 3> inputs{Tensor::from({1, 1}, {3}), Tensor::from({1, 1}, {2}),
                                     Tensor::from({1}, {1})};
  auto ev = evaluate(g, inputs);
  EXPECT_FLOAT_EQ(ev.outputs[0][0], 7.0f);
}

GraphDescription two_layer_net(std::size_t in, std::size_t hidden, std::size_t out, bool smooth) {
  return GraphDescription{
      {Shape{1, in}, Shape{hidden, in}, Shape{hidden}, Shape{out, hidden}, Shape{out}},
      [smooth](Tape&, std::span<const Var> v) {
        Var h = bias_add(matmul(v[0], v[1], false, true), v[2]);
        h = smooth ? softplus(h) : relu(h);
        return std::vector<Var>{bias_add(matmul(h, v[3], false, true), v[4])};
      }};
}

std::vector<Tensor> two_layer_inputs(std::uint64_t seed) {
  return {random_tensor({1, 5}, seed), random_tensor({7, 5}, seed + 1),
          random_tensor({7}, seed + 2), random_tensor({3, 7}, seed + 3),
          random_tensor({3}, seed + 4)};
}

TEST(Evaluate, ReplayReproducesForwardExactly) {
  const auto g = two_layer_net(5, 7, 3, false);
  const auto inputs = two_layer_inputs(0);
  auto ev = evaluate(g, inputs);
  const Tensor before = ev.outputs[0];
  ev.record->replay();
  EXPECT_EQ(ev.output_vars[0].value(), before);
  auto again = evaluate(g, inputs);
  EXPECT_EQ(again.outputs[0], before);
}

TEST(Evaluate, RejectsShapeMismatchAndNonFinite) {
  const auto g = two_layer_net(5, 7, 3, false);
  auto inputs = two_layer_inputs(0);
  inputs[0] = random_tensor({1, 4}, 9);
  EXPECT_THROW(evaluate(g, inputs), ShapeError);
  inputs = two_layer_inputs(0);
  inputs[1][3] = std::nanf("");
  EXPECT_THROW(evaluate(g, inputs), NonFiniteError);
}

TEST(Gradient, Square) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3));
  Var y = mul(x, x);
  const std::array<Var, 1> wrt{x};
  EXPECT_FLOAT_EQ(gradient(t, y, wrt)[0][0], 6.0f);
}

TEST(Gradient, Product) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2));
  Var y = t.leaf(Tensor::scalar(5));
  const std::array<Var, 2> wrt{x, y};
  auto g = gradient(t, mul(x, y), wrt);
  EXPECT_FLOAT_EQ(g[0][0], 5.0f);
  EXPECT_FLOAT_EQ(g[1][0], 2.0f);
}

// Double-precision reference of sum(v2 . softplus(W1 x + b1) + b2) for the
// finite-difference oracle.
double two_layer_reference(const std::vector<std::vector<double>>& p) {
  const auto &x = p[0], &w1 = p[1], &b1 = p[2], &w2 = p[3], &b2 = p[4];
  const std::size_t in = x.size(), hid = b1.size(), out = b2.size();
  std::vector<double> h(hid);
  for (std::size_t j = 0; j < hid; ++j) {
    double z = b1[j];
    for (std::size_t i = 0; i < in; ++i) z += w1[j * in + i] * x[i];
    h[j] = std::log1p(std::exp(z));
  }
  double f = 0.0;
  for (std::size_t k = 0; k < out; ++k) {
    double z = b2[k];
    for (std::size_t j = 0; j < hid; ++j) z += w2[k * hid + j] * h[j];
    f += z * static_cast<double>(k + 1);
  }
  return f;
}

TEST(Gradient, MatchesFiniteDifferencesOnSoftplusNet) {
  const auto g = two_layer_net(5, 7, 3, true);
  const auto inputs = two_layer_inputs(11);
  auto ev = evaluate(g, inputs);
  Tape& t = *ev.record;
  Var weights = t.leaf(Tensor::from({1, 3}, {1, 2, 3}));
  Var f = sum(mul(ev.output_vars[0], weights));
  const auto grads = gradient(t, f, ev.inputs);

  std::vector<std::vector<double>> p;
  for (const auto& in : inputs) p.emplace_back(in.vec().begin(), in.vec().end());
  const double h = 1e-3;
  double worst = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (std::size_t i = 0; i < p[k].size(); ++i) {
      auto plus = p, minus = p;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fd = (two_layer_reference(plus) - two_layer_reference(minus)) / (2 * h);
      worst = std::max(worst, rel_err(grads[k][i], fd, 1e-3));
    }
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Gradient, Linearity) {
  const auto g = two_layer_net(5, 7, 3, true);
  const auto inputs = two_layer_inputs(5);
  auto ev = evaluate(g, inputs);
  Tape& t = *ev.record;
  Var out = ev.output_vars[0];
  Var f = sum(mul(out, t.leaf(Tensor::from({1, 3}, {1, 0, 0}))));
  Var h = sum(mul(out, t.leaf(Tensor::from({1, 3}, {0, 1, 1}))));
  const float alpha = 0.25f, beta = -2.0f;
  Var combo = add(scale(f, alpha), scale(h, beta));
  const auto gf = gradient(t, f, ev.inputs);
  const auto gh = gradient(t, h, ev.inputs);
  const auto gc = gradient(t, combo, ev.inputs);
  for (std::size_t k = 0; k < gc.size(); ++k) {
    for (std::size_t i = 0; i < gc[k].numel(); ++i) {
      EXPECT_NEAR(gc[k][i], alpha * gf[k][i] + beta * gh[k][i], 1e-5);
    }
  }
}

TEST(Gradient, Errors) {
  Tape t;
  Var x = t.leaf(Tensor::from({2}, {1, 2}));
  const std::array<Var, 1> wrt{x};
  EXPECT_THROW(t.gradient(mul(x, x), wrt), GraphError);
  Tape other;
  Var y = other.leaf(Tensor::scalar(1));
  const std::array<Var, 1> foreign{y};
  EXPECT_THROW(t.gradient(sum(x), foreign), GraphError);
}

TEST(Gradient, UnreachableNodeGetsZero) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2));
  Var y = t.leaf(Tensor::from({3}, {1, 2, 3}));
  const std::array<Var, 1> wrt{y};
  auto g = gradient(t, mul(x, x), wrt);
  EXPECT_EQ(g[0], Tensor::zeros({3}));
}

TEST(GradientOfPenalty, LinearModel) {
  // f = w x, penalty (df/dx)^2 = w^2, d/dw = 2w.
  Tape t;
  Var w = t.leaf(Tensor::scalar(0.7f));
  Var x = t.leaf(Tensor::scalar(1.3f));
  Var f = mul(w, x);
  const std::array<Var, 1> wrt{w};
  auto g = gradient_of_penalty(t, f, x, [](Var gx) { return mul(gx, gx); }, wrt);
  EXPECT_FLOAT_EQ(g[0][0], 1.4f);
}

TEST(GradientOfPenalty, SoftplusMatchesFiniteDifferences) {
  Tape t;
  Var w = t.leaf(Tensor::scalar(0.7f));
  Var x = t.leaf(Tensor::scalar(1.3f));
  Var f = softplus(mul(w, x));
  const std::array<Var, 1> wrt{w};
  auto g = gradient_of_penalty(t, f, x, [](Var gx) { return mul(gx, gx); }, wrt);
  // Oracle: penalty(w) = (w * sigmoid(w x))^2 evaluated in double.
  auto penalty = [](double wv) {
    const double s = 1.0 / (1.0 + std::exp(-wv * 1.3));
    return wv * s * wv * s;
  };
  const double h = 1e-3;
  const double fd = (penalty(0.7 + h) - penalty(0.7 - h)) / (2 * h);
  EXPECT_LT(rel_err(g[0][0], fd), 1e-3);
}

TEST(GradientOfPenalty, IndependentPenaltyHasZeroGradient) {
  Tape t;
  Var w = t.leaf(Tensor::scalar(0.7f));
  Var x = t.leaf(Tensor::scalar(1.3f));
  Var f = mul(w, x);
  Var c = t.leaf(Tensor::scalar(4.0f));
  const std::array<Var, 1> wrt{w};
  auto g = gradient_of_penalty(t, f, x, [c](Var) { return mul(c, c); }, wrt);
  EXPECT_EQ(g[0][0], 0.0f);
}

TEST(GradientOfPenalty, FusedCrossEntropyIsFirstOrderOnly) {
  Tape t;
  Var z = t.leaf(Tensor::from({1, 3}, {0.1f, 0.5f, -0.3f}));
  const std::array<std::size_t, 1> labels{1};
  Var loss = cross_entropy_fused(z, labels);
  const std::array<Var, 1> wrt{z};
  EXPECT_NO_THROW(t.gradient(loss, wrt, false));
  EXPECT_THROW(t.gradient(loss, wrt, true), UnsupportedSecondOrderError);
}

TEST(CrossEntropy, FusedAndDifferentiableAgree) {
  Tape t;
  Var z = t.leaf(random_tensor({4, 3}, 3));
  const std::array<std::size_t, 4> labels{0, 2, 1, 2};
  Var a = cross_entropy(z, labels);
  Var b = cross_entropy_fused(z, labels);
  EXPECT_NEAR(a.value()[0], b.value()[0], 1e-6);
  const std::array<Var, 1> wrt{z};
  auto ga = gradient(t, a, wrt)[0];
  auto gb = gradient(t, b, wrt)[0];
  EXPECT_LT(max_abs_diff(ga, gb), 1e-6);
}

// <conv(x, w), g> == <x, conv_input_grad(g, w)> == <w, conv_weight_grad(x, g)>
TEST(ConvKernels, AdjointIdentitiesHoldOnRandomShapes) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 1 + rng() % 2, ci = 1 + rng() % 3, co = 1 + rng() % 4;
    const std::size_t k = 1 + 2 * (rng() % 2), stride = 1 + rng() % 2, pad = rng() % 2;
    const std::size_t h = 5 + rng() % 4, w = 4 + rng() % 5;
    const kernels::ConvGeometry geom{stride, pad};
    Tensor x = random_tensor({n, ci, h, w}, rng());
    Tensor wt = random_tensor({co, ci, k, k}, rng());
    Tensor y = kernels::conv2d(x, wt, geom);
    Tensor g = random_tensor(y.shape(), rng());
    const double lhs = (y * g).sum();
    const double mid = (x * kernels::conv2d_input_grad(g, wt, geom, x.shape())).sum();
    const double rhs = (wt * kernels::conv2d_weight_grad(x, g, geom, wt.shape())).sum();
    EXPECT_NEAR(lhs, mid, 1e-4 * std::max(1.0, std::fabs(lhs)));
    EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::fabs(lhs)));
  }
}

}  // namespace
}  // namespace r2r::ad
