#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "tma/autodiff.hpp"
#include "tma/gradcheck.hpp"
#include "tma/random.hpp"
#include "tma/tensor.hpp"

using namespace tma;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Central difference of a scalar function of a tensor, one coordinate.
double numeric(const std::function<double(const Tensor&)>& f, Tensor x, std::size_t i,
               double eps = 1e-6) {
  const double keep = x[i];
  x[i] = keep + eps;
  const double up = f(x);
  x[i] = keep - eps;
  const double down = f(x);
  return (up - down) / (2 * eps);
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.at(1, 2), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(m += Tensor::zeros(Shape{3, 2}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(squared_norm(m), 91.0);
}

TEST(Tensor, SoftmaxIsShiftInvariantAndStable) {
  const auto a = softmax(std::vector<double>{1.0, 2.0, 3.0});
  const auto b = softmax(std::vector<double>{1001.0, 1002.0, 1003.0});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a[i], std::exp(1.0 + i) / z, 1e-15);
    EXPECT_NEAR(a[i], b[i], 1e-15);
  }
  EXPECT_TRUE(all_finite(Tensor::vector(b)));
}

TEST(Random, StreamsAreDeterministicAndIndependent) {
  Rng a = make_rng(5, "init"), b = make_rng(5, "init"), c = make_rng(5, "dropout"),
      d = make_rng(6, "init");
  const auto x = a(), y = b(), z = c(), w = d();
  EXPECT_EQ(x, y);
  EXPECT_NE(x, z);
  EXPECT_NE(x, w);
}

TEST(Autodiff, ElementwiseOps) {
  Tape t;
  Tensor xs = Tensor::vector({0.3, -1.2});
  Tensor ys = Tensor::vector({2.0, 0.5});
  Var x = t.param("x", xs), y = t.param("y", ys);
  // L = sum(sigmoid(x) * tanh(y)) + 3 * sum(x)
  Var l = add(dot(sigmoid(x), tanh(y)),
              scale(dot(x, t.constant(Tensor::vector({1.0, 1.0}))), 3.0));
  GradientSet g = t.backward(l);
  for (std::size_t i = 0; i < 2; ++i) {
    const double s = sig(xs[i]);
    EXPECT_NEAR(g["x"][i], s * (1 - s) * std::tanh(ys[i]) + 3.0, 1e-14);
    EXPECT_NEAR(g["y"][i], s * (1 - std::tanh(ys[i]) * std::tanh(ys[i])), 1e-14);
  }
}

TEST(Autodiff, SharedLeafAccumulates) {
  Tape t;
  Tensor xs = Tensor::vector({1.5});
  Var x = t.param("x", xs);
  Var x2 = t.param("x", xs);
  EXPECT_EQ(x.id(), x2.id());
  // L = x*x + x
  Var l = add(mul(x, x2), x);
  EXPECT_NEAR(t.backward(l)["x"][0], 2 * 1.5 + 1, 1e-15);
}

TEST(Autodiff, BackwardRequiresScalarAndRecording) {
  Tape t;
  Tensor xs = Tensor::vector({1.0, 2.0});
  Var x = t.param("x", xs);
  EXPECT_THROW(t.backward(x), std::invalid_argument);
  Tape off(false);
  Var y = off.param("x", xs);
  EXPECT_THROW(off.backward(sum_squares(y)), std::logic_error);
}

TEST(Autodiff, LogAtClampsAndBlocksGradient) {
  Tape t;
  Tensor ps = Tensor::vector({0.25, 0.0});
  Var p = t.param("p", ps);
  Var l = add(log_at(p, 0), log_at(p, 1));
  EXPECT_NEAR(l.value()[0], std::log(0.25) + std::log(1e-12), 1e-12);
  EXPECT_EQ(t.clamped_logs(), 1u);
  GradientSet g = t.backward(l);
  EXPECT_NEAR(g["p"][0], 4.0, 1e-14);
  EXPECT_EQ(g["p"][1], 0.0);
}

TEST(Autodiff, SoftmaxJacobianMatchesFiniteDifference) {
  const Tensor w = Tensor::vector({0.2, -0.7, 1.1, 0.05});
  Tensor xs = Tensor::vector({0.4, -0.3, 0.9, -1.5});
  auto f = [&](const Tensor& x) {
    const auto p = softmax(x.values());
    double s = 0;
    for (std::size_t i = 0; i < 4; ++i) s += w[i] * p[i];
    return s;
  };
  Tape t;
  Var x = t.param("x", xs);
  GradientSet g = t.backward(dot(softmax(x), t.constant(w)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g["x"][i], numeric(f, xs, i), 1e-9);
}

TEST(Autodiff, AffineMatchesHandProduct) {
  Tape t;
  Tensor Ws = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor Us = Tensor::matrix(2, 1, {-1, 0.5});
  Tensor bs = Tensor::vector({0.1, 0.2});
  Tensor xs = Tensor::vector({1, -1, 2});
  Tensor hs = Tensor::vector({3});
  Var W = t.param("W", Ws), U = t.param("U", Us), b = t.param("b", bs), x = t.param("x", xs),
      h = t.param("h", hs);
  Var y = affine({AffineTerm{W, x}, AffineTerm{U, h}}, b);
  EXPECT_NEAR(y.value()[0], 1 - 2 + 6 - 3 + 0.1, 1e-15);
  EXPECT_NEAR(y.value()[1], 4 - 5 + 12 + 1.5 + 0.2, 1e-15);
  // d(sum_i c_i y_i)/dW_ij = c_i x_j
  const Tensor c = Tensor::vector({2.0, -1.0});
  GradientSet g = t.backward(dot(y, t.constant(c)));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g["W"].at(i, j), c[i] * xs[j], 1e-15);
  EXPECT_NEAR(g["x"][2], c[0] * 3 + c[1] * 6, 1e-15);
  EXPECT_NEAR(g["h"][0], c[0] * -1 + c[1] * 0.5, 1e-15);
  EXPECT_NEAR(g["b"][1], -1.0, 1e-15);
}

TEST(Autodiff, RowOpsMatchFiniteDifference) {
  // L = w . tanh(weighted_sum_rows(softmax(additive_scores(q, A P^T + b, v)), A))
  Tensor As = Tensor::matrix(3, 2, {0.3, -0.2, 0.8, 0.1, -0.5, 0.7});
  Tensor Ps = Tensor::matrix(2, 2, {0.4, -0.6, 0.2, 0.9});
  Tensor bs = Tensor::vector({0.05, -0.1});
  Tensor qs = Tensor::vector({0.3, -0.4});
  Tensor vs = Tensor::vector({1.2, -0.8});
  const Tensor w = Tensor::vector({0.7, -1.3});
  auto build = [&](Tape& t) {
    Var A = t.param("A", As), P = t.param("P", Ps), b = t.param("b", bs), q = t.param("q", qs),
        v = t.param("v", vs);
    Var alpha = softmax(additive_scores(q, project_rows(A, P, b), v));
    return dot(tanh(add(weighted_sum_rows(alpha, A), mean_rows(A))), t.constant(w));
  };
  Tape t;
  GradientSet g = t.backward(build(t));
  std::map<std::string, Tensor*> leaves{{"A", &As}, {"P", &Ps}, {"b", &bs}, {"q", &qs}, {"v", &vs}};
  for (auto& [name, storage] : leaves)
    for (std::size_t i = 0; i < storage->size(); ++i) {
      auto f = [&](const Tensor& x) {
        const Tensor keep = *storage;
        *storage = x;
        Tape tt(false);
        const double v = build(tt).value()[0];
        *storage = keep;
        return v;
      };
      EXPECT_NEAR(g[name][i], numeric(f, *storage, i), 1e-9) << name << "[" << i << "]";
    }
}

TEST(Autodiff, ConcatStackAndRowRouteGradients) {
  Tape t;
  Tensor as = Tensor::vector({1, 2}), bs = Tensor::vector({3});
  Var a = t.param("a", as), b = t.param("b", bs);
  Var c = concat({a, b});
  ASSERT_EQ(c.value().size(), 3u);
  Var m = stack_rows(std::vector<Var>{c, c});
  Var r = row(m, 1);
  GradientSet g = t.backward(dot(r, t.constant(Tensor::vector({10, 20, 30}))));
  EXPECT_EQ(g["a"][0], 10.0);
  EXPECT_EQ(g["a"][1], 20.0);
  EXPECT_EQ(g["b"][0], 30.0);
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 0.1);  // floor at 1e-8
}

TEST(GradCheck, LayerGroupDropsLeafName) {
  EXPECT_EQ(layer_group("enc.cur.fwd.W_i"), "enc.cur.fwd");
  EXPECT_EQ(layer_group("att.prev_caption.U_a"), "att.prev_caption");
  EXPECT_EQ(layer_group("embedding"), "embedding");
}

TEST(GradCheck, DetectsAWrongGradient) {
  std::map<std::string, Tensor> params{{"x", Tensor::vector({0.5, -0.25})}};
  GraphLoss right = [](Tape& t, const std::map<std::string, Tensor>& p) {
    return sum_squares(t.param("x", p.at("x")));
  };
  GraphLoss wrong = [](Tape& t, const std::map<std::string, Tensor>& p) {
    Var x = t.param("x", p.at("x"));
    // sum_squares value, but the gradient only sees one factor of x
    return dot(x, t.constant(p.at("x")));
  };
  EXPECT_LT(check_gradients(params, {}, right, 1e-5).max_relative_error, 1e-8);
  EXPECT_NEAR(check_gradients(params, {}, wrong, 1e-5).max_relative_error, 0.5, 1e-6);
  EXPECT_THROW(check_gradients(params, {}, right, 0.1), std::invalid_argument);
}
