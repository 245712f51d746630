/*
 * Copyright 2026 The GRAPHITE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */


#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "graphite/autodiff.hpp"

using namespace graphite;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (double& v : t.data) v = u(rng);
  return t;
}

// Reduces an op output to a scalar through fixed random weights so every
// output entry contributes a distinct gradient.
Var weighted_sum(Tape& t, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, t.constant(random_tensor(y.rows(), y.cols(), rng))));
}

using UnaryOp = std::function<Var(Var)>;

double check_unary(const UnaryOp& op, Tensor x) {
  return grad_check([&](Tape& t) { return weighted_sum(t, op(t.param(x)), 99); }, {&x});
}

double check_binary(const std::function<Var(Var, Var)>& op, Tensor a, Tensor b) {
  return grad_check([&](Tape& t) { return weighted_sum(t, op(t.param(a), t.param(b)), 98); },
                    {&a, &b});
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Tensor, ShapeMismatchThrows) {
  EXPECT_THROW(Tensor(2, 3, std::vector<double>{1, 2}), ValidationError);
}

TEST(Autodiff, MatmulValueAndGradient) {
  Tape t;
  Var a = t.constant(Tensor(2, 2, {1, 2, 3, 4}));
  Var b = t.constant(Tensor(2, 1, {5, 6}));
  const Tensor& y = matmul(a, b).value();
  EXPECT_DOUBLE_EQ(y(0, 0), 17);
  EXPECT_DOUBLE_EQ(y(1, 0), 39);
  std::mt19937_64 rng(1);
  EXPECT_LT(check_binary([](Var p, Var q) { return matmul(p, q); }, random_tensor(3, 4, rng),
                         random_tensor(4, 2, rng)),
            kTol);
}

TEST(Autodiff, MatmulShapeError) {
  Tape t;
  Var a = t.constant(Tensor(2, 3));
  Var b = t.constant(Tensor(2, 3));
  EXPECT_THROW(matmul(a, b), ValidationError);
}

TEST(Autodiff, ElementwiseBinaryOps) {
  std::mt19937_64 rng(2);
  auto a = random_tensor(3, 2, rng);
  auto b = random_tensor(3, 2, rng, 0.5, 1.5);
  EXPECT_LT(check_binary([](Var p, Var q) { return add(p, q); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var p, Var q) { return sub(p, q); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var p, Var q) { return mul(p, q); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var p, Var q) { return div(p, q); }, a, b), kTol);
}

TEST(Autodiff, BroadcastOps) {
  std::mt19937_64 rng(3);
  EXPECT_LT(check_binary([](Var p, Var q) { return add_bias(p, q); }, random_tensor(4, 3, rng),
                         random_tensor(1, 3, rng)),
            kTol);
  EXPECT_LT(check_binary([](Var p, Var q) { return mul_col(p, q); }, random_tensor(4, 3, rng),
                         random_tensor(4, 1, rng)),
            kTol);
}

TEST(Autodiff, UnaryOps) {
  std::mt19937_64 rng(4);
  auto x = random_tensor(3, 3, rng);
  // Keep leaky_relu/relu/clamp inputs away from their kinks.
  for (double& v : x.data)
    if (std::abs(v) < 0.05) v += 0.1;
  EXPECT_LT(check_unary([](Var v) { return scale(v, -2.5); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return add_scalar(v, 3.0); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return neg(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return leaky_relu(v, 0.2); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return relu(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return sigmoid(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return exp(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return clamp(v, -0.5, 0.5); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return transpose(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return l2_normalize_rows(v); }, x), kTol);
  auto pos = random_tensor(3, 3, rng, 0.2, 2.0);
  EXPECT_LT(check_unary([](Var v) { return log(v); }, pos), kTol);
}

TEST(Autodiff, Reductions) {
  std::mt19937_64 rng(5);
  auto x = random_tensor(4, 3, rng);
  EXPECT_LT(check_unary([](Var v) { return sum(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return mean(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return mean_rows(v); }, x), kTol);
  EXPECT_LT(check_unary([](Var v) { return sum_cols(v); }, x), kTol);
}

TEST(Autodiff, SoftmaxFamily) {
  std::mt19937_64 rng(6);
  auto x = random_tensor(4, 3, rng, -2.0, 2.0);
  for (int axis : {0, 1}) {
    EXPECT_LT(check_unary([axis](Var v) { return softmax(v, axis); }, x), kTol);
    EXPECT_LT(check_unary([axis](Var v) { return log_softmax(v, axis); }, x), kTol);
  }
  auto col = random_tensor(7, 1, rng, -2.0, 2.0);
  EXPECT_LT(check_unary([](Var v) { return segment_softmax(v, {0, 2, 0, 1, 2, 2, 0}, 4); }, col),
            kTol);
}

TEST(Autodiff, StructuralOps) {
  std::mt19937_64 rng(7);
  auto a = random_tensor(3, 2, rng);
  auto b = random_tensor(3, 4, rng);
  EXPECT_LT(check_binary([](Var p, Var q) { return concat_cols({p, q}); }, a, b), kTol);
  auto c = random_tensor(2, 2, rng);
  EXPECT_LT(check_binary([](Var p, Var q) { return concat_rows({p, q}); }, a, c), kTol);
  EXPECT_LT(check_unary([](Var v) { return gather_rows(v, {2, 0, 2, 1}); }, a), kTol);
  EXPECT_LT(check_unary([](Var v) { return scatter_add_rows(v, {1, 1, 3}, 5); }, a), kTol);
}

TEST(Autodiff, SoftmaxSumsToOne) {
  std::mt19937_64 rng(8);
  Tape t;
  auto x = random_tensor(5, 4, rng, -30.0, 30.0);
  const Tensor& y0 = softmax(t.constant(x), 0).value();
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 5; ++r) s += y0(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const Tensor& ys = segment_softmax(t.constant(random_tensor(6, 1, rng, -50, 50)),
                                     {0, 1, 0, 1, 1, 3}, 4)
                         .value();
  EXPECT_NEAR(ys.data[0] + ys.data[2], 1.0, 1e-12);
  EXPECT_NEAR(ys.data[1] + ys.data[3] + ys.data[4], 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(ys.data[5], 1.0);
}

TEST(Autodiff, FanOutAccumulates) {
  // y = x * x + x reuses x three times: dy/dx = 2x + 1.
  Tensor x(1, 1, std::vector<double>{1.5});
  Tape t;
  Var v = t.param(x);
  t.backward(sum(add(mul(v, v), v)));
  ASSERT_TRUE(x.grad.has_value());
  EXPECT_DOUBLE_EQ((*x.grad)[0], 4.0);
}

TEST(Autodiff, BackwardRequiresScalar) {
  Tape t;
  Tensor x(2, 2, 1.0);
  Var v = t.param(x);
  EXPECT_THROW(t.backward(v), ValidationError);
}

TEST(GradCheck, ConstantFunctionHasZeroNumericGradient) {
  Tensor x(2, 2, 0.3);
  const double err = grad_check(
      [&](Tape& t) {
        t.param(x);
        return t.constant(Tensor::scalar(4.0));
      },
      {&x});
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A deliberately broken op: forward x^2, backward claims 3x.
  Tensor x(1, 3, std::vector<double>{0.5, -1.0, 2.0});
  auto broken = [](Var a) {
    Tensor y = a.value();
    for (double& v : y.data) v = v * v;
    const std::size_t ia = a.id();
    return a.tape().record(std::move(y), {ia}, [ia](Tape& tp, std::size_t self) {
      const auto& g = tp.out_grad(self);
      const auto& xv = tp.value(ia).data;
      auto& ga = tp.adjoint(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 3.0 * xv[i] * g[i];
    });
  };
  EXPECT_GT(grad_check([&](Tape& t) { return sum(broken(t.param(x))); }, {&x}), 0.1);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  Tensor x(1, 1, 1.0);
  EXPECT_THROW(grad_check([&](Tape& t) { return sum(t.param(x)); }, {&x}, 0.0), ValidationError);
}
