#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "conbat/autodiff/grad_check.hpp"
#include "conbat/autodiff/optimizer.hpp"
#include "op_checks.hpp"

namespace {

using namespace conbat;
using namespace conbat::ad;

TEST(Autodiff, HingeReluClampsNegatives) {
  Tape<float> tape;
  const Var x = tape.leaf(Tensor<float>({3}, {-1.0f, 0.0f, 2.0f}));
  EXPECT_EQ(tape.value(tape.hinge_relu(x)).storage(), (std::vector<float>{0.0f, 0.0f, 2.0f}));
}

TEST(Autodiff, MatmulByIdentity) {
  Rng rng(3);
  const auto x = check::random_tensor(rng, {3, 4});
  Tape<double> tape;
  const Var out = tape.matmul(tape.constant(Tensor<double>::identity(3)), tape.constant(x));
  EXPECT_EQ(tape.value(out), x);
}

TEST(Autodiff, SoftmaxOfEqualLogits) {
  Tape<float> tape;
  const Var y = tape.softmax_lastdim(tape.leaf(Tensor<float>({2}, {0.0f, 0.0f})));
  EXPECT_FLOAT_EQ(tape.value(y)[0], 0.5f);
  EXPECT_FLOAT_EQ(tape.value(y)[1], 0.5f);
}

TEST(Autodiff, SumGradientIsOnes) {
  Tape<float> tape;
  const Var x = tape.leaf(Tensor<float>({4}, {0.3f, -1.0f, 2.0f, 5.0f}));
  tape.backward(tape.sum(x));
  EXPECT_EQ(tape.grad(x).storage(), (std::vector<float>{1, 1, 1, 1}));
}

TEST(Autodiff, UnreachedLeafHasZeroGrad) {
  Tape<float> tape;
  const Var x = tape.leaf(Tensor<float>({2}, {1.0f, 2.0f}));
  const Var z = tape.leaf(Tensor<float>({3}, {4.0f, 5.0f, 6.0f}));
  tape.backward(tape.sum(tape.mul(x, x)));
  EXPECT_EQ(tape.grad(z), Tensor<float>({3}));
}

TEST(Autodiff, MseOfLinearMapMatchesFiniteDifferences) {
  Rng rng(11);
  const auto x = check::random_tensor(rng, {3, 1});
  const auto y = check::random_tensor(rng, {2, 1});
  const auto w = check::random_tensor(rng, {2, 3}, -0.1, 0.1);
  const ScalarFn f = [&](Tape<double>& t, Var wv) { return t.mse(t.matmul(wv, t.constant(x)), t.constant(y)); };
  EXPECT_LT(grad_check(f, w, 1e-3), 1e-4);
}

TEST(Autodiff, BackwardRejectsNonScalarLoss) {
  Tape<float> tape;
  const Var x = tape.leaf(Tensor<float>({2}, {1.0f, 2.0f}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Autodiff, ShapeErrorNamesOpAndShapes) {
  Tape<float> tape;
  const Var a = tape.leaf(Tensor<float>({2, 3}));
  const Var b = tape.leaf(Tensor<float>({4, 5}));
  try {
    tape.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
}

TEST(Autodiff, NonFiniteOutputRaisesNumericError) {
  Tape<float> tape;
  const Var a = tape.leaf(Tensor<float>({1}, {std::numeric_limits<float>::max()}));
  EXPECT_THROW(tape.scale(a, 10.0), NumericError);
}

TEST(Autodiff, ApplyRejectsWrongArity) {
  Tape<float> tape;
  const Var a = tape.leaf(Tensor<float>({2}));
  EXPECT_THROW(tape.apply(OpKind::matmul, {a}), UsageError);
}

TEST(GradCheck, SquareAtThree) {
  const ScalarFn f = [](Tape<double>& t, Var x) { return t.sum(t.mul(x, x)); };
  EXPECT_LT(grad_check(f, Tensor<double>({1}, {3.0}), 1e-3), 1e-5);
}

TEST(GradCheck, ConstantFunctionIsExact) {
  const ScalarFn f = [](Tape<double>& t, Var) { return t.constant(Tensor<double>::scalar(4.0)); };
  EXPECT_EQ(grad_check(f, Tensor<double>({3}, {1.0, 2.0, 3.0}), 1e-3), 0.0);
}

TEST(GradCheck, TwoLayerReluNet) {
  Rng rng(5);
  const auto x = check::random_tensor(rng, {4, 3});
  const auto w2 = check::random_tensor(rng, {6, 1});
  const auto w1 = check::random_tensor(rng, {3, 6});
  // Keep hidden pre-activations away from the kink.
  Tape<double> probe;
  const auto& h = probe.value(probe.matmul(probe.constant(x), probe.constant(w1)));
  for (double v : h.storage()) ASSERT_GT(std::abs(v), 1e-3);
  const ScalarFn f = [&](Tape<double>& t, Var w) {
    return t.sum(t.matmul(t.relu(t.matmul(t.constant(x), w)), t.constant(w2)));
  };
  EXPECT_LT(grad_check(f, w1, 1e-5), 1e-4);
}

class OpGradient : public ::testing::TestWithParam<OpKind> {};

TEST_P(OpGradient, MatchesCentralDifferencesAtRandomPoints) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double err = check::op_gradient_error(GetParam(), seed);
    ASSERT_LT(err, 1e-4) << op_name(GetParam()) << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(check::differentiable_ops()),
                         [](const auto& info) { return std::string(op_name(info.param)); });

TEST(Autodiff, BackwardIsBitIdentical) {
  Rng rng(9);
  const auto x = check::random_tensor(rng, {5, 4});
  const auto w = check::random_tensor(rng, {4, 4});
  auto run = [&] {
    Tape<float> t;
    const Var xv = t.leaf(x.cast<float>());
    const Var wv = t.leaf(w.cast<float>());
    const Var h = t.softmax_lastdim(t.causal_mask_fill(t.matmul(t.gelu(t.matmul(xv, wv)), t.transpose(xv))));
    t.backward(t.mean(h));
    return std::pair{t.grad(xv), t.grad(wv)};
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, MaskedAttentionIgnoresLaterPositions) {
  Rng rng(21);
  const std::size_t n = 6, d = 4;
  auto attend = [&](const Tensor<double>& x) {
    Tape<double> t;
    const Var xv = t.constant(x);
    const Var scores = t.scale(t.matmul(xv, t.transpose(xv)), 0.5);
    return t.value(t.matmul(t.softmax_lastdim(t.causal_mask_fill(scores)), xv));
  };
  const auto x = check::random_tensor(rng, {n, d});
  const auto base = attend(x);
  for (std::size_t j = 0; j < n; ++j) {
    auto perturbed = x;
    for (std::size_t c = 0; c < d; ++c) perturbed.at(j, c) += rng.uniform(-3.0, 3.0);
    const auto out = attend(perturbed);
    for (std::size_t i = 0; i < j; ++i) {
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at(i, c), base.at(i, c), 1e-6);
    }
  }
}

TEST(Optimizer, SgdStep) {
  Tensor<float> p({1}, {0.0f});
  std::vector<Tensor<float>*> params{&p};
  const std::vector<Tensor<float>> grads{Tensor<float>({1}, {1.0f})};
  OptimizerState<float> state;
  optimizer_step<float>({.kind = OptimizerKind::sgd, .lr = 0.1}, params, grads, state);
  EXPECT_FLOAT_EQ(p[0], -0.1f);
}

TEST(Optimizer, AdamFirstStepHasMagnitudeLr) {
  Tensor<double> p({3}, {0.0, 1.0, -2.0});
  const Tensor<double> before = p;
  std::vector<Tensor<double>*> params{&p};
  const std::vector<Tensor<double>> grads{Tensor<double>({3}, {0.5, -3.0, 1e-2})};
  OptimizerState<double> state;
  const double lr = 1e-3;
  optimizer_step<double>({.kind = OptimizerKind::adam, .lr = lr}, params, grads, state);
  for (std::size_t i = 0; i < 3; ++i) {
    const double g = grads[0][i];
    // Closed form at step 1: -lr * g / (|g| + eps).
    EXPECT_NEAR(p[i] - before[i], -lr * g / (std::abs(g) + 1e-8), 1e-12);
  }
}

TEST(Optimizer, ZeroGradLeavesParamsUnchanged) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::rmsprop}) {
    Tensor<float> p({2}, {0.25f, -4.0f});
    const Tensor<float> before = p;
    std::vector<Tensor<float>*> params{&p};
    const std::vector<Tensor<float>> grads{Tensor<float>({2})};
    OptimizerState<float> state;
    optimizer_step<float>({.kind = kind, .lr = 0.5}, params, grads, state);
    EXPECT_EQ(p, before) << optimizer_name(kind);
  }
}

TEST(Optimizer, ShapeMismatchThrows) {
  Tensor<float> p({2});
  std::vector<Tensor<float>*> params{&p};
  const std::vector<Tensor<float>> grads{Tensor<float>({3})};
  OptimizerState<float> state;
  EXPECT_THROW(optimizer_step<float>({}, params, grads, state), ShapeError);
}

TEST(Optimizer, ParsesNames) {
  EXPECT_EQ(parse_optimizer("rmsprop"), OptimizerKind::rmsprop);
  EXPECT_THROW(parse_optimizer("lbfgs"), UsageError);
}

}  // namespace
