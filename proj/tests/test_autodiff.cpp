#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "taylorseg/autodiff.hpp"
#include "taylorseg/errors.hpp"
#include "taylorseg/optim.hpp"
#include "taylorseg/params.hpp"
#include "taylorseg/tensor.hpp"

using namespace taylorseg;
using testing_support::finite_difference_check;
using testing_support::kink_free_matrix;
using testing_support::max_error;
using testing_support::random_matrix;

TEST(Tensor, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(3);
  const Tensor a = random_matrix(rng, 7, 5);
  const Tensor b = random_matrix(rng, 5, 4);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
  }
}

TEST(Tensor, BroadcastRules) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(add(a, Tensor::row({10, 20})), Tensor::from_rows({{11, 22}, {13, 24}}));
  EXPECT_EQ(mul(a, Tensor::scalar(2)), Tensor::from_rows({{2, 4}, {6, 8}}));
  EXPECT_THROW(add(a, Tensor::row({1, 2, 3})), ShapeError);
  EXPECT_THROW(matmul(a, Tensor::matrix(3, 1)), ShapeError);
}

TEST(Tensor, LayerNormConstantRowIsZero) {
  const Tensor out = layer_norm(Tensor::from_rows({{1, 1, 1, 1}}), Tensor::row({1, 1, 1, 1}),
                                Tensor::row({0, 0, 0, 0}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, LayerNormNormalizedRowUnchanged) {
  const Tensor out =
      layer_norm(Tensor::from_rows({{-1, 1}}), Tensor::row({1, 1}), Tensor::row({0, 0}));
  EXPECT_NEAR(out[0], -1.0, 1e-4);
  EXPECT_NEAR(out[1], 1.0, 1e-4);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  const Tensor s = softmax_rows(random_matrix(rng, 6, 9, -50.0, 50.0));
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(s(r, c), 0.0);
      total += s(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Tensor, MaxPoolStrideTakesChunkMaxima) {
  const Tensor x = Tensor::from_rows({{1, 9}, {5, 2}, {3, 3}, {-1, 7}, {4, 0}});
  const PoolResult p = max_pool_stride(x, 2);
  EXPECT_EQ(p.values, Tensor::from_rows({{5, 9}, {3, 7}, {4, 0}}));
}

TEST(Tensor, RequireFiniteRejectsNan) {
  Tensor t = Tensor::matrix(2, 2);
  t[3] = std::nan("");
  EXPECT_THROW(require_finite(t, "t"), NumericError);
}

TEST(Tape, UnusedLeafGetsZeroGradient) {
  Tape tape;
  Var a = tape.parameter(Tensor::row({1, 2}));
  Var b = tape.parameter(Tensor::row({3, 4}));
  Var l = sum(mul(a, a));
  tape.backward(l);
  EXPECT_EQ(a.grad(), Tensor::row({2, 4}));
  EXPECT_EQ(b.grad(), Tensor::row({0, 0}));
}

TEST(Tape, ReusedNodeAccumulates) {
  Tape tape;
  Var x = tape.parameter(Tensor::scalar(3.0));
  Var y = add(mul(x, x), x);
  tape.backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tape, ConstantsNeedNoGradient) {
  Tape tape;
  Var c = tape.constant(Tensor::row({1, 2}));
  Var d = scale(c, 2.0);
  EXPECT_FALSE(d.requires_grad());
}

// Each tracked operation against central differences of a random projection.
struct OpCase {
  const char* name;
  std::function<Var(Var)> f;
  bool positive = false;
};

class TrackedOpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(TrackedOpGradient, MatchesFiniteDifferences) {
  const OpCase& op = GetParam();
  std::mt19937_64 rng(11);
  ParamStore store;
  Tensor a = kink_free_matrix(rng, 4, 5);
  if (op.positive) {
    for (double& v : a.data()) v = std::abs(v);
  }
  store.add("a", ParamGroup::Backbone, a);
  Tensor out;
  {
    Tape tape;
    TapeParams p(tape, store);
    out = op.f(p["a"]).value();
  }
  const Tensor proj = random_matrix(rng, out.rows(), out.cols());
  auto loss = [&](TapeParams& p) {
    Var y = op.f(p["a"]);
    return sum(mul(y, p.tape().constant(proj.reshaped(y.value().shape()))));
  };
  EXPECT_LT(max_error(finite_difference_check(store, loss)), 1e-6) << op.name;
}

INSTANTIATE_TEST_SUITE_P(
    Ops, TrackedOpGradient,
    ::testing::Values(
        OpCase{"transpose", [](Var a) { return transpose(a); }},
        OpCase{"abs", [](Var a) { return abs(a); }},
        OpCase{"exp", [](Var a) { return exp(a); }},
        OpCase{"log", [](Var a) { return log(a); }, true},
        OpCase{"relu", [](Var a) { return relu(a); }},
        OpCase{"sin", [](Var a) { return sin(a); }},
        OpCase{"cos", [](Var a) { return cos(a); }},
        OpCase{"pow3", [](Var a) { return pow_scalar(a, 3.0); }},
        OpCase{"sigmoid", [](Var a) { return sigmoid(a); }},
        OpCase{"softmax", [](Var a) { return softmax_rows(a); }},
        OpCase{"maxpool", [](Var a) { return max_pool_stride(a, 3); }},
        OpCase{"gather", [](Var a) { return gather_rows(a, {2, 2, 0}); }},
        OpCase{"mean", [](Var a) { return mean(a); }},
        OpCase{"normalize", [](Var a) { return normalize_rows(a); }},
        OpCase{"self_matmul", [](Var a) { return matmul(a, transpose(a)); }},
        OpCase{"cross_entropy",
               [](Var a) {
                 const int labels[] = {1, 0, 4, 4};
                 return cross_entropy(a, labels);
               }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Tape, LayerNormAndLinearGradients) {
  std::mt19937_64 rng(12);
  ParamStore store;
  store.add("x", ParamGroup::Backbone, kink_free_matrix(rng, 3, 6));
  store.add("w", ParamGroup::Backbone, kink_free_matrix(rng, 6, 4));
  store.add("b", ParamGroup::Backbone, kink_free_matrix(rng, 1, 4));
  store.add("g", ParamGroup::Backbone, kink_free_matrix(rng, 1, 4));
  store.add("beta", ParamGroup::Backbone, kink_free_matrix(rng, 1, 4));
  const Tensor proj = random_matrix(rng, 3, 4);
  auto loss = [&](TapeParams& p) {
    Var y = layer_norm(linear(p["x"], p["w"], p["b"]), p["g"], p["beta"]);
    return sum(mul(y, p.tape().constant(proj)));
  };
  EXPECT_LT(max_error(finite_difference_check(store, loss)), 1e-6);
}

TEST(Tape, LearnablePowerGradient) {
  std::mt19937_64 rng(13);
  ParamStore store;
  store.add("a", ParamGroup::Backbone, kink_free_matrix(rng, 3, 3));
  store.add("p", ParamGroup::Backbone, Tensor::scalar(1.7));
  auto loss = [&](TapeParams& p) { return sum(pow_scalar(p["a"], p["p"])); };
  EXPECT_LT(max_error(finite_difference_check(store, loss)), 1e-6);
}

TEST(Loss, UniformLogitsGiveLogClassCount) {
  for (int classes = 2; classes <= 6; ++classes) {
    Tape tape;
    Var logits = tape.constant(Tensor::matrix(10, static_cast<std::size_t>(classes), 0.37));
    std::vector<int> labels(10);
    for (int i = 0; i < 10; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
    EXPECT_NEAR(cross_entropy(logits, labels).value()[0], std::log(classes), 1e-9);
  }
}

TEST(Loss, RejectsOutOfRangeLabel) {
  Tape tape;
  Var logits = tape.constant(Tensor::matrix(2, 3));
  const int labels[] = {0, 3};
  EXPECT_ANY_THROW(cross_entropy(logits, labels));
}

TEST(Optim, FirstAdamWStepByHand) {
  ParamStore store;
  store.add("w", ParamGroup::Backbone, Tensor::row({1.0, -2.0}));
  GradMap grads{{"w", Tensor::row({0.5, -4.0})}};
  OptimState state;
  const std::string names[] = {"w"};
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(store, grads, names, state, 0.01, cfg);
  // Bias-corrected first step moves by lr * g / (|g| + eps) after decay.
  const double w0 = 1.0 - 0.01 * 0.1 * 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
  const double w1 = -2.0 - 0.01 * 0.1 * -2.0 + 0.01 * 4.0 / (4.0 + 1e-8);
  EXPECT_NEAR(store.get("w")[0], w0, 1e-12);
  EXPECT_NEAR(store.get("w")[1], w1, 1e-12);
  EXPECT_EQ(state.step, 1u);
}

TEST(Optim, ZeroGradientOnlyDecays) {
  ParamStore store;
  store.add("w", ParamGroup::Backbone, Tensor::row({3.0}));
  GradMap grads{{"w", Tensor::row({0.0})}};
  OptimState state;
  const std::string names[] = {"w"};
  adamw_step(store, grads, names, state, 0.1);
  EXPECT_NEAR(store.get("w")[0], 3.0 * (1.0 - 0.1 * 0.01), 1e-15);
}

TEST(Optim, UntouchedNamesStayPut) {
  ParamStore store;
  store.add("a", ParamGroup::Backbone, Tensor::row({1.0}));
  store.add("b", ParamGroup::App, Tensor::row({1.0}));
  GradMap grads{{"a", Tensor::row({1.0})}, {"b", Tensor::row({1.0})}};
  OptimState state;
  const std::string names[] = {"a"};
  adamw_step(store, grads, names, state, 0.1);
  EXPECT_NE(store.get("a")[0], 1.0);
  EXPECT_EQ(store.get("b")[0], 1.0);
}

TEST(Optim, ScheduleHalves) {
  EXPECT_DOUBLE_EQ(lr_schedule(0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(6999), 1e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(7000), 5e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(21000), 1.25e-4);
  EXPECT_THROW(lr_schedule(-1), ConfigError);
}

TEST(Params, DuplicateNameRejected) {
  ParamStore store;
  store.add("x", ParamGroup::Backbone, Tensor::scalar(1));
  EXPECT_THROW(store.add("x", ParamGroup::App, Tensor::scalar(2)), ConfigError);
  EXPECT_EQ(store.scalar_count(), 1u);
}
