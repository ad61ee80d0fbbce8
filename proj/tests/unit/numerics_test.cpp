#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "modicf/numerics/autograd.hpp"
#include "modicf/numerics/optim.hpp"
#include "modicf/random.hpp"

using namespace modicf;

namespace {

constexpr double kTol = sizeof(Scalar) == 4 ? 1e-3 : 1e-7;

// Random tensor with |x| > 0.05 so kinks (leaky_relu, |.|) are not straddled by the FD step.
Tensor away_from_zero(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t(r, c);
  for (auto& v : t.data()) {
    double x = rng.uniform(0.05, 1.0);
    v = static_cast<Scalar>(rng.bernoulli(0.5) ? x : -x);
  }
  return t;
}

Tensor positive(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t(r, c);
  for (auto& v : t.data()) v = static_cast<Scalar>(rng.uniform(0.5, 2.0));
  return t;
}

// Reduces any output to a scalar with random fixed weights so every output element matters.
Var weighted_sum(Var y, Rng& rng) {
  Tensor w(y.rows(), y.cols());
  for (auto& v : w.data()) v = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
  return sum(mul(y, y.tape().constant(w)));
}

double check_unary(const std::function<Var(Var)>& op, Tensor input) {
  ParameterStore store;
  ParamId x = store.add("x", std::move(input));
  return grad_check(
             [&](Tape& t) {
               Rng w(11);
               return weighted_sum(op(t.param(store, x)), w);
             },
             {&store})
      .relative_error;
}

double check_binary(const std::function<Var(Var, Var)>& op, Tensor a, Tensor b) {
  ParameterStore store;
  ParamId pa = store.add("a", std::move(a));
  ParamId pb = store.add("b", std::move(b));
  return grad_check(
             [&](Tape& t) {
               Rng w(12);
               return weighted_sum(op(t.param(store, pa), t.param(store, pb)), w);
             },
             {&store})
      .relative_error;
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor t(2, 3, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  t(1, 2) = 4;
  EXPECT_EQ(t[5], 4);
  EXPECT_THROW(Tensor(2, 2, std::vector<Scalar>{1, 2, 3}), ShapeError);
}

TEST(Tensor, MatmulHand) {
  Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(a, b), Tensor::from_rows({{19, 22}, {43, 50}}));
  EXPECT_THROW(matmul(a, Tensor(3, 1)), ShapeError);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  Tape t;
  Var s = softmax(t.constant(Tensor::from_rows({{0, 0}})));
  EXPECT_FLOAT_EQ(s.value()(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(s.value()(0, 1), 0.5f);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(3);
  Tape t;
  Tensor x = rng.normal_tensor(5, 7);
  for (auto& v : x.data()) v *= 10;
  Var s = softmax(t.constant(x));
  for (std::size_t r = 0; r < 5; ++r) {
    double acc = 0;
    for (auto v : s.value().row_span(r)) acc += v;
    EXPECT_NEAR(acc, 1.0, 1e-6);
  }
}

TEST(Ops, CosineOfSelfIsOneAndZeroVectorGivesZero) {
  Tape t;
  Var v = t.constant(Tensor::from_rows({{1, -2, 3}, {0, 0, 0}}));
  Var c = cosine_similarity(v, v);
  EXPECT_NEAR(c.value()(0, 0), 1.0, 1e-6);
  EXPECT_EQ(c.value()(1, 0), 0);
}

TEST(Ops, SigmoidOfZero) {
  Tape t;
  EXPECT_FLOAT_EQ(sigmoid(t.constant(Tensor::scalar(0))).value().item(), 0.5f);
}

TEST(Ops, LogRejectsNonPositive) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor::row({1, 0}))), std::domain_error);
}

TEST(Ops, BroadcastLimitedToScalarAndRow) {
  Tape t;
  Var m = t.constant(Tensor(3, 2, 1));
  EXPECT_NO_THROW(add(m, t.constant(Tensor::scalar(1))));
  EXPECT_NO_THROW(add(m, t.constant(Tensor::row({1, 2}))));
  EXPECT_THROW(add(m, t.constant(Tensor(3, 1))), ShapeError);
}

TEST(Backward, SumOfSquaresHand) {
  Tape t;
  Var w = t.leaf(Tensor::row({1, 2, 3}));
  t.backward(sum(mul(w, w)));
  EXPECT_EQ(t.grad(w), Tensor::row({2, 4, 6}));
}

TEST(Backward, MeanOverEmptyAxisThrows) {
  Tape t;
  Var e = t.leaf(Tensor(0, 3));
  EXPECT_THROW(mean(e), std::invalid_argument);
  EXPECT_THROW(mean(t.leaf(Tensor(2, 0)), 1), std::invalid_argument);
}

TEST(Backward, SecondCallAndNonScalarThrow) {
  Tape t;
  Var w = t.leaf(Tensor::row({1, 2}));
  EXPECT_THROW(t.backward(w), GraphError);
  Var l = sum(w);
  t.backward(l);
  EXPECT_THROW(t.backward(l), GraphError);
}

TEST(Backward, NonFiniteLossThrows) {
  Tape t;
  Var w = t.leaf(Tensor::row({std::numeric_limits<Scalar>::infinity()}));
  EXPECT_THROW(t.backward(sum(w)), std::domain_error);
}

TEST(Backward, VisitsInExactReverseOrder) {
  Tape t;
  Var a = t.leaf(Tensor::row({1, 2}));
  Var b = t.leaf(Tensor::row({3, 4}));
  Var l = sum(mul(add(a, b), tanh(a)));
  t.backward(l);
  const auto& order = t.visit_order();
  ASSERT_EQ(order.size(), t.size());
  for (std::size_t k = 0; k < order.size(); ++k) EXPECT_EQ(order[k], t.size() - 1 - k);
}

TEST(Backward, FanOutAccumulates) {
  Tape t;
  Var a = t.leaf(Tensor::row({2}));
  t.backward(sum(add(mul(a, a), a)));
  EXPECT_FLOAT_EQ(t.grad(a).item(), 5.0f);
}

TEST(GradCheck, ConstantFunctionGivesZero) {
  ParameterStore store;
  store.add("w", Tensor::row({1, 2}));
  auto r = grad_check([](Tape& t) { return t.constant(Tensor::scalar(3)); }, {&store});
  EXPECT_EQ(r.relative_error, 0.0);
}

TEST(GradCheck, LinearLayerBelow1e5) {
  Rng rng(5);
  ParameterStore store;
  Linear lin = Linear::create(store, "lin", 4, 3, rng);
  Tensor x = rng.normal_tensor(2, 4);
  // The fragment is linear, so a wide step adds no truncation error and keeps float rounding small.
  auto r = grad_check([&](Tape& t) { return sum(lin(t, store, t.constant(x))); }, {&store}, 1e-2);
  EXPECT_LT(r.relative_error, sizeof(Scalar) == 4 ? 1e-5 : 1e-9);
}

TEST(GradCheck, SkipsStepsThatStraddleAKink) {
  ParameterStore store;
  // Element 0 sits 1e-4 above the kink; a step of 1e-2 crosses it.
  ParamId w = store.add("w", Tensor::row({1e-4f, 0.5f, -0.5f}));
  auto r = grad_check([&](Tape& t) { return sum(leaky_relu(t.param(store, w))); }, {&store}, 1e-2);
  EXPECT_EQ(r.skipped_at_kinks, 1u);
  EXPECT_EQ(r.checked_scalars, 2u);
  EXPECT_LT(r.relative_error, kTol);

  KinkRecorder outer;
  {
    KinkRecorder inner;
    Tape t(false);
    leaky_relu(t.constant(Tensor::row({1, -1})));
    EXPECT_EQ(inner.signs(), (std::vector<std::uint8_t>{1, 0}));
  }
  EXPECT_TRUE(outer.signs().empty());
}

TEST(GradCheck, ThreeLayerMlp) {
  Rng rng(6);
  ParameterStore store;
  Linear l1 = Linear::create(store, "l1", 5, 8, rng);
  Linear l2 = Linear::create(store, "l2", 8, 8, rng);
  Linear l3 = Linear::create(store, "l3", 8, 1, rng);
  Tensor x = rng.normal_tensor(4, 5);
  auto r = grad_check(
      [&](Tape& t) {
        Var h = tanh(l1(t, store, t.constant(x)));
        h = sigmoid(l2(t, store, h));
        return mean(mul(l3(t, store, h), l3(t, store, h)));
      },
      {&store});
  EXPECT_LT(r.relative_error, kTol) << r.worst_parameter;
}

TEST(GradCheck, EveryElementaryOp) {
  Rng rng(7);
  const Tensor a = away_from_zero(3, 4, rng);
  const Tensor b = away_from_zero(3, 4, rng);
  const Tensor sq = away_from_zero(4, 3, rng);
  const Tensor rowv = away_from_zero(1, 4, rng);
  const Tensor pos = positive(3, 4, rng);
  const Tensor col = away_from_zero(3, 1, rng);

  EXPECT_LT(check_binary([](Var x, Var y) { return matmul(x, y); }, a, sq), kTol);
  EXPECT_LT(check_unary([](Var x) { return transpose(x); }, a), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return add(x, y); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return add(x, y); }, a, rowv), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return sub(x, y); }, a, rowv), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return mul(x, y); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return mul(x, y); }, a, Tensor::scalar(0.7f)), kTol);
  EXPECT_LT(check_unary([](Var x) { return scale(add_scalar(x, 0.3f), -2.0f); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return sum(x, 0); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return sum(x, 1); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return mean(x, 0); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return mean(x, 1); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return mean(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return sum_squares(x); }, a), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return concat({x, y}, 0); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return concat({x, y}, 1); }, a, b), kTol);
  EXPECT_LT(check_unary([](Var x) { return slice_rows(x, 1, 3); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return slice_cols(x, 1, 3); }, a), kTol);
  EXPECT_LT(check_unary(
                [](Var x) {
                  const std::vector<std::size_t> idx{2, 0, 2};
                  return gather_rows(x, idx);
                },
                a),
            kTol);
  EXPECT_LT(check_unary([](Var x) { return softmax(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return sigmoid(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return log_sigmoid(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return tanh(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return leaky_relu(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return exp(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return log(x); }, pos), kTol);
  EXPECT_LT(check_unary([](Var x) { return l2_norm(x); }, a), kTol);
  EXPECT_LT(check_unary([](Var x) { return normalize_rows(x); }, a), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return cosine_similarity(x, y); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return mse(x, y); }, a, b), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return scale_rows(x, y); }, a, col), kTol);
  EXPECT_LT(check_binary([](Var x, Var y) { return feature_cross_attention(x, y, mul(x, y), 0.5f); }, a, b), kTol);

  SparseMatrix s(3, 3, {{0, 1, 0.5f}, {1, 0, 1.0f}, {2, 2, -2.0f}, {2, 0, 0.25f}});
  EXPECT_LT(check_unary([&](Var x) { return spmm(s, x); }, a), kTol);
}

TEST(Attention, SingleTokenReturnsValue) {
  Tape t;
  Var q = t.constant(Tensor::from_rows({{0.3f, -1.2f, 2.0f}}));
  Var k = t.constant(Tensor::from_rows({{0.9f}}));
  Var v = t.constant(Tensor::from_rows({{4.0f}}));
  Var out = feature_cross_attention(q, k, v, 1.0f);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_FLOAT_EQ(out.value()(0, j), 4.0f);
}

TEST(Attention, WeightsSumToOne) {
  Rng rng(8);
  Tensor q = rng.normal_tensor(2, 5), k = rng.normal_tensor(2, 4);
  Tensor w = feature_attention_weights(q, k, 1, 0.5f);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double acc = 0;
    for (auto x : w.row_span(r)) acc += x;
    EXPECT_NEAR(acc, 1.0, 1e-6);
  }
}

TEST(Tape, NoGradModeRecordsNothingDifferentiable) {
  ParameterStore store;
  ParamId w = store.add("w", Tensor::row({1, 2}));
  Tape t(false);
  Var x = t.param(store, w);
  EXPECT_FALSE(x.requires_grad());
  EXPECT_FLOAT_EQ(sum(x).value().item(), 3.0f);
}

TEST(Store, DuplicateNameRejected) {
  ParameterStore store;
  store.add("w", Tensor::scalar(1));
  EXPECT_THROW(store.add("w", Tensor::scalar(2)), std::invalid_argument);
  EXPECT_EQ(store.scalar_count(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore store;
  ParamId w = store.add("w", Tensor::scalar(0.5f));
  store[w].grad = Tensor::scalar(1);
  AdamState s = AdamState::for_store(store);
  adam_step(store, s, 1e-4);
  // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps).
  EXPECT_NEAR(store[w].value.item(), 0.5 - 1e-4 / (1 + 1e-8), 1e-7);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  ParameterStore store;
  ParamId w = store.add("w", Tensor::row({0.25f, -3.0f}));
  store.zero_grad();
  AdamState s = AdamState::for_store(store);
  adam_step(store, s, 1e-4);
  EXPECT_EQ(store[w].value, Tensor::row({0.25f, -3.0f}));
}

TEST(Adam, ShapeMismatchThrows) {
  ParameterStore store;
  store.add("w", Tensor::row({1, 2}));
  AdamState s;
  EXPECT_THROW(adam_step(store, s, 1e-3), ShapeError);
}

TEST(Adam, HundredStepsAreBitIdenticalAcrossRuns) {
  auto run = [] {
    Rng rng(9);
    ParameterStore store;
    Linear lin = Linear::create(store, "lin", 3, 2, rng);
    AdamState s = AdamState::for_store(store);
    Tensor x = rng.normal_tensor(4, 3);
    for (int k = 0; k < 100; ++k) {
      store.zero_grad();
      Tape t;
      t.backward(sum_squares(lin(t, store, t.constant(x))));
      adam_step(store, s, 1e-2);
    }
    return store;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, StepCounterStrictlyIncreases) {
  ParameterStore store;
  store.add("w", Tensor::scalar(1));
  store.zero_grad();
  AdamState s = AdamState::for_store(store);
  for (std::uint64_t k = 1; k <= 5; ++k) {
    adam_step(store, s, 1e-3);
    EXPECT_EQ(s.step, k);
  }
}
