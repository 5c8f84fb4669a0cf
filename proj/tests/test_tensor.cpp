#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "flatmatch/gradcheck.hpp"
#include "flatmatch/losses.hpp"
#include "flatmatch/model.hpp"
#include "flatmatch/tensor.hpp"
#include "oracles.hpp"

using namespace flatmatch;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Reduces any op output to a scalar with fixed random weights, so the
// gradient check covers every output coordinate.
struct OpCase {
  std::vector<Shape> input_shapes;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  bool positive_inputs = false;
};

double check_op(const OpCase& c, std::mt19937_64& rng) {
  std::vector<std::vector<double>> values;
  for (const auto& s : c.input_shapes) {
    auto v = randn(numel(s), rng);
    if (c.positive_inputs)
      for (auto& x : v) x = 0.5 + std::abs(x);
    values.push_back(v);
  }
  std::vector<double> out_weights;
  auto evaluate = [&](const std::vector<std::vector<double>>& vals, std::vector<std::vector<double>>* grads) {
    Tape tape;
    Tape::Scope scope(tape);
    std::vector<Tensor> inputs;
    for (std::size_t k = 0; k < vals.size(); ++k) inputs.emplace_back(c.input_shapes[k], vals[k], grads != nullptr);
    Tensor out = c.op(inputs);
    if (out_weights.empty()) out_weights = randn(out.numel(), rng);
    Tensor root = weighted_sum(out, out_weights);
    if (grads) {
      tape.backward(root);
      for (auto& t : inputs) grads->emplace_back(t.grad().begin(), t.grad().end());
    }
    return root.item();
  };
  std::vector<std::vector<double>> analytic;
  evaluate(values, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto numeric = oracle::central_diff(
        [&](const oracle::Vec& x) {
          auto vals = values;
          vals[k] = x;
          return evaluate(vals, nullptr);
        },
        values[k]);
    worst = std::max(worst, oracle::max_rel_error(analytic[k], numeric));
  }
  return worst;
}

}  // namespace

TEST(Matmul, IdentityTimesColumn) {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor col = Tensor::matrix(2, 1, {2, 3});
  Tensor r = matmul(eye, col);
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.data()[0], 2.0);
  EXPECT_EQ(r.data()[1], 3.0);
}

TEST(Matmul, RowTimesColumn) {
  Tensor r = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({3, 4}), Tensor::zeros({3, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const auto av = randn(12, rng), bv = randn(8, rng);
  auto f = [&](const oracle::Vec& a, const oracle::Vec& b) {
    return sum(matmul(Tensor::matrix(3, 4, a), Tensor::matrix(4, 2, b))).item();
  };
  Tape tape;
  Tape::Scope scope(tape);
  Tensor a = Tensor::matrix(3, 4, av, true), b = Tensor::matrix(4, 2, bv, true);
  tape.backward(sum(matmul(a, b)));
  auto na = oracle::central_diff([&](const oracle::Vec& x) { return f(x, bv); }, av);
  auto nb = oracle::central_diff([&](const oracle::Vec& x) { return f(av, x); }, bv);
  EXPECT_LT(oracle::max_rel_error({a.grad().begin(), a.grad().end()}, na), 1e-5);
  EXPECT_LT(oracle::max_rel_error({b.grad().begin(), b.grad().end()}, nb), 1e-5);
}

TEST(Elementwise, ReluDefinition) {
  Tensor r = relu(Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x({3}, {-1, 0, 2}, true);
  tape.backward(sum(relu(x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 1}));
}

TEST(Elementwise, ExpOfZero) { EXPECT_EQ(exp(Tensor({1}, {0.0})).data()[0], 1.0); }

TEST(Elementwise, LogRejectsNonPositive) {
  EXPECT_THROW(log(Tensor({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor({1}, {-2.0})), DomainError);
}

TEST(Elementwise, ScalarBroadcastOnly) {
  Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor r = add(Tensor::scalar(10.0), m);
  EXPECT_EQ(r.shape(), m.shape());
  EXPECT_EQ(r.at(1, 1), 14.0);
  EXPECT_THROW(add(m, Tensor({2}, {1, 2})), DimensionError);
}

TEST(Elementwise, ScalarBroadcastGradientSums) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor s = Tensor::scalar(2.0, true);
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  tape.backward(sum(mul(s, m)));
  EXPECT_DOUBLE_EQ(s.grad()[0], 21.0);
  for (double g : m.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Elementwise, LogSoftmaxChainMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  OpCase c{{{4, 3}}, [](const std::vector<Tensor>& in) { return log(exp(log_softmax(in[0]))); }};
  EXPECT_LT(check_op(c, rng), 1e-5);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x = Tensor::zeros({2, 3}, true);
  tape.backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x({4}, {1.5, -2.0, 0.25, 3.0}, true);
  tape.backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.data()[i]);
}

TEST(Backward, NonScalarRootIsContractError) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x = Tensor::zeros({3}, true);
  EXPECT_THROW(tape.backward(relu(x)), ContractError);
  EXPECT_THROW(backward(Tensor::zeros({2, 2}, true)), ContractError);
}

TEST(Backward, NoActiveTapeIsContractError) { EXPECT_THROW(backward(Tensor::scalar(1.0, true)), ContractError); }

TEST(Backward, TwoLayerMlpCrossEntropyMatchesFiniteDifferences) {
  MlpSpec spec{3, {5}, 4, Activation::relu};
  const ParamVector theta = init_params(spec, 3);
  std::mt19937_64 rng(5);
  const auto xv = randn(6 * 3, rng);
  const Tensor x = Tensor::matrix(6, 3, xv);
  const std::vector<int> y{0, 1, 2, 3, 1, 0};
  auto [loss, grad] = value_and_grad(theta, [&](const Tensor& p) { return cross_entropy(forward(spec, p, x), y); });
  auto numeric = oracle::central_diff(
      [&](const oracle::Vec& p) {
        return cross_entropy(forward(spec, ParamVector(theta.layout_ptr(), p), x), y).item();
      },
      {theta.values().begin(), theta.values().end()});
  EXPECT_LT(oracle::max_rel_error({grad.values().begin(), grad.values().end()}, numeric), 1e-4);
  EXPECT_TRUE(std::isfinite(loss));
}

TEST(Backward, ConstantsNeverReceiveGradients) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor c({3}, {1, 2, 3}, false);
  Tensor x({3}, {4, 5, 6}, true);
  tape.backward(sum(mul(c, x)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, ClearedTapeTreatsOldResultsAsConstants) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x({2}, {1, 2}, true);
  Tensor old = scale(x, 3.0);
  tape.clear();
  Tensor y({2}, {5, 7}, true);
  tape.backward(sum(mul(old, y)));
  EXPECT_FALSE(x.has_grad());
  EXPECT_DOUBLE_EQ(y.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 6.0);
}

TEST(Backward, NothingIsRecordedWithoutATape) {
  Tensor x({2}, {1, 2}, true);
  Tensor y = scale(x, 2.0);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiffCheck, QuadraticIsExactUpToRounding) {
  auto layout = std::make_shared<const Layout>(std::vector<std::pair<std::string, Shape>>{{"v", {5}}});
  ParamVector theta(layout, {0.3, -1.2, 2.0, 0.0, 4.5});
  auto f = [](const Tensor& p) { return sum(mul(p, p)); };
  EXPECT_LT(finite_diff_check(f, theta, 1e-5), 1e-7);
}

TEST(FiniteDiffCheck, ConstantFunction) {
  auto layout = std::make_shared<const Layout>(std::vector<std::pair<std::string, Shape>>{{"v", {3}}});
  ParamVector theta(layout, {1, 2, 3});
  auto f = [](const Tensor& p) { return add(scale(sum(p), 0.0), Tensor::scalar(4.0)); };
  EXPECT_LT(finite_diff_check(f, theta, 1e-5), 1e-9);
}

TEST(FiniteDiffCheck, MlpLoss) {
  MlpSpec spec{2, {8, 8}, 3, Activation::relu};
  const ParamVector theta = init_params(spec, 9);
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::matrix(10, 2, randn(20, rng));
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  EXPECT_LT(finite_diff_check([&](const Tensor& p) { return cross_entropy(forward(spec, p, x), y); }, theta, 1e-5),
            1e-4);
}

TEST(FiniteDiffCheck, ErrorsOnBadInput) {
  auto layout = std::make_shared<const Layout>(std::vector<std::pair<std::string, Shape>>{{"v", {2}}});
  ParamVector theta(layout, {1, 2});
  auto f = [](const Tensor& p) { return sum(p); };
  EXPECT_THROW(finite_diff_check(f, theta, 0.0), ContractError);
  auto bad = [](const Tensor& p) { return scale(sum(p), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(finite_diff_check(bad, theta, 1e-5), NumericError);
}

// Every registered operation against central differences on 50 random
// instances.
TEST(Properties, EveryOperationMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  const std::vector<int> picks{2, 0, 1, 1};
  const std::vector<std::pair<std::string, OpCase>> cases = {
      {"add", {{{3, 2}, {3, 2}}, [](const auto& in) { return add(in[0], in[1]); }}},
      {"add_scalar", {{{1}, {3, 2}}, [](const auto& in) { return add(in[0], in[1]); }}},
      {"sub", {{{4}, {4}}, [](const auto& in) { return sub(in[0], in[1]); }}},
      {"sub_scalar", {{{4}, {}}, [](const auto& in) { return sub(in[0], in[1]); }}},
      {"mul", {{{2, 3}, {2, 3}}, [](const auto& in) { return mul(in[0], in[1]); }}},
      {"mul_scalar", {{{}, {5}}, [](const auto& in) { return mul(in[0], in[1]); }}},
      {"scale", {{{6}}, [](const auto& in) { return scale(in[0], -1.7); }}},
      {"relu", {{{3, 3}}, [](const auto& in) { return relu(in[0]); }}},
      {"exp", {{{5}}, [](const auto& in) { return exp(in[0]); }}},
      {"log", {{{5}}, [](const auto& in) { return log(in[0]); }, true}},
      {"sum", {{{2, 4}}, [](const auto& in) { return sum(in[0]); }}},
      {"mean", {{{7}}, [](const auto& in) { return mean(in[0]); }}},
      {"weighted_sum", {{{4}}, [](const auto& in) { return weighted_sum(in[0], {0.5, -1.0, 2.0, 0.1}); }}},
      {"matmul", {{{3, 4}, {4, 2}}, [](const auto& in) { return matmul(in[0], in[1]); }}},
      {"add_bias", {{{4, 3}, {3}}, [](const auto& in) { return add_bias(in[0], in[1]); }}},
      {"slice", {{{10}}, [](const auto& in) { return slice(in[0], 3, {2, 2}); }}},
      {"log_softmax", {{{4, 3}}, [](const auto& in) { return log_softmax(in[0]); }}},
      {"gather_rows", {{{4, 3}}, [picks](const auto& in) { return gather_rows(in[0], picks); }}},
  };
  for (const auto& [name, c] : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) worst = std::max(worst, check_op(c, rng));
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(Properties, BackwardIsLinear) {
  std::mt19937_64 rng(31);
  const auto xv = randn(6, rng);
  auto grad_of = [&](double a, double b) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor x({6}, xv, true);
    Tensor f = sum(exp(x));
    Tensor g = weighted_sum(mul(x, x), {1, 2, 3, 4, 5, 6});
    tape.backward(add(scale(f, a), scale(g, b)));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto gf = grad_of(1.0, 0.0), gg = grad_of(0.0, 1.0), gc = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-10);
}

TEST(Properties, RepeatedBackwardAccumulates) {
  std::mt19937_64 rng(8);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x = Tensor::matrix(3, 2, randn(6, rng), true);
  Tensor w = Tensor::matrix(2, 2, randn(4, rng), true);
  Tensor root = sum(log_softmax(matmul(x, w)));
  tape.backward(root);
  const std::vector<double> once(w.grad().begin(), w.grad().end());
  tape.backward(root);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(w.grad()[i], 2.0 * once[i], 1e-14);
  w.zero_grad();
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Properties, ForwardReplayIsBitIdentical) {
  MlpSpec spec{2, {16, 16}, 3, Activation::relu};
  auto run = [&] {
    const ParamVector theta = init_params(spec, 99);
    std::mt19937_64 rng(4);
    const Tensor x = Tensor::matrix(8, 2, randn(16, rng));
    Tape tape;
    Tape::Scope scope(tape);
    Tensor p = theta.to_tensor(true);
    Tensor logits = forward(spec, p, x);
    return std::vector<double>(logits.data().begin(), logits.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Properties, GradShapeMatchesData) {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x = Tensor::zeros({3, 5}, true);
  tape.backward(sum(relu(x)));
  EXPECT_EQ(x.grad().size(), x.numel());
}
