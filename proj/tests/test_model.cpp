#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "fedld/data.hpp"
#include "fedld/model.hpp"
#include "oracles.hpp"

using namespace fedld;

namespace {

struct Batch {
  Matrix x;
  std::vector<int> y;
};

Batch random_batch(std::mt19937_64& rng, std::size_t n, std::size_t d, std::size_t classes) {
  Batch b{oracle::random_matrix(rng, n, d), {}};
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  for (std::size_t i = 0; i < n; ++i) b.y.push_back(label(rng));
  return b;
}

// Relative 1e-5 per coordinate; coordinates below 1e-8 are compared absolutely.
void expect_gradient_matches(const Vector& analytic, const Vector& fd) {
  ASSERT_EQ(analytic.size(), fd.size());
  for (std::size_t k = 0; k < fd.size(); ++k) {
    if (std::abs(fd[k]) < 1e-8)
      EXPECT_NEAR(analytic[k], fd[k], 1e-8) << "coordinate " << k;
    else
      EXPECT_NEAR(analytic[k], fd[k], 1e-5 * std::abs(fd[k])) << "coordinate " << k;
  }
}

}  // namespace

TEST(Architecture, ParamCounts) {
  EXPECT_EQ(Architecture::softmax(5, 3).param_count(), 18u);
  EXPECT_EQ(Architecture::mlp(5, 3, 4).param_count(), 4u * 5 + 4 + 3 * 4 + 3);
  EXPECT_THROW(ModelParams(Architecture::softmax(2, 2), Vector(5)), Error);
}

TEST(ForwardLogits, ZeroSoftmaxGivesZeroLogits) {
  const auto p = ModelParams::zeros(Architecture::softmax(3, 4));
  EXPECT_EQ(forward_logits(p, Vector{1.5, -2, 7}), Vector(4, 0.0));
}

TEST(ForwardLogits, IdentityWeights) {
  auto p = ModelParams::zeros(Architecture::softmax(3, 3));
  for (std::size_t i = 0; i < 3; ++i) p.flat[i * 3 + i] = 1.0;
  EXPECT_EQ(forward_logits(p, Vector{1, 0, 0}), (Vector{1, 0, 0}));
}

TEST(ForwardLogits, MlpWithZeroHiddenIsConstant) {
  const auto arch = Architecture::mlp(2, 3, 5);
  auto p = ModelParams::zeros(arch);
  const Vector b{0.5, -1.0, 2.0};
  std::copy(b.begin(), b.end(), p.flat.end() - 3);
  EXPECT_EQ(forward_logits(p, Vector{3, 4}), b);
  EXPECT_EQ(forward_logits(p, Vector{-9, 0.1}), b);
}

TEST(ForwardLogits, DimensionMismatch) {
  const auto p = ModelParams::zeros(Architecture::softmax(3, 2));
  EXPECT_THROW(forward_logits(p, Vector{1, 2}), Error);
}

TEST(LossAndGrad, LambdaZeroIsCrossEntropy) {
  std::mt19937_64 rng(1);
  const auto p = init_params(Architecture::softmax(4, 3), 2);
  const auto b = random_batch(rng, 10, 4, 3);
  const auto [rep, g] = loss_and_grad(p, BatchView{&b.x, b.y, {}}, 0.0);
  EXPECT_EQ(rep.total, rep.ce);
  EXPECT_NEAR(rep.ce, oracle::reference_loss(p, b.x, b.y, 0.0), 1e-12);
}

TEST(LossAndGrad, ZeroParamsGiveLogC) {
  std::mt19937_64 rng(2);
  const auto p = ModelParams::zeros(Architecture::softmax(5, 4));
  const auto b = random_batch(rng, 7, 5, 4);
  const auto rep = evaluate(p, b.x, b.y, 0.7);
  EXPECT_NEAR(rep.ce, std::log(4.0), 1e-15);
  EXPECT_EQ(rep.margin_penalty, 0.0);
  EXPECT_NEAR(rep.total, std::log(4.0), 1e-15);
}

TEST(LossAndGrad, Errors) {
  const auto p = ModelParams::zeros(Architecture::softmax(2, 2));
  Matrix x(1, 2);
  std::vector<int> bad{2};
  EXPECT_THROW(loss_and_grad(p, BatchView{&x, bad, {}}, 0.0), Error);
  Matrix empty(0, 2);
  std::vector<int> none;
  try {
    loss_and_grad(p, BatchView{&empty, none, {}}, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::empty_input);
  }
}

TEST(LossAndGrad, TotalIsCePlusWeightedPenalty) {
  std::mt19937_64 rng(4);
  const auto p = init_params(Architecture::mlp(3, 3, 6), 9);
  const auto b = random_batch(rng, 12, 3, 3);
  const auto rep = evaluate(p, b.x, b.y, 0.1);
  EXPECT_EQ(rep.total, rep.ce + 0.1 * rep.margin_penalty);
  EXPECT_NEAR(rep.total, oracle::reference_loss(p, b.x, b.y, 0.1), 1e-12);
  EXPECT_DOUBLE_EQ(rep.accuracy * 12, static_cast<double>(rep.correct));
}

class GradientCheck : public ::testing::TestWithParam<ArchKind> {};

// 100 random (params, batch, lambda) triples per architecture.
TEST_P(GradientCheck, MatchesCentralDifferences) {
  std::mt19937_64 rng(GetParam() == ArchKind::mlp ? 101 : 202);
  const double lambdas[] = {0.0, 0.03, 0.1, 0.5};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + trial % 4;
    const std::size_t classes = 2 + trial % 3;
    const auto arch =
        GetParam() == ArchKind::mlp ? Architecture::mlp(d, classes, 3 + trial % 4) : Architecture::softmax(d, classes);
    auto p = init_params(arch, static_cast<std::uint64_t>(trial));
    for (double& w : p.flat) w *= 2.0;
    const auto b = random_batch(rng, 8, d, classes);
    const double lambda = lambdas[trial % 4];
    const auto [rep, g] = loss_and_grad(p, BatchView{&b.x, b.y, {}}, lambda);
    const auto fd = oracle::finite_difference(
        [&](const Vector& w) { return oracle::reference_loss(ModelParams(arch, w), b.x, b.y, lambda); }, p.flat);
    expect_gradient_matches(g, fd);
  }
}

INSTANTIATE_TEST_SUITE_P(BothArchitectures, GradientCheck,
                         ::testing::Values(ArchKind::softmax_regression, ArchKind::mlp));

TEST(LossAndGrad, MarginTermGradientAlone) {
  // d/dw [lambda log(1+|f|^2)] = lambda * 2 f / (1+|f|^2) backpropagated:
  // recover it as the difference of the lambda=1 and lambda=0 gradients.
  std::mt19937_64 rng(17);
  for (auto arch : {Architecture::softmax(3, 4), Architecture::mlp(3, 4, 5)}) {
    const auto p = init_params(arch, 23);
    const auto b = random_batch(rng, 6, 3, 4);
    const auto [r1, g1] = loss_and_grad(p, BatchView{&b.x, b.y, {}}, 1.0);
    const auto [r0, g0] = loss_and_grad(p, BatchView{&b.x, b.y, {}}, 0.0);
    Vector margin_grad = g1;
    axpy(-1.0, g0, margin_grad);
    const auto fd = oracle::finite_difference(
        [&](const Vector& w) { return oracle::reference_loss(ModelParams(arch, w), b.x, b.y, 1.0, true); }, p.flat);
    expect_gradient_matches(margin_grad, fd);
  }
}

TEST(LossAndGrad, MarginPenaltyNondecreasingInLogitNorm) {
  // Scaling a softmax model scales its logits.
  std::mt19937_64 rng(8);
  const auto base = init_params(Architecture::softmax(4, 3), 5);
  const auto b = random_batch(rng, 20, 4, 3);
  double previous = -1.0;
  for (double s : {0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    auto p = base;
    for (double& w : p.flat) w *= s;
    const double penalty = evaluate(p, b.x, b.y).margin_penalty;
    EXPECT_GE(penalty, previous);
    previous = penalty;
  }
}

TEST(Evaluate, PerfectSeparation) {
  Matrix x(4, 2, Vector{1, 0, 2, 0, 0, 1, 0, 3});
  std::vector<int> y{0, 0, 1, 1};
  auto p = ModelParams::zeros(Architecture::softmax(2, 2));
  p.flat = {5, 0, 0, 5, 0, 0};
  EXPECT_EQ(evaluate(p, x, y).accuracy, 1.0);
}

TEST(Evaluate, TiesGoToClassZero) {
  std::mt19937_64 rng(6);
  const auto b = random_batch(rng, 200, 3, 4);
  const auto rep = evaluate(ModelParams::zeros(Architecture::softmax(3, 4)), b.x, b.y);
  const auto zeros = std::count(b.y.begin(), b.y.end(), 0);
  EXPECT_DOUBLE_EQ(rep.accuracy, static_cast<double>(zeros) / 200.0);
}

TEST(Evaluate, BitIdenticalAcrossRuns) {
  auto run = [] {
    const auto data = generate_base(4, 300, 5, 42);
    const auto p = init_params(Architecture::mlp(5, 4, 8), 42);
    return evaluate(p, data.features, data.labels).ce;
  };
  const double a = run();
  const double b = run();
  EXPECT_EQ(std::memcmp(&a, &b, sizeof(double)), 0);
}

TEST(Evaluate, DoesNotMutate) {
  const auto data = generate_base(3, 60, 2, 1);
  const auto p = init_params(Architecture::softmax(2, 3), 3);
  const auto copy = p;
  evaluate(p, data.features, data.labels, 0.1);
  EXPECT_EQ(p, copy);
}
