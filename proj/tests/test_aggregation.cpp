#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedld/aggregation.hpp"
#include "fedld/metrics.hpp"
#include "oracles.hpp"

using namespace fedld;

namespace {

FlatGradient grad(Vector v, std::size_t id = 0, std::size_t n = 1) { return FlatGradient{std::move(v), id, n}; }

std::vector<FlatGradient> random_grads(std::mt19937_64& rng, std::size_t m, std::size_t d) {
  std::vector<FlatGradient> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(grad(oracle::random_vector(rng, d), i, 10 + 7 * i));
  return out;
}

double span_residual(const Vector& g, const PrincipalBasis& b) {
  Vector r = g;
  for (std::size_t l = 0; l < b.retained; ++l) axpy(-1.0, project(g, b.axes[l]), r);
  return norm(r);
}

PrincipalBasis manual_basis(std::vector<Vector> axes, Vector eigenvalues) {
  PrincipalBasis b;
  b.retained = axes.size();
  b.axes = std::move(axes);
  b.eigenvalues = std::move(eigenvalues);
  return b;
}

}  // namespace

TEST(BuildBasis, SingleClientAxisIsItsGradient) {
  const Vector g{3, -4, 0};
  const auto b = build_basis({grad(g)}, 0.8);
  ASSERT_EQ(b.axes.size(), 1u);
  EXPECT_EQ(b.retained, 1u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(b.axes[0][k], g[k] / 5.0, 1e-15);
  EXPECT_GT(dot(b.axes[0], g), 0.0);
  EXPECT_NEAR(b.eigenvalues[0], 25.0, 1e-12);
}

TEST(BuildBasis, TenFullRankClientsRetainEight) {
  std::mt19937_64 rng(1);
  const auto b = build_basis(random_grads(rng, 10, 30), 0.8);
  EXPECT_EQ(b.axes.size(), 10u);
  EXPECT_EQ(b.retained, 8u);
}

TEST(BuildBasis, UnitColumnsByHand) {
  const auto b = build_basis({grad({1, 0}), grad({0, 1})}, 1.0);
  ASSERT_EQ(b.axes.size(), 2u);
  EXPECT_NEAR(b.eigenvalues[0], 0.5, 1e-15);
  EXPECT_NEAR(b.eigenvalues[1], 0.5, 1e-15);
  EXPECT_EQ(b.reference, (Vector{0.5, 0.5}));
  for (const auto& v : b.axes) EXPECT_GE(dot(v, b.reference), 0.0);
  EXPECT_NEAR(std::abs(dot(b.axes[0], b.axes[1])), 0.0, 1e-15);
  EXPECT_NEAR(span_residual({0.3, -2.0}, b), 0.0, 1e-15);
}

TEST(BuildBasis, RetainedAxesRule) {
  EXPECT_EQ(retained_axes(0.8, 1), 1u);
  EXPECT_EQ(retained_axes(0.8, 2), 1u);
  EXPECT_EQ(retained_axes(0.8, 5), 4u);
  EXPECT_EQ(retained_axes(0.8, 10), 8u);
  EXPECT_EQ(retained_axes(1.0, 7), 7u);
  EXPECT_EQ(retained_axes(0.1, 3), 1u);
}

TEST(BuildBasis, RankDeficientColumnsAreDropped) {
  // Three clients, two of them parallel: effective rank 2.
  const auto b = build_basis({grad({1, 0, 0}), grad({2, 0, 0}), grad({0, 1, 0})}, 1.0);
  EXPECT_EQ(b.axes.size(), 2u);
  EXPECT_EQ(b.spectrum.size(), 3u);
  EXPECT_NEAR(b.spectrum[2], 0.0, 1e-12);
}

TEST(BuildBasis, Errors) {
  EXPECT_THROW(build_basis({}, 0.8), Error);
  EXPECT_THROW(build_basis({grad({1, 2}), grad({1})}, 0.8), Error);
  try {
    build_basis({grad({0, 0}), grad({0, 0})}, 0.8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate);
  }
}

TEST(Calibrate, Examples) {
  EXPECT_EQ(calibrate(Vector{1, 2}, Vector{1, 0}), (Vector{1, 2}));
  EXPECT_EQ(calibrate(Vector{1, 2}, Vector{-1, 0}), (Vector{-1, -2}));
  EXPECT_EQ(calibrate(Vector{1, 0}, Vector{0, 1}), (Vector{1, 0}));
}

TEST(ReviseGradient, SingleClientFixedPoint) {
  const auto g = grad({0.1, -7.3, 2.2e-3, 4.0});
  const auto b = build_basis({g}, 0.8);
  for (auto rev : {Revision::normalized, Revision::literal}) {
    const auto r = revise_gradient(g, b, rev);
    EXPECT_EQ(r.gradient.delta, g.delta);
    EXPECT_FALSE(r.orthogonal_fallback);
  }
}

TEST(ReviseGradient, WeightedProjectionByHand) {
  const auto b = manual_basis({{1, 0}, {0, 1}}, {3, 1});
  const auto r = revise_gradient(grad({1, 1}), b, Revision::normalized).gradient.delta;
  const double s = std::sqrt(2.0) / std::hypot(0.75, 0.25);
  EXPECT_NEAR(r[0], 0.75 * s, 1e-15);
  EXPECT_NEAR(r[1], 0.25 * s, 1e-15);
}

TEST(ReviseGradient, LiteralSumsLengthCorrectedProjections) {
  // Each projection is rescaled to |g| = sqrt 2 before summing.
  const auto b = manual_basis({{1, 0}, {0, 1}}, {3, 1});
  const auto r = revise_gradient(grad({1, 1}), b, Revision::literal).gradient.delta;
  EXPECT_NEAR(r[0], std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(r[1], std::sqrt(2.0), 1e-15);
}

TEST(ReviseGradient, OrthogonalClientFallsBack) {
  const auto b = manual_basis({{1, 0, 0}}, {2});
  const auto g = grad({0, 3, 4});
  const auto r = revise_gradient(g, b, Revision::normalized);
  EXPECT_TRUE(r.orthogonal_fallback);
  EXPECT_EQ(r.gradient.delta, g.delta);
}

TEST(ReviseGradient, ZeroGradientStaysZero) {
  const auto b = manual_basis({{1, 0}}, {1});
  EXPECT_EQ(revise_gradient(grad({0, 0}), b, Revision::normalized).gradient.delta, (Vector{0, 0}));
}

TEST(ReviseGradient, DimensionMismatch) {
  const auto b = manual_basis({{1, 0}}, {1});
  EXPECT_THROW(revise_gradient(grad({1, 0, 0}), b, Revision::normalized), Error);
}

TEST(PrincipalProperties, MagnitudeSpanAndCalibration) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + trial % 8;
    const std::size_t d = 1 + trial % 25;
    const auto grads = random_grads(rng, m, d);
    const double tf = trial % 3 == 0 ? 1.0 : 0.8;
    const auto b = build_basis(grads, tf);
    ASSERT_GE(b.retained, 1u);
    ASSERT_LE(b.retained, m);
    for (std::size_t z = 0; z < b.axes.size(); ++z) {
      EXPECT_NEAR(norm(b.axes[z]), 1.0, 1e-10);
      EXPECT_GE(dot(b.axes[z], b.reference), 0.0);
      if (z > 0) {
        EXPECT_GE(b.eigenvalues[z - 1], b.eigenvalues[z]);
      }
      for (std::size_t y = z + 1; y < b.axes.size(); ++y) EXPECT_NEAR(dot(b.axes[z], b.axes[y]), 0.0, 1e-8);
    }
    for (const auto& g : grads) {
      const auto r = revise_gradient(g, b, Revision::normalized);
      if (r.orthogonal_fallback) continue;
      EXPECT_NEAR(norm(r.gradient.delta), norm(g.delta), 1e-9 * norm(g.delta));
      EXPECT_LE(span_residual(r.gradient.delta, b), 1e-8 * norm(r.gradient.delta));
      const auto lit = revise_gradient(g, b, Revision::literal).gradient.delta;
      EXPECT_LE(span_residual(lit, b), 1e-8 * norm(lit));
    }
    const auto out = aggregate_round(grads, AggregationMode{AggregationKind::principal, Revision::normalized, tf});
    EXPECT_LE(span_residual(out.global.delta, b), 1e-8 * std::max(1.0, norm(out.global.delta)));
  }
}

TEST(PrincipalProperties, HomogeneousClientsAreAFixedPoint) {
  std::mt19937_64 rng(4);
  for (std::size_t m : {1u, 2u, 5u, 10u}) {
    const auto g = oracle::random_vector(rng, 12);
    std::vector<FlatGradient> grads;
    for (std::size_t i = 0; i < m; ++i) grads.push_back(grad(g, i, 3 + i));
    for (auto rev : {Revision::normalized, Revision::literal}) {
      const auto out = aggregate_round(grads, AggregationMode{AggregationKind::principal, rev});
      EXPECT_NEAR(norm(out.global.delta), norm(g), 1e-9 * norm(g));
      EXPECT_NEAR(cosine(out.global.delta, g), 1.0, 1e-12);
    }
  }
}

TEST(PrincipalProperties, OracleEquivalence) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + trial % 4;
    const std::size_t d = m + trial % (11 - m);
    const auto grads = random_grads(rng, m, d);
    std::vector<Vector> cols;
    for (const auto& g : grads) cols.push_back(g.delta);
    const auto direct = oracle::direct_covariance_spectrum(Matrix::from_columns(cols));
    const auto b = build_basis(grads, 1.0);
    ASSERT_EQ(b.axes.size(), m);
    for (std::size_t z = 0; z < m; ++z) {
      EXPECT_NEAR(b.eigenvalues[z], direct.values[z], 1e-9 * direct.values[0]);
      EXPECT_GE(oracle::abs_cos(direct.vectors[z], b.axes[z]), 1.0 - 1e-8);
    }
  }
}

// Two opposed clients keep their conflict at cosine 0 once every
// projection is lifted back to full length over the full span.
TEST(PrincipalProperties, ConflictMitigationLiteralFullSpan) {
  std::mt19937_64 rng(6);
  double raw = 0.0, revised = 0.0;
  int instances = 0;
  while (instances < 20) {
    auto grads = random_grads(rng, 2, 10);
    if (cosine(grads[0].delta, grads[1].delta) >= 0.0) continue;
    const auto out = aggregate_round(grads, AggregationMode{AggregationKind::principal, Revision::literal, 1.0});
    raw += conflict_stats(grads).mean_cosine;
    revised += conflict_stats(out.revised).mean_cosine;
    ++instances;
  }
  EXPECT_GE(revised / 20, raw / 20);
}

// With the default L = floor(0.8 * 2) = 1 both clients collapse onto the one
// axis, with opposite signs when their gradients conflict.
TEST(PrincipalProperties, TwoClientDefaultCollapsesOntoOneAxis) {
  std::mt19937_64 rng(7);
  int instances = 0;
  while (instances < 20) {
    auto grads = random_grads(rng, 2, 10);
    if (cosine(grads[0].delta, grads[1].delta) >= 0.0) continue;
    const auto out = aggregate_round(grads, AggregationMode{});
    EXPECT_EQ(out.basis->retained, 1u);
    EXPECT_NEAR(std::abs(cosine(out.revised[0].delta, out.revised[1].delta)), 1.0, 1e-9);
    ++instances;
  }
}

TEST(Aggregate, Examples) {
  const auto g = grad({1.5, -2});
  const Vector halves{0.5, 0.5};
  EXPECT_EQ(aggregate({g, g}, halves).delta, g.delta);
  const Vector first{1.0, 0.0};
  EXPECT_EQ(aggregate({grad({1, 2}), grad({3, 4})}, first).delta, (Vector{1, 2}));
  const Vector quarter{0.25, 0.75};
  EXPECT_EQ(aggregate({grad({1, 0}), grad({0, 1})}, quarter).delta, (Vector{0.25, 0.75}));
}

TEST(Aggregate, WeightSumViolation) {
  const Vector w{0.5, 0.5 + 1e-9};
  try {
    aggregate({grad({1}), grad({2})}, w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Aggregate, SampleWeightsSumToOne) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<FlatGradient> grads;
    std::uniform_int_distribution<std::size_t> n(1, 5000);
    for (int i = 0; i < 1 + trial % 20; ++i) grads.push_back(grad({1.0}, i, n(rng)));
    double total = 0.0;
    for (double w : sample_weights(grads)) total += w;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(AggregateRound, SingleClientPrincipalMatchesFedAvgBitwise) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto grads = random_grads(rng, 1, 40);
    const auto fedavg = aggregate_round(grads, AggregationMode{AggregationKind::fedavg});
    const auto principal = aggregate_round(grads, AggregationMode{AggregationKind::principal});
    EXPECT_EQ(fedavg.global.delta, principal.global.delta);
  }
}

TEST(AggregateRound, DegenerateRoundFallsBackToFedAvg) {
  const auto out = aggregate_round({grad({0, 0}, 0, 2), grad({0, 0}, 1, 3)}, AggregationMode{});
  EXPECT_TRUE(out.degenerate);
  EXPECT_FALSE(out.basis.has_value());
  EXPECT_EQ(out.global.delta, (Vector{0, 0}));
}

TEST(AggregateRound, FedAvgReportsSpectrumWithoutRevising) {
  std::mt19937_64 rng(10);
  const auto grads = random_grads(rng, 4, 6);
  const auto out = aggregate_round(grads, AggregationMode{AggregationKind::fedavg});
  ASSERT_TRUE(out.basis.has_value());
  EXPECT_EQ(out.basis->spectrum.size(), 4u);
  EXPECT_TRUE(out.revised.empty());
  EXPECT_EQ(out.global.delta, aggregate(grads, sample_weights(grads)).delta);
}

TEST(AggregationMode, Validation) {
  EXPECT_THROW((AggregationMode{AggregationKind::principal, Revision::normalized, 0.0}.validate()), Error);
  EXPECT_THROW((AggregationMode{AggregationKind::principal, Revision::normalized, 1.5}.validate()), Error);
  EXPECT_NO_THROW((AggregationMode{AggregationKind::principal, Revision::literal, 1.0}.validate()));
}
