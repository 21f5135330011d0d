#pragma once

// Server-side combination of client gradients.
//
// Principal aggregation: stack the round's gradients as columns of G (d x m),
// eigendecompose the small Gram matrix G^T G, lift each eigenvector e to a
// principal direction v = G e, orient it towards the mean gradient, then
// re-express every client gradient in the top-L directions (eigenvalue
// weighted, length preserved) before the sample-weighted sum.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedld/error.hpp"
#include "fedld/linalg.hpp"
#include "fedld/local_trainer.hpp"

namespace fedld {

enum class AggregationKind { fedavg, principal };

enum class Revision {
  normalized,  // eigenvalue-proportional weights, then rescale to |g|
  literal,     // every projection rescaled to |g| and summed as printed
};

struct AggregationMode {
  AggregationKind kind = AggregationKind::principal;
  Revision revision = Revision::normalized;
  double top_fraction = 0.8;
  double rank_tolerance = kRankTolerance;

  void validate() const {
    if (!(top_fraction > 0.0 && top_fraction <= 1.0))
      throw Error(ErrorKind::config, "top_fraction must lie in (0,1]");
    if (!(rank_tolerance >= 0.0 && rank_tolerance < 1.0))
      throw Error(ErrorKind::config, "rank tolerance must lie in [0,1)");
  }
};

inline const char* to_string(AggregationKind k) { return k == AggregationKind::fedavg ? "fedavg" : "principal"; }
inline const char* to_string(Revision r) { return r == Revision::normalized ? "normalized" : "literal"; }

struct PrincipalBasis {
  /// Calibrated unit directions, one per above-tolerance eigenvalue, in
  /// descending eigenvalue order.
  std::vector<Vector> axes;
  /// Eigenvalues of (1/m) G G^T matching `axes`.
  Vector eigenvalues;
  /// Number of leading axes used for revision.
  std::size_t retained = 0;
  /// Unweighted mean gradient used for calibration.
  Vector reference;
  /// All m eigenvalues of (1/m) G G^T, rank-deficient ones included.
  Vector spectrum;
  std::size_t source_count = 0;
};

/// Flips v so that it does not point against g_hat. A zero inner product
/// keeps v.
inline Vector calibrate(std::span<const double> v, std::span<const double> g_hat) {
  if (dot(v, g_hat) >= 0.0) return Vector(v.begin(), v.end());
  return scaled(v, -1.0);
}

inline std::size_t retained_axes(double top_fraction, std::size_t effective_rank) {
  const auto l = static_cast<std::size_t>(std::floor(top_fraction * static_cast<double>(effective_rank) + 1e-9));
  return std::max<std::size_t>(1, std::min(l, effective_rank));
}

inline PrincipalBasis build_basis(const std::vector<FlatGradient>& grads, double top_fraction,
                                  double tol = kRankTolerance) {
  if (grads.empty()) throw Error(ErrorKind::empty_input, "principal basis needs at least one gradient");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw Error(ErrorKind::config, "top_fraction must lie in (0,1]");
  const std::size_t d = grads.front().delta.size();
  const std::size_t m = grads.size();
  std::vector<Vector> columns;
  columns.reserve(m);
  for (const auto& g : grads) {
    if (g.delta.size() != d) throw Error(ErrorKind::shape, "client gradients have unequal dimensions");
    columns.push_back(g.delta);
  }
  const Matrix stacked = Matrix::from_columns(columns);
  const auto pairs = sym_eigen(gram(stacked, GramSide::right));
  const double largest = pairs.front().value;
  if (!(largest > 0.0)) throw Error(ErrorKind::degenerate, "all client gradients are zero");

  PrincipalBasis basis;
  basis.source_count = m;
  basis.reference.assign(d, 0.0);
  for (const auto& g : grads) axpy(1.0 / static_cast<double>(m), g.delta, basis.reference);

  const double inv_m = 1.0 / static_cast<double>(m);
  for (const auto& pair : pairs) {
    basis.spectrum.push_back(std::max(0.0, pair.value) * inv_m);
    if (pair.value < tol * largest) continue;
    Vector v = stacked.multiply(pair.vector);
    const double len = norm(v);
    if (!(len > 0.0)) continue;
    for (double& x : v) x /= len;
    basis.axes.push_back(calibrate(v, basis.reference));
    basis.eigenvalues.push_back(pair.value * inv_m);
  }
  basis.retained = retained_axes(top_fraction, basis.axes.size());
  return basis;
}

struct RevisedGradient {
  FlatGradient gradient;
  /// The gradient had no component along the retained axes and was passed
  /// through unchanged.
  bool orthogonal_fallback = false;
};

inline RevisedGradient revise_gradient(const FlatGradient& g, const PrincipalBasis& basis, Revision revision) {
  if (basis.retained == 0 || basis.retained > basis.axes.size())
    throw Error(ErrorKind::config, "principal basis retains no usable axes");
  if (g.delta.size() != basis.axes.front().size())
    throw Error(ErrorKind::shape, "gradient of length " + std::to_string(g.delta.size()) + " for a basis in dimension " +
                                      std::to_string(basis.axes.front().size()));
  const double g_norm = norm(g.delta);
  if (g_norm == 0.0) return {g, false};

  if (basis.retained == 1) {
    // Rank-one fixed point: a gradient already on the single axis is its own
    // revision in both modes.
    const auto along = project(g.delta, basis.axes.front());
    Vector residual = g.delta;
    axpy(-1.0, along, residual);
    if (norm(residual) <= 1e-12 * g_norm) return {g, false};
  }

  const double skip = 1e-12 * g_norm;
  double weight_total = 0.0;
  for (std::size_t l = 0; l < basis.retained; ++l) weight_total += basis.eigenvalues[l];

  Vector sum(g.delta.size(), 0.0);
  for (std::size_t l = 0; l < basis.retained; ++l) {
    const Vector part = project(g.delta, basis.axes[l]);
    const double part_norm = norm(part);
    if (part_norm < skip) continue;
    const double coef =
        revision == Revision::normalized ? basis.eigenvalues[l] / weight_total : g_norm / part_norm;
    axpy(coef, part, sum);
  }

  const double sum_norm = norm(sum);
  if (sum_norm < skip) return {g, true};

  RevisedGradient out;
  out.gradient.client_id = g.client_id;
  out.gradient.samples = g.samples;
  out.gradient.delta = revision == Revision::normalized ? scaled(sum, g_norm / sum_norm) : std::move(sum);
  return out;
}

/// n_i / n over the given gradients.
inline Vector sample_weights(const std::vector<FlatGradient>& grads) {
  double n = 0.0;
  for (const auto& g : grads) n += static_cast<double>(g.samples);
  if (!(n > 0.0)) throw Error(ErrorKind::config, "participating clients hold no samples");
  Vector w;
  w.reserve(grads.size());
  for (const auto& g : grads) w.push_back(static_cast<double>(g.samples) / n);
  return w;
}

inline FlatGradient aggregate(const std::vector<FlatGradient>& grads, std::span<const double> weights) {
  if (grads.empty()) throw Error(ErrorKind::empty_input, "nothing to aggregate");
  if (weights.size() != grads.size()) throw Error(ErrorKind::config, "one weight per gradient is required");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) > 1e-12)
    throw Error(ErrorKind::config, "aggregation weights sum to " + std::to_string(total) + ", not 1");
  FlatGradient out;
  out.delta.assign(grads.front().delta.size(), 0.0);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].delta.size() != out.delta.size()) throw Error(ErrorKind::shape, "gradients have unequal dimensions");
    axpy(weights[i], grads[i].delta, out.delta);
    out.samples += grads[i].samples;
  }
  return out;
}

struct AggregationOutcome {
  FlatGradient global;
  std::optional<PrincipalBasis> basis;
  std::vector<FlatGradient> revised;  // principal mode only
  std::size_t orthogonal_fallbacks = 0;
  bool degenerate = false;  // principal requested but G was all zero
};

/// One server step. The basis is built in both modes so its spectrum can be
/// reported; fedavg ignores it when combining.
inline AggregationOutcome aggregate_round(const std::vector<FlatGradient>& grads, const AggregationMode& mode) {
  mode.validate();
  AggregationOutcome out;
  const Vector weights = sample_weights(grads);
  try {
    out.basis = build_basis(grads, mode.top_fraction, mode.rank_tolerance);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::degenerate) throw;
    out.degenerate = mode.kind == AggregationKind::principal;
  }
  if (mode.kind == AggregationKind::fedavg || !out.basis) {
    out.global = aggregate(grads, weights);
    return out;
  }
  out.revised.reserve(grads.size());
  for (const auto& g : grads) {
    auto r = revise_gradient(g, *out.basis, mode.revision);
    out.orthogonal_fallbacks += r.orthogonal_fallback ? 1 : 0;
    out.revised.push_back(std::move(r.gradient));
  }
  out.global = aggregate(out.revised, weights);
  return out;
}

}  // namespace fedld
