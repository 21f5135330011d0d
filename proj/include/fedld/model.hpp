#pragma once

// Small differentiable classifiers with hand-written backpropagation.
//
// Flat parameter layout (stable, used by checkpoints):
//   softmax regression: W [classes x input_dim] row-major, then b [classes]
//   mlp:                W1 [hidden x input_dim], b1 [hidden],
//                       W2 [classes x hidden],   b2 [classes]
// Hidden units use ReLU.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedld/error.hpp"
#include "fedld/linalg.hpp"

namespace fedld {

enum class ArchKind : std::uint32_t { softmax_regression = 0, mlp = 1 };

struct Architecture {
  ArchKind kind = ArchKind::softmax_regression;
  std::size_t input_dim = 0;
  std::size_t classes = 0;
  std::size_t hidden = 0;  // mlp only

  static Architecture softmax(std::size_t input_dim, std::size_t classes) {
    return {ArchKind::softmax_regression, input_dim, classes, 0};
  }
  static Architecture mlp(std::size_t input_dim, std::size_t classes, std::size_t hidden = 32) {
    return {ArchKind::mlp, input_dim, classes, hidden};
  }

  std::size_t param_count() const {
    if (kind == ArchKind::softmax_regression) return classes * input_dim + classes;
    return hidden * input_dim + hidden + classes * hidden + classes;
  }

  bool operator==(const Architecture&) const = default;
};

inline std::string describe(const Architecture& arch) {
  if (arch.kind == ArchKind::softmax_regression)
    return "softmax(" + std::to_string(arch.input_dim) + "->" + std::to_string(arch.classes) + ")";
  return "mlp(" + std::to_string(arch.input_dim) + "->" + std::to_string(arch.hidden) + "->" +
         std::to_string(arch.classes) + ")";
}

struct ModelParams {
  Architecture arch;
  Vector flat;

  ModelParams() = default;
  ModelParams(Architecture a, Vector f) : arch(a), flat(std::move(f)) {
    if (flat.size() != arch.param_count())
      throw Error(ErrorKind::shape, "parameter vector of length " + std::to_string(flat.size()) + " for " +
                                        describe(arch) + " which needs " + std::to_string(arch.param_count()));
  }

  static ModelParams zeros(Architecture a) { return {a, Vector(a.param_count(), 0.0)}; }

  bool operator==(const ModelParams&) const = default;
};

/// uniform(-s, s) with s = 1/sqrt(fan_in) for every weight and bias.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Vector flat;
  flat.reserve(arch.param_count());
  auto fill = [&](std::size_t count, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-s, s);
    for (std::size_t i = 0; i < count; ++i) flat.push_back(u(rng));
  };
  if (arch.kind == ArchKind::softmax_regression) {
    fill(arch.classes * arch.input_dim + arch.classes, arch.input_dim);
  } else {
    fill(arch.hidden * arch.input_dim + arch.hidden, arch.input_dim);
    fill(arch.classes * arch.hidden + arch.classes, arch.hidden);
  }
  return {arch, std::move(flat)};
}

struct LossReport {
  double ce = 0.0;
  double margin_penalty = 0.0;
  double total = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
  std::size_t correct = 0;
};

/// Index of the largest logit; ties go to the lowest class index.
inline std::size_t argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

namespace detail {

struct MlpView {
  std::span<const double> w1, b1, w2, b2;
};

inline MlpView split_mlp(const Architecture& a, std::span<const double> flat) {
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    auto s = flat.subspan(off, n);
    off += n;
    return s;
  };
  MlpView v;
  v.w1 = take(a.hidden * a.input_dim);
  v.b1 = take(a.hidden);
  v.w2 = take(a.classes * a.hidden);
  v.b2 = take(a.classes);
  return v;
}

// out = W x + b, W is rows x cols row-major.
inline void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
                   std::span<double> out) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = b[r];
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
    out[r] = s;
  }
}

inline void check_input(const Architecture& arch, std::span<const double> x) {
  if (x.size() != arch.input_dim)
    throw Error(ErrorKind::shape, "input of dimension " + std::to_string(x.size()) + " for " + describe(arch));
}

// Forward pass; fills hidden activations (mlp only) and logits.
inline void forward(const ModelParams& p, std::span<const double> x, Vector& hidden, Vector& logits) {
  const auto& a = p.arch;
  logits.assign(a.classes, 0.0);
  if (a.kind == ArchKind::softmax_regression) {
    std::span<const double> flat = p.flat;
    affine(flat.subspan(0, a.classes * a.input_dim), flat.subspan(a.classes * a.input_dim, a.classes), x, logits);
    return;
  }
  const auto v = split_mlp(a, p.flat);
  hidden.assign(a.hidden, 0.0);
  affine(v.w1, v.b1, x, hidden);
  for (double& h : hidden) h = h > 0.0 ? h : 0.0;
  affine(v.w2, v.b2, hidden, logits);
}

struct SampleLoss {
  double ce;
  double margin;
  bool correct;
};

// Per-sample loss plus dL/dlogits for ce + lambda * log(1 + |f|^2).
inline SampleLoss sample_loss(std::span<const double> logits, std::size_t label, double lambda,
                              std::span<double> dlogits) {
  double mx = logits[0];
  for (double f : logits) mx = std::max(mx, f);
  double z = 0.0;
  for (double f : logits) z += std::exp(f - mx);
  const double lse = mx + std::log(z);
  double sq = 0.0;
  for (double f : logits) sq += f * f;
  const double margin = std::log1p(sq);
  if (!dlogits.empty()) {
    const double coef = lambda * 2.0 / (1.0 + sq);
    for (std::size_t c = 0; c < logits.size(); ++c)
      dlogits[c] = std::exp(logits[c] - lse) - (c == label ? 1.0 : 0.0) + coef * logits[c];
  }
  return {lse - logits[label], margin, argmax(logits) == label};
}

inline void check_label(const Architecture& arch, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= arch.classes)
    throw Error(ErrorKind::label, "label " + std::to_string(label) + " outside [0, " + std::to_string(arch.classes) +
                                      ")");
}

}  // namespace detail

inline Vector forward_logits(const ModelParams& p, std::span<const double> x) {
  detail::check_input(p.arch, x);
  Vector hidden, logits;
  detail::forward(p, x, hidden, logits);
  return logits;
}

/// Rows of `features` paired with `labels`; a non-owning mini-batch.
struct BatchView {
  const Matrix* features = nullptr;
  std::span<const int> labels;
  std::span<const std::size_t> rows;  // empty means every row
  std::size_t size() const { return rows.empty() ? labels.size() : rows.size(); }
  std::size_t row_index(std::size_t k) const { return rows.empty() ? k : rows[k]; }
};

/// Batch mean of ce + lambda * log(1 + |logits|^2) and its exact gradient.
/// Pass an empty `grad` to skip backpropagation.
inline LossReport loss_and_grad(const ModelParams& p, const BatchView& batch, double lambda, std::span<double> grad) {
  const auto& a = p.arch;
  const std::size_t n = batch.size();
  if (n == 0) throw Error(ErrorKind::empty_input, "empty batch");
  if (batch.features->cols() != a.input_dim)
    throw Error(ErrorKind::shape, "features of dimension " + std::to_string(batch.features->cols()) + " for " +
                                      describe(a));
  const bool want_grad = !grad.empty();
  if (want_grad) {
    if (grad.size() != a.param_count()) throw Error(ErrorKind::shape, "gradient buffer length mismatch");
    std::fill(grad.begin(), grad.end(), 0.0);
  }

  Vector hidden, logits, dlogits(a.classes), dhidden(a.hidden);
  LossReport rep;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t r = batch.row_index(k);
    const int label = batch.labels[r];
    detail::check_label(a, label);
    const auto x = batch.features->row(r);
    detail::forward(p, x, hidden, logits);
    const auto s = detail::sample_loss(logits, static_cast<std::size_t>(label), lambda,
                                       want_grad ? std::span<double>(dlogits) : std::span<double>());
    rep.ce += s.ce;
    rep.margin_penalty += s.margin;
    rep.correct += s.correct ? 1 : 0;
    if (!want_grad) continue;

    if (a.kind == ArchKind::softmax_regression) {
      double* gw = grad.data();
      double* gb = grad.data() + a.classes * a.input_dim;
      for (std::size_t c = 0; c < a.classes; ++c) {
        const double d = dlogits[c] * inv_n;
        for (std::size_t j = 0; j < a.input_dim; ++j) gw[c * a.input_dim + j] += d * x[j];
        gb[c] += d;
      }
      continue;
    }

    const auto v = detail::split_mlp(a, p.flat);
    double* gw1 = grad.data();
    double* gb1 = gw1 + a.hidden * a.input_dim;
    double* gw2 = gb1 + a.hidden;
    double* gb2 = gw2 + a.classes * a.hidden;
    std::fill(dhidden.begin(), dhidden.end(), 0.0);
    for (std::size_t c = 0; c < a.classes; ++c) {
      const double d = dlogits[c] * inv_n;
      for (std::size_t h = 0; h < a.hidden; ++h) {
        gw2[c * a.hidden + h] += d * hidden[h];
        dhidden[h] += d * v.w2[c * a.hidden + h];
      }
      gb2[c] += d;
    }
    for (std::size_t h = 0; h < a.hidden; ++h) {
      if (hidden[h] <= 0.0) continue;
      const double d = dhidden[h];
      for (std::size_t j = 0; j < a.input_dim; ++j) gw1[h * a.input_dim + j] += d * x[j];
      gb1[h] += d;
    }
  }
  rep.samples = n;
  rep.ce *= inv_n;
  rep.margin_penalty *= inv_n;
  rep.total = rep.ce + lambda * rep.margin_penalty;
  rep.accuracy = static_cast<double>(rep.correct) * inv_n;
  return rep;
}

inline std::pair<LossReport, Vector> loss_and_grad(const ModelParams& p, const BatchView& batch, double lambda) {
  Vector g(p.arch.param_count());
  auto rep = loss_and_grad(p, batch, lambda, g);
  return {rep, std::move(g)};
}

/// Full-dataset loss and accuracy without a gradient.
inline LossReport evaluate(const ModelParams& p, const Matrix& features, std::span<const int> labels,
                           double lambda = 0.0) {
  if (labels.size() != features.rows()) throw Error(ErrorKind::shape, "feature/label row count mismatch");
  return loss_and_grad(p, BatchView{&features, labels, {}}, lambda, std::span<double>());
}

}  // namespace fedld
