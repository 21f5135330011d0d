#pragma once

// Dense row-major linear algebra sized for federated aggregation: flat
// parameter vectors of length d and m x m Gram matrices over client updates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedld/error.hpp"

namespace fedld {

using Vector = std::vector<double>;

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> v, const char* what) {
  if (!all_finite(v)) throw Error(ErrorKind::shape, std::string(what) + " contains non-finite entries");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error(ErrorKind::shape, "dot of vectors with lengths " + std::to_string(a.size()) + " and " +
                                      std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::shape, "axpy length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector scaled(std::span<const double> x, double alpha) {
  Vector out(x.begin(), x.end());
  for (double& v : out) v *= alpha;
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vector data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw Error(ErrorKind::shape, "matrix storage of " + std::to_string(data_.size()) + " entries for " +
                                        std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  /// Builds a rows x vectors.size() matrix whose columns are the given vectors.
  static Matrix from_columns(const std::vector<Vector>& columns) {
    if (columns.empty()) return {};
    const std::size_t d = columns.front().size();
    Matrix m(d, columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c].size() != d) throw Error(ErrorKind::shape, "columns have unequal lengths");
      for (std::size_t r = 0; r < d; ++r) m(r, c) = columns[c][r];
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0 || cols_ == 0; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vector column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  double frobenius_norm() const { return norm(data_); }

  /// this * x
  Vector multiply(std::span<const double> x) const {
    if (x.size() != cols_) throw Error(ErrorKind::shape, "matrix-vector length mismatch");
    Vector y(rows_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) y[r] = dot(row(r), x);
    return y;
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

enum class GramSide {
  left,   // G G^T, d x d
  right,  // G^T G, m x m
};

inline Matrix gram(const Matrix& g, GramSide side) {
  if (g.empty()) throw Error(ErrorKind::empty_input, "gram of an empty matrix");
  require_finite(g.data(), "gram input");
  const std::size_t d = g.rows();
  const std::size_t m = g.cols();
  if (side == GramSide::right) {
    Matrix out(m, m);
    for (std::size_t k = 0; k < d; ++k) {
      const auto r = g.row(k);
      for (std::size_t a = 0; a < m; ++a) {
        const double ra = r[a];
        if (ra == 0.0) continue;
        for (std::size_t b = a; b < m; ++b) out(a, b) += ra * r[b];
      }
    }
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < a; ++b) out(a, b) = out(b, a);
    return out;
  }
  Matrix out(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      const double v = dot(g.row(a), g.row(b));
      out(a, b) = v;
      out(b, a) = v;
    }
  return out;
}

struct EigenPair {
  double value = 0.0;
  Vector vector;
  /// value < 1e-10 * largest value; the direction carries no information.
  bool rank_deficient = false;
};

inline constexpr double kRankTolerance = 1e-10;

/// Cyclic Jacobi eigensolver for real symmetric matrices. Pairs come back
/// sorted by descending eigenvalue with unit-norm eigenvectors.
inline std::vector<EigenPair> sym_eigen(const Matrix& input, double tol = 1e-12) {
  if (input.rows() != input.cols())
    throw Error(ErrorKind::shape, "eigensolver needs a square matrix, got " + std::to_string(input.rows()) + "x" +
                                      std::to_string(input.cols()));
  require_finite(input.data(), "eigensolver input");
  const std::size_t n = input.rows();
  if (n == 0) return {};

  double max_abs = 0.0;
  for (double v : input.data()) max_abs = std::max(max_abs, std::abs(v));
  const double sym_tol = 1e-9 * std::max(1.0, max_abs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > sym_tol)
        throw Error(ErrorKind::shape, "eigensolver input is not symmetric at (" + std::to_string(i) + "," +
                                          std::to_string(j) + ")");

  Matrix a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (input(i, j) + input(j, i));
  Matrix v = Matrix::identity(n);

  const double scale = a.frobenius_norm();
  auto off_diagonal = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    if (off_diagonal() <= tol * scale) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  std::vector<EigenPair> pairs;
  pairs.reserve(n);
  const double largest = a(order.front(), order.front());
  for (std::size_t idx : order) {
    EigenPair pair;
    pair.value = a(idx, idx);
    pair.vector = v.column(idx);
    const double len = norm(pair.vector);
    for (double& x : pair.vector) x /= len;
    pair.rank_deficient = !(largest > 0.0) || pair.value < kRankTolerance * largest;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

/// Orthogonal projection of g onto the line spanned by axis.
inline Vector project(std::span<const double> g, std::span<const double> axis) {
  const double len2 = dot(axis, axis);
  if (!(len2 > 0.0)) throw Error(ErrorKind::degenerate, "projection onto a zero axis");
  return scaled(axis, dot(g, axis) / len2);
}

}  // namespace fedld
