#pragma once

// Synthetic benchmark generation, Dirichlet label-skew partitioning,
// per-client shortcut features and CSV ingestion.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedld/error.hpp"
#include "fedld/linalg.hpp"
#include "fedld/rng.hpp"

namespace fedld {

struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return features.cols(); }
};

struct ClientDataset {
  std::size_t client_id = 0;
  Matrix features;
  std::vector<int> labels;
  /// Row indices into the dataset this shard was cut from.
  std::vector<std::size_t> source_rows;

  std::size_t size() const { return labels.size(); }
};

inline Dataset select_rows(const Dataset& src, std::span<const std::size_t> rows) {
  Dataset out;
  out.classes = src.classes;
  out.features = Matrix(rows.size(), src.input_dim());
  out.labels.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = src.features.row(rows[k]);
    std::copy(r.begin(), r.end(), out.features.row(k).begin());
    out.labels.push_back(src.labels[rows[k]]);
  }
  return out;
}

inline std::vector<std::size_t> class_histogram(std::span<const int> labels, std::size_t classes) {
  std::vector<std::size_t> h(classes, 0);
  for (int y : labels) ++h.at(static_cast<std::size_t>(y));
  return h;
}

/// Gaussian mixture with unit-variance isotropic noise and one center per
/// class. Centers are rescaled so the closest pair sits `separation` apart.
inline Dataset generate_base(std::size_t classes, std::size_t samples, std::size_t input_dim, std::uint64_t seed,
                             double separation = 4.5) {
  if (classes < 2) throw Error(ErrorKind::config, "need at least 2 classes");
  if (input_dim == 0) throw Error(ErrorKind::config, "input dimension must be positive");
  if (samples < classes)
    throw Error(ErrorKind::empty_input, "insufficient samples: " + std::to_string(samples) + " for " +
                                            std::to_string(classes) + " classes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix centers(classes, input_dim);
  for (double& c : centers.data()) c = normal(rng);
  double closest = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < classes; ++a)
    for (std::size_t b = a + 1; b < classes; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < input_dim; ++j) d2 += std::pow(centers(a, j) - centers(b, j), 2);
      closest = std::min(closest, std::sqrt(d2));
    }
  if (!(closest > 0.0)) throw Error(ErrorKind::degenerate, "coincident mixture centers");
  for (double& c : centers.data()) c *= separation / closest;

  std::vector<int> labels(samples);
  for (std::size_t i = 0; i < samples; ++i) labels[i] = static_cast<int>(i % classes);
  std::shuffle(labels.begin(), labels.end(), rng);

  Dataset out;
  out.classes = classes;
  out.features = Matrix(samples, input_dim);
  for (std::size_t i = 0; i < samples; ++i)
    for (std::size_t j = 0; j < input_dim; ++j)
      out.features(i, j) = centers(static_cast<std::size_t>(labels[i]), j) + normal(rng);
  out.labels = std::move(labels);
  return out;
}

/// Stratified split; returns {train, test}. Every class keeps at least one
/// training row.
inline std::pair<Dataset, Dataset> split_stratified(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw Error(ErrorKind::config, "test fraction must lie in (0,1)");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  std::vector<std::size_t> train, test;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(rows.size())));
    if (n_test >= rows.size() && !rows.empty()) n_test = rows.size() - 1;
    test.insert(test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {select_rows(data, train), select_rows(data, test)};
}

inline ClientDataset make_shard(const Dataset& data, std::size_t client_id, std::vector<std::size_t> rows) {
  std::sort(rows.begin(), rows.end());
  auto sub = select_rows(data, rows);
  return {client_id, std::move(sub.features), std::move(sub.labels), std::move(rows)};
}

/// Label-skew partition: for each class, client shares ~ Dirichlet(alpha).
/// Shards are disjoint and cover the input; empty shards are repaired by
/// moving one row at a time from the current largest shard.
inline std::vector<ClientDataset> partition_dirichlet(const Dataset& data, std::size_t clients, double alpha,
                                                      std::uint64_t seed) {
  if (clients < 1) throw Error(ErrorKind::config, "need at least one client");
  if (!(alpha > 0.0)) throw Error(ErrorKind::config, "dirichlet alpha must be positive");
  if (data.size() < clients)
    throw Error(ErrorKind::empty_input, "cannot give " + std::to_string(clients) + " clients a sample each from " +
                                            std::to_string(data.size()) + " rows");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> assigned(clients);

  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const Vector share = sample_dirichlet(rng, clients, alpha);
    double cumulative = 0.0;
    std::size_t begin = 0;
    for (std::size_t c = 0; c < clients; ++c) {
      cumulative += share[c];
      std::size_t end = c + 1 == clients
                            ? rows.size()
                            : std::min(rows.size(), static_cast<std::size_t>(
                                                        std::floor(cumulative * static_cast<double>(rows.size()))));
      end = std::max(end, begin);
      assigned[c].insert(assigned[c].end(), rows.begin() + static_cast<std::ptrdiff_t>(begin),
                         rows.begin() + static_cast<std::ptrdiff_t>(end));
      begin = end;
    }
  }

  for (;;) {
    auto empty = std::find_if(assigned.begin(), assigned.end(), [](const auto& v) { return v.empty(); });
    if (empty == assigned.end()) break;
    auto largest = std::max_element(assigned.begin(), assigned.end(),
                                     [](const auto& a, const auto& b) { return a.size() < b.size(); });
    std::sort(largest->begin(), largest->end());
    empty->push_back(largest->back());
    largest->pop_back();
  }

  std::vector<ClientDataset> shards;
  shards.reserve(clients);
  for (std::size_t c = 0; c < clients; ++c) shards.push_back(make_shard(data, c, std::move(assigned[c])));
  return shards;
}

/// Every client gets the same rows; used for homogeneous fixed-point runs.
inline std::vector<ClientDataset> replicate_shards(const Dataset& data, std::size_t clients) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<ClientDataset> shards;
  for (std::size_t c = 0; c < clients; ++c) shards.push_back(make_shard(data, c, all));
  return shards;
}

inline constexpr double kShortcutNoiseStd = 0.25;

/// Target the shortcut column encodes: +1 for the lower half of the classes,
/// -1 otherwise.
inline double shortcut_target(int label, std::size_t classes) {
  return 2.0 * (static_cast<std::size_t>(label) < classes / 2 ? 1.0 : 0.0) - 1.0;
}

inline Matrix append_columns(const Matrix& base, std::size_t extra) {
  Matrix out(base.rows(), base.cols() + extra);
  for (std::size_t r = 0; r < base.rows(); ++r) {
    const auto src = base.row(r);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

/// Appends one column per client. On client i, column i carries the
/// shortcut target (plus small noise) with probability rho; every other
/// entry is standard normal noise.
inline std::vector<ClientDataset> inject_shortcut(const std::vector<ClientDataset>& shards, std::size_t classes,
                                                  double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error(ErrorKind::config, "shortcut strength must lie in [0,1]");
  const std::size_t m = shards.size();
  std::vector<ClientDataset> out;
  out.reserve(m);
  for (const auto& shard : shards) {
    std::mt19937_64 rng(mix_seed(seed, shard.client_id, 0x5c));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution active(rho);
    ClientDataset s = shard;
    const std::size_t base = shard.features.cols();
    s.features = append_columns(shard.features, m);
    for (std::size_t r = 0; r < s.size(); ++r) {
      for (std::size_t j = 0; j < m; ++j) {
        double v = normal(rng);
        const bool on = active(rng);
        if (j == shard.client_id && on) v = shortcut_target(s.labels[r], classes) + kShortcutNoiseStd * v;
        s.features(r, base + j) = v;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Pure-noise counterpart of inject_shortcut for held-out data.
inline Dataset append_noise_columns(const Dataset& data, std::size_t extra, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset out = data;
  const std::size_t base = data.input_dim();
  out.features = append_columns(data.features, extra);
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t j = 0; j < extra; ++j) out.features(r, base + j) = normal(rng);
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

template <typename T>
bool parse_number(const std::string& text, T& out) {
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

}  // namespace detail

/// Reads a comma-separated file with a header row. All columns other than
/// `label_column` become features, in file order. The class count is
/// max(label) + 1.
inline Dataset load_csv(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::empty_input, path + " has no header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) throw Error(ErrorKind::schema, path + " has no column named '" + label_column + "'");
  const auto label_idx = static_cast<std::size_t>(label_it - header.begin());

  Vector values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw Error(ErrorKind::parse, path + ":" + std::to_string(line_no) + ": expected " +
                                        std::to_string(header.size()) + " fields, found " +
                                        std::to_string(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = detail::trim(cells[c]);
      if (c == label_idx) {
        int y = 0;
        if (!detail::parse_number(cell, y) || y < 0)
          throw Error(ErrorKind::parse, path + ":" + std::to_string(line_no) + ": bad label '" + cell + "'");
        labels.push_back(y);
      } else {
        double v = 0.0;
        if (!detail::parse_number(cell, v) || !std::isfinite(v))
          throw Error(ErrorKind::parse, path + ":" + std::to_string(line_no) + ": bad number '" + cell + "' in column '" +
                                            header[c] + "'");
        values.push_back(v);
      }
    }
  }
  if (labels.empty()) throw Error(ErrorKind::empty_input, path + " contains no data rows");

  Dataset out;
  out.features = Matrix(labels.size(), header.size() - 1, std::move(values));
  out.classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  out.labels = std::move(labels);
  return out;
}

/// Writes features as x0..x{d-1} followed by the label column, with
/// round-trip precision.
inline void write_csv(const std::string& path, const Matrix& features, std::span<const int> labels,
                      const std::string& label_column = "label") {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  for (std::size_t j = 0; j < features.cols(); ++j) out << 'x' << j << ',';
  out << label_column << '\n';
  char buf[64];
  for (std::size_t r = 0; r < features.rows(); ++r) {
    for (double v : features.row(r)) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out.write(buf, ptr - buf);
      out << ',';
    }
    out << labels[r] << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "failed writing " + path);
}

}  // namespace fedld
