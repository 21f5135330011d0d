#pragma once

// Round instrumentation: the three-term global loss decomposition (local,
// distribution shift, aggregation), gradient conflict statistics and the
// principal spectrum, plus JSON-lines / CSV persistence.
//
// With p_i = n_i / n and L_j(w) the CE loss of w on client j's shard:
//   local      = sum_i p_i L_i(w_i)
//   shift      = sum_j sum_i p_j p_i (L_j(w_i) - L_i(w_i))
//   aggregation= sum_i p_i (L(w) - L(w_i)),   L(.) = sum_j p_j L_j(.)
// and local + shift + aggregation == L(w) identically.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedld/data.hpp"
#include "fedld/error.hpp"
#include "fedld/linalg.hpp"
#include "fedld/local_trainer.hpp"
#include "fedld/model.hpp"

namespace fedld {

inline constexpr double kDecompositionTolerance = 1e-9;

/// Entry (j, i) is the CE loss of model i on shard j.
inline Matrix cross_eval_matrix(const std::vector<ModelParams>& locals, const std::vector<ClientDataset>& shards) {
  if (locals.size() != shards.size())
    throw Error(ErrorKind::shape, std::to_string(locals.size()) + " models for " + std::to_string(shards.size()) +
                                      " shards");
  const std::size_t m = locals.size();
  Matrix cross(m, m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < m; ++i) {
      try {
        cross(j, i) = evaluate(locals[i], shards[j].features, shards[j].labels).ce;
      } catch (const Error& e) {
        throw Error(e.kind(), "evaluating model " + std::to_string(i) + " on shard " + std::to_string(j) + ": " +
                                  e.what());
      }
    }
  return cross;
}

struct Decomposition {
  double local = 0.0;
  double shift_signed = 0.0;
  double aggregation_signed = 0.0;
  double global = 0.0;

  double shift() const { return std::abs(shift_signed); }
  double aggregation() const { return std::abs(aggregation_signed); }
  double residual() const { return local + shift_signed + aggregation_signed - global; }
};

/// `global_on_shards[j]` is L_j(w) for the aggregated model w.
inline Decomposition decompose(const Matrix& cross, std::span<const double> global_on_shards,
                               std::span<const double> weights) {
  const std::size_t m = cross.rows();
  if (cross.cols() != m || m == 0) throw Error(ErrorKind::shape, "cross-evaluation matrix must be square");
  if (weights.size() != m || global_on_shards.size() != m)
    throw Error(ErrorKind::shape, "decomposition needs one weight and one global loss per client");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (std::abs(wsum - 1.0) > 1e-12) throw Error(ErrorKind::config, "decomposition weights do not sum to 1");

  Decomposition d;
  for (std::size_t j = 0; j < m; ++j) d.global += weights[j] * global_on_shards[j];
  for (std::size_t i = 0; i < m; ++i) {
    const double own = cross(i, i);
    d.local += weights[i] * own;
    double shifted = 0.0;  // sum_j p_j (L_j(w_i) - L_i(w_i))
    double on_all = 0.0;   // L(w_i)
    for (std::size_t j = 0; j < m; ++j) {
      shifted += weights[j] * (cross(j, i) - own);
      on_all += weights[j] * cross(j, i);
    }
    d.shift_signed += weights[i] * shifted;
    d.aggregation_signed += weights[i] * (d.global - on_all);
  }
  const double scale = std::max({std::abs(d.global), std::abs(d.local), 1e-300});
  if (!(std::abs(d.residual()) <= kDecompositionTolerance * scale))
    throw Error(ErrorKind::consistency, "loss decomposition identity violated: residual " +
                                            std::to_string(d.residual()) + " at global loss " +
                                            std::to_string(d.global));
  return d;
}

inline Decomposition decompose(const Matrix& cross, const ModelParams& global, std::span<const double> weights,
                               const std::vector<ClientDataset>& shards) {
  Vector on_shards;
  on_shards.reserve(shards.size());
  for (const auto& s : shards) on_shards.push_back(evaluate(global, s.features, s.labels).ce);
  return decompose(cross, on_shards, weights);
}

struct ConflictStats {
  double mean_cosine = 1.0;
  double min_cosine = 1.0;
  /// Fewer than two non-zero gradients; the neutral value 1.0 is reported.
  bool degenerate = false;
};

inline ConflictStats conflict_stats(const std::vector<FlatGradient>& grads) {
  std::vector<const FlatGradient*> usable;
  for (const auto& g : grads)
    if (norm(g.delta) > 0.0) usable.push_back(&g);
  if (usable.size() < 2) return {1.0, 1.0, true};
  double sum = 0.0, lowest = 1.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < usable.size(); ++a)
    for (std::size_t b = a + 1; b < usable.size(); ++b) {
      const double c = cosine(usable[a]->delta, usable[b]->delta);
      sum += c;
      lowest = std::min(lowest, c);
      ++pairs;
    }
  return {sum / static_cast<double>(pairs), lowest, false};
}

struct RoundMetrics {
  std::size_t round = 0;
  std::size_t participants = 0;
  std::optional<Decomposition> decomposition;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double train_loss = 0.0;  // L(w) over the participants' shards
  ConflictStats conflict;
  std::optional<ConflictStats> revised_conflict;
  Vector spectrum;
  std::size_t retained_axes = 0;
  std::size_t orthogonal_fallbacks = 0;
  bool degenerate_round = false;
  double wall_time = 0.0;  // seconds; persisted separately from the metrics
};

/// Column order shared by the JSON-lines and CSV outputs.
inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {
      "round",           "participants",        "local_loss",      "dist_shift_loss", "aggregation_loss",
      "dist_shift_signed", "aggregation_signed", "global_loss",     "train_loss",      "test_loss",
      "test_accuracy",   "mean_pairwise_cosine", "min_pairwise_cosine", "revised_mean_pairwise_cosine",
      "retained_axes",   "orthogonal_fallbacks", "degenerate_round", "spectrum"};
  return cols;
}

inline nlohmann::ordered_json to_json(const RoundMetrics& m) {
  nlohmann::ordered_json j;
  j["round"] = m.round;
  j["participants"] = m.participants;
  if (m.decomposition) {
    const auto& d = *m.decomposition;
    j["local_loss"] = d.local;
    j["dist_shift_loss"] = d.shift();
    j["aggregation_loss"] = d.aggregation();
    j["dist_shift_signed"] = d.shift_signed;
    j["aggregation_signed"] = d.aggregation_signed;
    j["global_loss"] = d.global;
  } else {
    for (const char* k :
         {"local_loss", "dist_shift_loss", "aggregation_loss", "dist_shift_signed", "aggregation_signed", "global_loss"})
      j[k] = nullptr;
  }
  j["train_loss"] = m.train_loss;
  j["test_loss"] = m.test_loss;
  j["test_accuracy"] = m.test_accuracy;
  j["mean_pairwise_cosine"] = m.conflict.mean_cosine;
  j["min_pairwise_cosine"] = m.conflict.min_cosine;
  if (m.revised_conflict)
    j["revised_mean_pairwise_cosine"] = m.revised_conflict->mean_cosine;
  else
    j["revised_mean_pairwise_cosine"] = nullptr;
  j["retained_axes"] = m.retained_axes;
  j["orthogonal_fallbacks"] = m.orthogonal_fallbacks;
  j["degenerate_round"] = m.degenerate_round;
  j["spectrum"] = m.spectrum;
  return j;
}

inline std::string csv_header() {
  std::string h;
  for (const auto& c : metric_columns()) h += (h.empty() ? "" : ",") + c;
  return h;
}

/// One CSV row; nulls become empty cells and the spectrum is ';'-joined.
inline std::string to_csv_row(const RoundMetrics& m) {
  const auto j = to_json(m);
  std::string row;
  bool first = true;
  for (const auto& c : metric_columns()) {
    if (!first) row += ',';
    first = false;
    const auto& v = j.at(c);
    if (v.is_null()) continue;
    if (v.is_array()) {
      std::string joined;
      for (const auto& x : v) joined += (joined.empty() ? "" : ";") + x.dump();
      row += joined;
    } else {
      row += v.dump();
    }
  }
  return row;
}

inline RoundMetrics round_metrics_from_json(const nlohmann::json& j) {
  RoundMetrics m;
  m.round = j.at("round").get<std::size_t>();
  m.participants = j.at("participants").get<std::size_t>();
  if (!j.at("global_loss").is_null()) {
    Decomposition d;
    d.local = j.at("local_loss").get<double>();
    d.shift_signed = j.at("dist_shift_signed").get<double>();
    d.aggregation_signed = j.at("aggregation_signed").get<double>();
    d.global = j.at("global_loss").get<double>();
    m.decomposition = d;
  }
  m.train_loss = j.at("train_loss").get<double>();
  m.test_loss = j.at("test_loss").get<double>();
  m.test_accuracy = j.at("test_accuracy").get<double>();
  m.conflict.mean_cosine = j.at("mean_pairwise_cosine").get<double>();
  m.conflict.min_cosine = j.at("min_pairwise_cosine").get<double>();
  if (!j.at("revised_mean_pairwise_cosine").is_null())
    m.revised_conflict = ConflictStats{j.at("revised_mean_pairwise_cosine").get<double>(), 0.0, false};
  m.retained_axes = j.at("retained_axes").get<std::size_t>();
  m.orthogonal_fallbacks = j.at("orthogonal_fallbacks").get<std::size_t>();
  m.degenerate_round = j.at("degenerate_round").get<bool>();
  m.spectrum = j.at("spectrum").get<Vector>();
  return m;
}

inline std::vector<RoundMetrics> read_metrics_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  std::vector<RoundMetrics> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(round_metrics_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace fedld
