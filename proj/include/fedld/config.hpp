#pragma once

// Run configuration and its JSON form. Missing keys take defaults; unknown
// keys are rejected so typos surface as config errors.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fedld/aggregation.hpp"
#include "fedld/error.hpp"
#include "fedld/local_trainer.hpp"
#include "fedld/model.hpp"

namespace fedld {

enum class PartitionKind {
  dirichlet,
  replicate,  // every client holds the full training split
};

struct FederationSpec {
  std::size_t num_clients = 10;
  double dirichlet_alpha = 1.0;
  PartitionKind partition = PartitionKind::dirichlet;
  bool shortcut = false;  // append one shortcut column per client
  double shortcut_strength = 0.0;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 1) throw Error(ErrorKind::config, "num_clients must be at least 1");
    if (!(dirichlet_alpha > 0.0)) throw Error(ErrorKind::config, "dirichlet_alpha must be positive");
    if (!(shortcut_strength >= 0.0 && shortcut_strength <= 1.0))
      throw Error(ErrorKind::config, "shortcut_strength must lie in [0,1]");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw Error(ErrorKind::config, "test_fraction must lie in (0,1)");
  }
};

struct DataSpec {
  std::string csv_path;  // empty: synthetic Gaussian mixture
  std::string label_column = "label";
  std::size_t classes = 4;
  std::size_t samples = 4000;
  std::size_t input_dim = 10;
  double separation = 4.5;

  void validate() const {
    if (!csv_path.empty()) return;
    if (classes < 2) throw Error(ErrorKind::config, "classes must be at least 2");
    if (samples < classes) throw Error(ErrorKind::config, "samples must be at least the class count");
    if (input_dim < 1) throw Error(ErrorKind::config, "input_dim must be positive");
    if (!(separation > 0.0)) throw Error(ErrorKind::config, "separation must be positive");
  }
};

struct ModelSpec {
  ArchKind kind = ArchKind::softmax_regression;
  std::size_t hidden = 32;
};

struct RunConfig {
  DataSpec data;
  FederationSpec federation;
  ModelSpec model;
  LocalConfig local;
  AggregationMode mode;
  std::size_t rounds = 50;
  double sampling_rate = 1.0;
  double server_lr = 1.0;
  std::size_t decompose_every = 5;  // 0 disables
  std::uint64_t seed = 0;
  std::string output_dir;  // empty: keep results in memory only
  std::size_t threads = 0;  // 0: hardware concurrency

  void validate() const {
    data.validate();
    federation.validate();
    local.validate();
    mode.validate();
    if (rounds < 1) throw Error(ErrorKind::config, "rounds must be at least 1");
    if (!(sampling_rate > 0.0 && sampling_rate <= 1.0))
      throw Error(ErrorKind::config, "sampling_rate must lie in (0,1]");
    if (!std::isfinite(server_lr)) throw Error(ErrorKind::config, "server_lr must be finite");
    if (model.kind == ArchKind::mlp && model.hidden < 1) throw Error(ErrorKind::config, "hidden width must be positive");
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::config, where + " must be a JSON object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw Error(ErrorKind::config, "unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline AggregationKind parse_aggregation_kind(const std::string& s) {
  if (s == "fedavg") return AggregationKind::fedavg;
  if (s == "principal") return AggregationKind::principal;
  throw Error(ErrorKind::config, "unknown aggregation mode '" + s + "' (expected fedavg or principal)");
}

inline Revision parse_revision(const std::string& s) {
  if (s == "normalized") return Revision::normalized;
  if (s == "literal") return Revision::literal;
  throw Error(ErrorKind::config, "unknown revision '" + s + "' (expected normalized or literal)");
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["data"] = {{"csv_path", c.data.csv_path},     {"label_column", c.data.label_column},
               {"classes", c.data.classes},       {"samples", c.data.samples},
               {"input_dim", c.data.input_dim},   {"separation", c.data.separation}};
  j["federation"] = {{"num_clients", c.federation.num_clients},
                     {"dirichlet_alpha", c.federation.dirichlet_alpha},
                     {"partition", c.federation.partition == PartitionKind::dirichlet ? "dirichlet" : "replicate"},
                     {"shortcut", c.federation.shortcut},
                     {"shortcut_strength", c.federation.shortcut_strength},
                     {"test_fraction", c.federation.test_fraction},
                     {"seed", c.federation.seed}};
  j["model"] = {{"kind", c.model.kind == ArchKind::mlp ? "mlp" : "softmax"}, {"hidden", c.model.hidden}};
  j["local"] = {{"learning_rate", c.local.learning_rate}, {"batch_size", c.local.batch_size},
                {"local_epochs", c.local.local_epochs},   {"lambda", c.local.lambda},
                {"prox_mu", c.local.prox_mu},             {"seed", c.local.seed}};
  j["mode"] = {{"kind", to_string(c.mode.kind)},
               {"revision", to_string(c.mode.revision)},
               {"top_fraction", c.mode.top_fraction},
               {"rank_tolerance", c.mode.rank_tolerance}};
  j["rounds"] = c.rounds;
  j["sampling_rate"] = c.sampling_rate;
  j["server_lr"] = c.server_lr;
  j["decompose_every"] = c.decompose_every;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    detail::reject_unknown(j,
                           {"data", "federation", "model", "local", "mode", "rounds", "sampling_rate", "server_lr",
                            "decompose_every", "seed", "output_dir", "threads"},
                           "config");
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::reject_unknown(d, {"csv_path", "label_column", "classes", "samples", "input_dim", "separation"}, "data");
      detail::read_opt(d, "csv_path", c.data.csv_path);
      detail::read_opt(d, "label_column", c.data.label_column);
      detail::read_opt(d, "classes", c.data.classes);
      detail::read_opt(d, "samples", c.data.samples);
      detail::read_opt(d, "input_dim", c.data.input_dim);
      detail::read_opt(d, "separation", c.data.separation);
    }
    if (j.contains("federation")) {
      const auto& f = j.at("federation");
      detail::reject_unknown(f,
                             {"num_clients", "dirichlet_alpha", "partition", "shortcut", "shortcut_strength",
                              "test_fraction", "seed"},
                             "federation");
      detail::read_opt(f, "num_clients", c.federation.num_clients);
      detail::read_opt(f, "dirichlet_alpha", c.federation.dirichlet_alpha);
      if (f.contains("partition")) {
        const auto p = f.at("partition").get<std::string>();
        if (p == "dirichlet")
          c.federation.partition = PartitionKind::dirichlet;
        else if (p == "replicate")
          c.federation.partition = PartitionKind::replicate;
        else
          throw Error(ErrorKind::config, "unknown partition '" + p + "'");
      }
      detail::read_opt(f, "shortcut", c.federation.shortcut);
      detail::read_opt(f, "shortcut_strength", c.federation.shortcut_strength);
      detail::read_opt(f, "test_fraction", c.federation.test_fraction);
      detail::read_opt(f, "seed", c.federation.seed);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::reject_unknown(m, {"kind", "hidden"}, "model");
      if (m.contains("kind")) {
        const auto k = m.at("kind").get<std::string>();
        if (k == "softmax")
          c.model.kind = ArchKind::softmax_regression;
        else if (k == "mlp")
          c.model.kind = ArchKind::mlp;
        else
          throw Error(ErrorKind::config, "unknown model kind '" + k + "'");
      }
      detail::read_opt(m, "hidden", c.model.hidden);
    }
    if (j.contains("local")) {
      const auto& l = j.at("local");
      detail::reject_unknown(l, {"learning_rate", "batch_size", "local_epochs", "lambda", "prox_mu", "seed"}, "local");
      detail::read_opt(l, "learning_rate", c.local.learning_rate);
      detail::read_opt(l, "batch_size", c.local.batch_size);
      detail::read_opt(l, "local_epochs", c.local.local_epochs);
      detail::read_opt(l, "lambda", c.local.lambda);
      detail::read_opt(l, "prox_mu", c.local.prox_mu);
      detail::read_opt(l, "seed", c.local.seed);
    }
    if (j.contains("mode")) {
      const auto& m = j.at("mode");
      detail::reject_unknown(m, {"kind", "revision", "top_fraction", "rank_tolerance"}, "mode");
      if (m.contains("kind")) c.mode.kind = parse_aggregation_kind(m.at("kind").get<std::string>());
      if (m.contains("revision")) c.mode.revision = parse_revision(m.at("revision").get<std::string>());
      detail::read_opt(m, "top_fraction", c.mode.top_fraction);
      detail::read_opt(m, "rank_tolerance", c.mode.rank_tolerance);
    }
    detail::read_opt(j, "rounds", c.rounds);
    detail::read_opt(j, "sampling_rate", c.sampling_rate);
    detail::read_opt(j, "server_lr", c.server_lr);
    detail::read_opt(j, "decompose_every", c.decompose_every);
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "output_dir", c.output_dir);
    detail::read_opt(j, "threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// 64-bit FNV-1a of the canonical JSON form, as 16 hex digits. Output
/// location and thread count do not affect results and are left out.
inline std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  j.erase("threads");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

}  // namespace fedld
