#pragma once

// In-process federated simulation: sample clients, train them concurrently,
// aggregate, update the global model, evaluate and persist per-round metrics.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedld/aggregation.hpp"
#include "fedld/config.hpp"
#include "fedld/data.hpp"
#include "fedld/error.hpp"
#include "fedld/local_trainer.hpp"
#include "fedld/metrics.hpp"
#include "fedld/model.hpp"
#include "fedld/rng.hpp"

namespace fedld {

/// max(1, round(rate * m)) client ids in ascending order. rate == 1 selects
/// everyone; otherwise the subset is a seeded draw keyed by (seed, round).
inline std::vector<std::size_t> sample_clients(std::size_t m, double rate, std::uint64_t round, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw Error(ErrorKind::config, "sampling rate must lie in (0,1]");
  std::vector<std::size_t> ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(rate * static_cast<double>(m))), 1, m);
  if (k == m) return ids;
  std::mt19937_64 rng(mix_seed(seed, round, 0x5a3));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct Federation {
  Architecture arch;
  std::vector<ClientDataset> shards;
  Dataset test;
};

inline std::uint64_t data_seed(const RunConfig& cfg) { return mix_seed(cfg.seed, cfg.federation.seed, 1); }

/// Materializes client shards and the global held-out split for `cfg`.
inline Federation build_federation(const RunConfig& cfg) {
  const std::uint64_t seed = data_seed(cfg);
  Dataset base = cfg.data.csv_path.empty()
                     ? generate_base(cfg.data.classes, cfg.data.samples, cfg.data.input_dim, mix_seed(seed, 10),
                                     cfg.data.separation)
                     : load_csv(cfg.data.csv_path, cfg.data.label_column);
  auto [train, test] = split_stratified(base, cfg.federation.test_fraction, mix_seed(seed, 11));

  Federation fed;
  const std::size_t m = cfg.federation.num_clients;
  fed.shards = cfg.federation.partition == PartitionKind::replicate
                   ? replicate_shards(train, m)
                   : partition_dirichlet(train, m, cfg.federation.dirichlet_alpha, mix_seed(seed, 12));
  if (cfg.federation.shortcut) {
    fed.shards = inject_shortcut(fed.shards, base.classes, cfg.federation.shortcut_strength, mix_seed(seed, 13));
    test = append_noise_columns(test, m, mix_seed(seed, 14));
  }
  fed.test = std::move(test);
  const std::size_t input_dim = fed.shards.front().features.cols();
  fed.arch = cfg.model.kind == ArchKind::mlp ? Architecture::mlp(input_dim, base.classes, cfg.model.hidden)
                                              : Architecture::softmax(input_dim, base.classes);
  return fed;
}

// Checkpoint layout (little-endian):
//   char[8] "FEDLDCK1" | u32 version | u32 arch kind | u64 input_dim |
//   u64 hidden | u64 classes | u64 count | f64[count] flat parameters
// plus a JSON sidecar "<path>.json" with the architecture, parameter count,
// config hash and round.
inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'D', 'L', 'D', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void write_checkpoint(const std::string& path, const ModelParams& p, const std::string& hash,
                             std::size_t round) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + path);
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put(kCheckpointVersion);
  put(static_cast<std::uint32_t>(p.arch.kind));
  put(static_cast<std::uint64_t>(p.arch.input_dim));
  put(static_cast<std::uint64_t>(p.arch.hidden));
  put(static_cast<std::uint64_t>(p.arch.classes));
  put(static_cast<std::uint64_t>(p.flat.size()));
  out.write(reinterpret_cast<const char*>(p.flat.data()), static_cast<std::streamsize>(p.flat.size() * sizeof(double)));
  if (!out) throw Error(ErrorKind::io, "failed writing checkpoint " + path);

  nlohmann::ordered_json side;
  side["format"] = "fedld-checkpoint";
  side["version"] = kCheckpointVersion;
  side["architecture"] = {{"kind", p.arch.kind == ArchKind::mlp ? "mlp" : "softmax"},
                          {"input_dim", p.arch.input_dim},
                          {"hidden", p.arch.hidden},
                          {"classes", p.arch.classes}};
  side["param_count"] = p.flat.size();
  side["config_hash"] = hash;
  side["round"] = round;
  std::ofstream js(path + ".json");
  js << side.dump(2) << '\n';
  if (!js) throw Error(ErrorKind::io, "failed writing checkpoint sidecar " + path + ".json");
}

inline ModelParams read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw Error(ErrorKind::parse, path + " is not a checkpoint");
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof(v)); };
  std::uint32_t version = 0, kind = 0;
  std::uint64_t input_dim = 0, hidden = 0, classes = 0, count = 0;
  get(version);
  get(kind);
  get(input_dim);
  get(hidden);
  get(classes);
  get(count);
  if (!in || version != kCheckpointVersion || kind > 1) throw Error(ErrorKind::parse, path + ": bad checkpoint header");
  Architecture arch{static_cast<ArchKind>(kind), input_dim, classes, hidden};
  if (arch.param_count() != count) throw Error(ErrorKind::parse, path + ": parameter count does not match architecture");
  Vector flat(count);
  in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw Error(ErrorKind::parse, path + ": truncated checkpoint");
  return {arch, std::move(flat)};
}

struct RunSummary {
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t rounds_completed = 0;
  std::string metrics_path;
  /// Some output could not be written; in-memory results are complete.
  bool persisted_partial = false;
  std::vector<RoundMetrics> history;
  ModelParams final_model;
};

namespace detail {

class MetricsSink {
 public:
  explicit MetricsSink(const std::string& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create output directory " + dir + ": " + ec.message());
    jsonl_path_ = (std::filesystem::path(dir) / "metrics.jsonl").string();
    jsonl_.open(jsonl_path_, std::ios::trunc);
    csv_.open((std::filesystem::path(dir) / "metrics.csv").string(), std::ios::trunc);
    timing_.open((std::filesystem::path(dir) / "timing.csv").string(), std::ios::trunc);
    if (!jsonl_ || !csv_ || !timing_) throw Error(ErrorKind::io, "cannot open metrics files in " + dir);
    csv_ << csv_header() << '\n';
    timing_ << "round,wall_time_seconds\n";
  }

  void write(const RoundMetrics& m) {
    if (jsonl_path_.empty()) return;
    jsonl_ << to_json(m).dump() << '\n';
    csv_ << to_csv_row(m) << '\n';
    timing_ << m.round << ',' << m.wall_time << '\n';
    jsonl_.flush();
    csv_.flush();
    timing_.flush();
    if (!jsonl_ || !csv_ || !timing_) failed_ = true;
  }

  const std::string& path() const { return jsonl_path_; }
  bool failed() const { return failed_; }

 private:
  std::string jsonl_path_;
  std::ofstream jsonl_, csv_, timing_;
  bool failed_ = false;
};

inline std::vector<LocalResult> train_clients(const ModelParams& global, const std::vector<ClientDataset>& shards,
                                              const std::vector<std::size_t>& ids, const LocalConfig& local,
                                              std::uint64_t round, std::size_t threads) {
  std::vector<LocalResult> results(ids.size());
  std::size_t width = threads ? threads : std::max(1u, std::thread::hardware_concurrency());
  width = std::min(width, ids.size());
  for (std::size_t start = 0; start < ids.size(); start += width) {
    const std::size_t stop = std::min(ids.size(), start + width);
    std::vector<std::future<LocalResult>> pending;
    for (std::size_t k = start; k < stop; ++k)
      pending.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred,
                                   [&, k] { return train_local(global, shards[ids[k]], local, round); }));
    for (std::size_t k = start; k < stop; ++k) results[k] = pending[k - start].get();
  }
  return results;
}

}  // namespace detail

/// What a round observer sees, after local training and before the global
/// update.
struct RoundContext {
  std::size_t round;
  const Federation& federation;
  const ModelParams& global;
  const std::vector<std::size_t>& participants;
  const std::vector<LocalResult>& results;
  const LocalConfig& local;  // with the derived training seed
};

using RoundObserver = std::function<void(const RoundContext&)>;

/// Executes `cfg.rounds` rounds. Results are a pure function of the config:
/// client results are collected in id order before aggregation.
inline RunSummary run(const RunConfig& cfg, const RoundObserver& observer = {}) {
  cfg.validate();
  const Federation fed = build_federation(cfg);
  detail::MetricsSink sink(cfg.output_dir);
  const std::string hash = config_hash(cfg);

  LocalConfig local = cfg.local;
  local.seed = mix_seed(cfg.seed, cfg.local.seed, 2);
  const std::uint64_t sampling_seed = mix_seed(cfg.seed, 3);

  ModelParams global = init_params(fed.arch, mix_seed(cfg.seed, 4));
  RunSummary summary;
  summary.metrics_path = sink.path();

  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    const auto started = std::chrono::steady_clock::now();
    const auto ids = sample_clients(fed.shards.size(), cfg.sampling_rate, round, sampling_seed);

    std::vector<LocalResult> results;
    try {
      results = detail::train_clients(global, fed.shards, ids, local, round, cfg.threads);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::divergence) throw;
      throw Error(ErrorKind::divergence, "round " + std::to_string(round) + ": " + e.what());
    }

    if (observer) observer(RoundContext{round, fed, global, ids, results, local});

    std::vector<FlatGradient> grads;
    grads.reserve(results.size());
    for (const auto& r : results) grads.push_back(r.gradient);
    const auto outcome = aggregate_round(grads, cfg.mode);
    const ModelParams next = apply_global_update(global, outcome.global, cfg.server_lr);
    if (!all_finite(next.flat))
      throw Error(ErrorKind::divergence, "round " + std::to_string(round) + ": global model became non-finite");

    RoundMetrics m;
    m.round = round;
    m.participants = ids.size();
    m.conflict = conflict_stats(grads);
    if (cfg.mode.kind == AggregationKind::principal && !outcome.revised.empty())
      m.revised_conflict = conflict_stats(outcome.revised);
    if (outcome.basis) {
      m.spectrum = outcome.basis->spectrum;
      m.retained_axes = outcome.basis->retained;
    }
    m.orthogonal_fallbacks = outcome.orthogonal_fallbacks;
    m.degenerate_round = outcome.degenerate;

    std::vector<ClientDataset> participating;
    participating.reserve(ids.size());
    for (auto id : ids) participating.push_back(fed.shards[id]);
    const Vector weights = sample_weights(grads);
    Vector on_shards;
    for (const auto& s : participating) on_shards.push_back(evaluate(next, s.features, s.labels).ce);
    m.train_loss = 0.0;
    for (std::size_t j = 0; j < on_shards.size(); ++j) m.train_loss += weights[j] * on_shards[j];

    if (cfg.decompose_every > 0 && round % cfg.decompose_every == 0) {
      std::vector<ModelParams> locals;
      locals.reserve(results.size());
      for (const auto& r : results) locals.push_back(r.local);
      m.decomposition = decompose(cross_eval_matrix(locals, participating), on_shards, weights);
    }

    const auto test = evaluate(next, fed.test.features, fed.test.labels);
    m.test_loss = test.ce;
    m.test_accuracy = test.accuracy;
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    sink.write(m);
    global = next;
    summary.best_accuracy = std::max(summary.best_accuracy, m.test_accuracy);
    summary.final_accuracy = m.test_accuracy;
    summary.rounds_completed = round;
    summary.history.push_back(std::move(m));
  }

  summary.persisted_partial = sink.failed();
  if (!cfg.output_dir.empty()) {
    try {
      write_checkpoint((std::filesystem::path(cfg.output_dir) / "final_model.bin").string(), global, hash,
                       summary.rounds_completed);
    } catch (const Error&) {
      summary.persisted_partial = true;
    }
  }
  summary.final_model = std::move(global);
  return summary;
}

/// Counterfactual comparison inside one round, from a shared global model:
/// the participants' plain local models are combined by averaging and by
/// principal aggregation, and the same clients are retrained with margin
/// control and averaged.
struct RoundProbe {
  std::size_t round = 0;
  Decomposition plain;      // plain local training, averaged
  Decomposition margin;     // margin-controlled local training, averaged
  Decomposition principal;  // plain local training, principal aggregation
};

inline RoundProbe probe_round(const RoundContext& ctx, double lambda, const AggregationMode& principal_mode,
                              double server_lr, std::size_t threads) {
  std::vector<ClientDataset> shards;
  for (auto id : ctx.participants) shards.push_back(ctx.federation.shards[id]);
  std::vector<FlatGradient> grads;
  std::vector<ModelParams> locals;
  for (const auto& r : ctx.results) {
    grads.push_back(r.gradient);
    locals.push_back(r.local);
  }
  const Vector weights = sample_weights(grads);
  const Matrix cross = cross_eval_matrix(locals, shards);

  auto combined = [&](const std::vector<FlatGradient>& g, const AggregationMode& mode) {
    return apply_global_update(ctx.global, aggregate_round(g, mode).global, server_lr);
  };
  RoundProbe probe;
  probe.round = ctx.round;
  AggregationMode averaging = principal_mode;
  averaging.kind = AggregationKind::fedavg;
  probe.plain = decompose(cross, combined(grads, averaging), weights, shards);
  AggregationMode principal = principal_mode;
  principal.kind = AggregationKind::principal;
  probe.principal = decompose(cross, combined(grads, principal), weights, shards);

  LocalConfig controlled = ctx.local;
  controlled.lambda = lambda;
  const auto retrained = detail::train_clients(ctx.global, ctx.federation.shards, ctx.participants, controlled,
                                               ctx.round, threads);
  std::vector<FlatGradient> margin_grads;
  std::vector<ModelParams> margin_locals;
  for (const auto& r : retrained) {
    margin_grads.push_back(r.gradient);
    margin_locals.push_back(r.local);
  }
  probe.margin = decompose(cross_eval_matrix(margin_locals, shards), combined(margin_grads, averaging), weights, shards);
  return probe;
}

/// Runs `cfg` and probes every instrumented round (round % decompose_every
/// == 0).
inline std::vector<RoundProbe> probe_run(const RunConfig& cfg, double lambda) {
  std::vector<RoundProbe> probes;
  if (cfg.decompose_every == 0) throw Error(ErrorKind::config, "probing needs decompose_every > 0");
  run(cfg, [&](const RoundContext& ctx) {
    if (ctx.round % cfg.decompose_every == 0)
      probes.push_back(probe_round(ctx, lambda, cfg.mode, cfg.server_lr, cfg.threads));
  });
  return probes;
}

struct AblationCell {
  std::string name;
  double lambda = 0.0;
  AggregationKind kind = AggregationKind::fedavg;
  std::vector<RunSummary> runs;  // one per seed

  double mean_final_accuracy() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.final_accuracy;
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
  }
};

/// Mean of a decomposition term over every instrumented round of every run.
inline double mean_decomposition_term(const std::vector<RunSummary>& runs,
                                      const std::function<double(const Decomposition&)>& term) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs)
    for (const auto& m : r.history)
      if (m.decomposition) {
        s += term(*m.decomposition);
        ++n;
      }
  return n ? s / static_cast<double>(n) : 0.0;
}

/// The 2 x 2 grid margin control {off, on} x aggregation {fedavg, principal}.
/// Per-cell output goes to <output_dir>/<cell>/seed-<k> when output_dir is set.
inline std::vector<AblationCell> ablate(const RunConfig& base, double lambda_on, const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationCell> cells = {
      {"fedavg", 0.0, AggregationKind::fedavg, {}},
      {"margin", lambda_on, AggregationKind::fedavg, {}},
      {"principal", 0.0, AggregationKind::principal, {}},
      {"fedld", lambda_on, AggregationKind::principal, {}},
  };
  for (auto& cell : cells) {
    for (auto seed : seeds) {
      RunConfig c = base;
      c.local.lambda = cell.lambda;
      c.mode.kind = cell.kind;
      c.seed = seed;
      if (!base.output_dir.empty())
        c.output_dir =
            (std::filesystem::path(base.output_dir) / cell.name / ("seed-" + std::to_string(seed))).string();
      cell.runs.push_back(run(c));
    }
  }
  return cells;
}

}  // namespace fedld
