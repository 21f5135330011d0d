// fedld command line: partition | run | ablate | inspect

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedld/config.hpp"
#include "fedld/error.hpp"
#include "fedld/metrics.hpp"
#include "fedld/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace fedld;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::optional<std::size_t> decompose_every;
  std::string mode;
  std::optional<double> lambda;
  std::string revision;
  std::optional<std::size_t> rounds;
  std::optional<double> learning_rate;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON run configuration")->required();
  cmd->add_option("--seed", o.seed, "Override the run seed");
  cmd->add_option("--output-dir", o.output_dir, "Directory for metrics, checkpoints and shards");
  cmd->add_option("--decompose-every", o.decompose_every, "Loss decomposition cadence in rounds (0 disables)");
  cmd->add_option("--mode", o.mode, "Aggregation: fedavg or principal");
  cmd->add_option("--lambda", o.lambda, "Margin-control weight");
  cmd->add_option("--revision", o.revision, "Principal revision: normalized or literal");
  cmd->add_option("--rounds", o.rounds, "Override the number of rounds");
  cmd->add_option("--learning-rate", o.learning_rate, "Override the local learning rate");
  cmd->add_option("--threads", o.threads, "Client worker threads (0: hardware concurrency)");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = load_run_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.output_dir.empty()) c.output_dir = o.output_dir;
  if (o.decompose_every) c.decompose_every = *o.decompose_every;
  if (!o.mode.empty()) c.mode.kind = parse_aggregation_kind(o.mode);
  if (o.lambda) c.local.lambda = *o.lambda;
  if (!o.revision.empty()) c.mode.revision = parse_revision(o.revision);
  if (o.rounds) c.rounds = *o.rounds;
  if (o.learning_rate) c.local.learning_rate = *o.learning_rate;
  if (o.threads) c.threads = *o.threads;
  c.validate();
  return c;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

int cmd_partition(const Overrides& o) {
  const RunConfig c = resolve(o);
  if (c.output_dir.empty()) throw Error(ErrorKind::config, "partition needs --output-dir");
  const fs::path dir = c.output_dir;
  ensure_dir(dir);
  const auto fed = build_federation(c);
  nlohmann::ordered_json manifest;
  manifest["config_hash"] = config_hash(c);
  manifest["classes"] = fed.arch.classes;
  manifest["input_dim"] = fed.arch.input_dim;
  manifest["clients"] = nlohmann::ordered_json::array();
  for (const auto& s : fed.shards) {
    const std::string name = "client_" + std::to_string(s.client_id) + ".csv";
    write_csv((dir / name).string(), s.features, s.labels);
    manifest["clients"].push_back(
        {{"id", s.client_id}, {"file", name}, {"samples", s.size()}, {"histogram", class_histogram(s.labels, fed.arch.classes)}});
  }
  write_csv((dir / "test.csv").string(), fed.test.features, fed.test.labels);
  manifest["test"] = {{"file", "test.csv"}, {"samples", fed.test.size()}};
  write_json(dir / "partition.json", manifest);

  std::printf("%-8s %8s  %s\n", "client", "samples", "class histogram");
  for (const auto& s : fed.shards) {
    std::string hist;
    for (auto n : class_histogram(s.labels, fed.arch.classes)) hist += std::to_string(n) + " ";
    std::printf("%-8zu %8zu  %s\n", s.client_id, s.size(), hist.c_str());
  }
  std::printf("wrote %zu shards and test.csv to %s\n", fed.shards.size(), dir.c_str());
  return 0;
}

int cmd_run(const Overrides& o) {
  const RunConfig c = resolve(o);
  if (!c.output_dir.empty()) {
    ensure_dir(c.output_dir);
    auto resolved = to_json(c);
    resolved["config_hash"] = config_hash(c);
    write_json(fs::path(c.output_dir) / "config.json", resolved);
  }
  const auto s = run(c);
  std::printf("rounds completed  %zu\n", s.rounds_completed);
  std::printf("final accuracy    %.4f\n", s.final_accuracy);
  std::printf("best accuracy     %.4f\n", s.best_accuracy);
  if (!s.metrics_path.empty()) std::printf("metrics           %s\n", s.metrics_path.c_str());
  if (s.persisted_partial) {
    std::fprintf(stderr, "fedld: some outputs could not be written to %s\n", c.output_dir.c_str());
    return exit_code_for(ErrorKind::io);
  }
  return 0;
}

int cmd_ablate(const Overrides& o, std::size_t seeds) {
  RunConfig c = resolve(o);
  if (seeds < 1) throw Error(ErrorKind::config, "--seeds must be at least 1");
  const double lambda_on = o.lambda ? *o.lambda : (c.local.lambda > 0.0 ? c.local.lambda : 0.03);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t k = 0; k < seeds; ++k) seed_list.push_back(c.seed + k);
  const auto cells = ablate(c, lambda_on, seed_list);

  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::printf("%-10s %7s %-10s %10s %10s %12s %12s\n", "cell", "lambda", "aggregate", "final_acc", "std", "shift_loss",
              "agg_loss");
  for (const auto& cell : cells) {
    const double mean = cell.mean_final_accuracy();
    double var = 0.0;
    for (const auto& r : cell.runs) var += (r.final_accuracy - mean) * (r.final_accuracy - mean);
    const double sd = cell.runs.size() > 1 ? std::sqrt(var / static_cast<double>(cell.runs.size() - 1)) : 0.0;
    const double shift = mean_decomposition_term(cell.runs, [](const Decomposition& d) { return d.shift(); });
    const double agg = mean_decomposition_term(cell.runs, [](const Decomposition& d) { return d.aggregation(); });
    std::printf("%-10s %7.3g %-10s %10.4f %10.4f %12.5f %12.5f\n", cell.name.c_str(), cell.lambda, to_string(cell.kind),
                mean, sd, shift, agg);
    nlohmann::ordered_json row;
    row["cell"] = cell.name;
    row["lambda"] = cell.lambda;
    row["aggregation"] = to_string(cell.kind);
    row["mean_final_accuracy"] = mean;
    row["std_final_accuracy"] = sd;
    row["mean_dist_shift_loss"] = shift;
    row["mean_aggregation_loss"] = agg;
    row["final_accuracy"] = nlohmann::ordered_json::array();
    for (const auto& r : cell.runs) row["final_accuracy"].push_back(r.final_accuracy);
    table.push_back(row);
  }
  if (!c.output_dir.empty()) write_json(fs::path(c.output_dir) / "ablation.json", table);
  return 0;
}

int cmd_inspect(const std::string& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::io, "cannot open " + path);
  const auto rows = read_metrics_jsonl(path);
  if (rows.empty()) throw Error(ErrorKind::schema, path + " holds no rounds");

  std::printf("%6s %9s %9s %10s %10s %10s %10s\n", "round", "test_acc", "test_loss", "local", "shift", "aggregate",
              "mean_cos");
  double best = 0.0;
  for (const auto& m : rows) {
    best = std::max(best, m.test_accuracy);
    if (m.decomposition)
      std::printf("%6zu %9.4f %9.4f %10.5f %10.5f %10.5f %10.4f\n", m.round, m.test_accuracy, m.test_loss,
                  m.decomposition->local, m.decomposition->shift(), m.decomposition->aggregation(),
                  m.conflict.mean_cosine);
    else
      std::printf("%6zu %9.4f %9.4f %10s %10s %10s %10.4f\n", m.round, m.test_accuracy, m.test_loss, "-", "-", "-",
                  m.conflict.mean_cosine);
  }
  std::printf("rounds            %zu\n", rows.size());
  std::printf("final accuracy    %.4f\n", rows.back().test_accuracy);
  std::printf("best accuracy     %.4f\n", best);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with loss decomposition diagnostics"};
  app.require_subcommand(1);

  Overrides part_opts, run_opts, ablate_opts;
  auto* partition = app.add_subcommand("partition", "Materialize client shards and the test split as CSV");
  add_common(partition, part_opts);
  auto* run_cmd = app.add_subcommand("run", "Execute a configuration");
  add_common(run_cmd, run_opts);
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the margin x aggregation grid and print a comparison");
  add_common(ablate_cmd, ablate_opts);
  std::size_t seeds = 3;
  ablate_cmd->add_option("--seeds", seeds, "Number of seeds per cell, starting at the configured seed");
  auto* inspect = app.add_subcommand("inspect", "Summarize a metrics.jsonl file");
  std::string metrics_path;
  inspect->add_option("metrics", metrics_path, "Path to metrics.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code_for(ErrorKind::config);
  }

  try {
    if (*partition) return cmd_partition(part_opts);
    if (*run_cmd) return cmd_run(run_opts);
    if (*ablate_cmd) return cmd_ablate(ablate_opts, seeds);
    return cmd_inspect(metrics_path);
  } catch (const Error& e) {
    std::fprintf(stderr, "fedld: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "fedld: %s\n", e.what());
    return exit_code_for(ErrorKind::parse);
  }
}
