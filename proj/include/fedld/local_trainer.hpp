#pragma once

// Client-side local training. A client runs mini-batch SGD on its shard and
// reports the accumulated parameter delta (global - local) as its gradient.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedld/data.hpp"
#include "fedld/error.hpp"
#include "fedld/linalg.hpp"
#include "fedld/model.hpp"
#include "fedld/rng.hpp"

namespace fedld {

struct LocalConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 50;
  std::size_t local_epochs = 1;
  double lambda = 0.0;   // margin-control weight
  double prox_mu = 0.0;  // FedProx proximal weight
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw Error(ErrorKind::config, "learning rate must be finite and non-negative");
    if (batch_size < 1) throw Error(ErrorKind::config, "batch size must be at least 1");
    if (local_epochs < 1) throw Error(ErrorKind::config, "local epochs must be at least 1");
    if (!(lambda >= 0.0)) throw Error(ErrorKind::config, "lambda must be non-negative");
    if (!(prox_mu >= 0.0)) throw Error(ErrorKind::config, "prox_mu must be non-negative");
  }
};

struct FlatGradient {
  Vector delta;
  std::size_t client_id = 0;
  std::size_t samples = 0;
};

struct LocalResult {
  FlatGradient gradient;
  LossReport report;  // running mean over the final epoch's batches
  ModelParams local;  // parameters at the end of local training
};

/// Trains a copy of `global` on `shard`. The batch order for each epoch is a
/// permutation seeded by (cfg.seed, round, client_id); a shard that fits in a
/// single batch is visited in storage order.
inline LocalResult train_local(const ModelParams& global, const ClientDataset& shard, const LocalConfig& cfg,
                               std::uint64_t round = 0) {
  cfg.validate();
  const std::size_t n = shard.size();
  if (n == 0) throw Error(ErrorKind::empty_input, "client " + std::to_string(shard.client_id) + " has no samples");

  std::mt19937_64 rng(mix_seed(cfg.seed, round, shard.client_id));
  ModelParams local = global;
  Vector grad(global.arch.param_count());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  LossReport final_epoch;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    if (cfg.batch_size < n) std::shuffle(order.begin(), order.end(), rng);
    LossReport acc;
    double ce_sum = 0.0, margin_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const BatchView batch{&shard.features, shard.labels,
                            std::span<const std::size_t>(order).subspan(start, stop - start)};
      const auto rep = loss_and_grad(local, batch, cfg.lambda, grad);
      if (!std::isfinite(rep.total) || !all_finite(grad))
        throw Error(ErrorKind::divergence, "client " + std::to_string(shard.client_id) + " diverged in epoch " +
                                               std::to_string(epoch) + " (loss " + std::to_string(rep.total) + ")");
      if (cfg.prox_mu > 0.0)
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += cfg.prox_mu * (local.flat[k] - global.flat[k]);
      axpy(-cfg.learning_rate, grad, local.flat);
      if (!all_finite(local.flat))
        throw Error(ErrorKind::divergence, "client " + std::to_string(shard.client_id) +
                                               " produced non-finite parameters in epoch " + std::to_string(epoch));
      const auto b = static_cast<double>(rep.samples);
      ce_sum += rep.ce * b;
      margin_sum += rep.margin_penalty * b;
      acc.correct += rep.correct;
      acc.samples += rep.samples;
    }
    acc.ce = ce_sum / static_cast<double>(acc.samples);
    acc.margin_penalty = margin_sum / static_cast<double>(acc.samples);
    acc.total = acc.ce + cfg.lambda * acc.margin_penalty;
    acc.accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.samples);
    final_epoch = acc;
  }

  FlatGradient g;
  g.client_id = shard.client_id;
  g.samples = n;
  g.delta.resize(global.flat.size());
  for (std::size_t k = 0; k < g.delta.size(); ++k) g.delta[k] = global.flat[k] - local.flat[k];
  return {std::move(g), final_epoch, std::move(local)};
}

/// w - server_lr * g_bar
inline ModelParams apply_global_update(const ModelParams& global, const FlatGradient& g_bar, double server_lr) {
  if (g_bar.delta.size() != global.flat.size())
    throw Error(ErrorKind::shape, "global update of length " + std::to_string(g_bar.delta.size()) +
                                      " for a model with " + std::to_string(global.flat.size()) + " parameters");
  ModelParams next = global;
  axpy(-server_lr, g_bar.delta, next.flat);
  return next;
}

/// Parameters a client ended its local training with: w_global - g_i.
inline ModelParams local_params(const ModelParams& global, const FlatGradient& g) {
  return apply_global_update(global, g, 1.0);
}

}  // namespace fedld
