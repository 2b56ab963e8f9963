#pragma once

// Runner-side training and testing: the client update loop and local testing.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fednilm/data.hpp"
#include "fednilm/error.hpp"
#include "fednilm/metrics.hpp"
#include "fednilm/model.hpp"
#include "fednilm/optimizer.hpp"
#include "fednilm/rng.hpp"

namespace fednilm {

struct FLConfig {
  std::size_t runners = 4;          // K
  std::size_t rounds = 15;          // T
  std::size_t local_epochs = 10;    // E
  std::size_t batch_size = 512;     // B
  double lr = 5e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t window = 599;         // W
  std::uint64_t seed = 0;
  double cutoff = 0.5;
  double server_lr = 1.0;           // kept for the gradient-aggregation form; weight averaging ignores it
  bool reset_optimizer_per_round = false;
  std::size_t baseline_epochs = 0;  // 0: rounds * local_epochs
  std::size_t threads = 1;          // client updates / tests run concurrently up to this many
  std::uint64_t snapshot_budget_bytes = 0; // 0: keep every round in memory
  std::string spill_dir;

  std::size_t effective_baseline_epochs() const noexcept {
    return baseline_epochs != 0 ? baseline_epochs : rounds * local_epochs;
  }

  void validate() const {
    if (runners < 1 || rounds < 1 || local_epochs < 1 || batch_size < 1) {
      throw ConfigError("runners, rounds, local_epochs and batch_size must all be >= 1");
    }
    // Zero is allowed here so the no-op learning rate can be exercised;
    // experiment configs require lr > 0.
    if (!(lr >= 0.0)) {
      throw ConfigError("lr must be >= 0");
    }
    if (window == 0 || window % 2 == 0) {
      throw ConfigError("window must be odd and positive");
    }
    if (snapshot_budget_bytes != 0 && spill_dir.empty()) {
      throw ConfigError("snapshot_budget_bytes requires spill_dir");
    }
  }
};

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") {
    return OptimizerKind::adam;
  }
  if (s == "sgd") {
    return OptimizerKind::sgd;
  }
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct RunnerState {
  std::size_t runner_id = 0;
  WindowDataset train_data;
  WindowDataset test_data;
  std::size_t sample_count = 0; // n_k
  AdamState optimizer_state;
  std::uint64_t seed = 0;       // per-runner stream for batch shuffles
};

inline std::uint64_t runner_seed(std::uint64_t experiment_seed, std::size_t runner_id) {
  return derive_seed(experiment_seed, {kTagRunner, runner_id});
}

inline std::uint64_t init_seed(std::uint64_t experiment_seed) { return derive_seed(experiment_seed, {kTagInit}); }

inline RunnerState make_runner(std::size_t id, WindowDataset train, WindowDataset test, std::uint64_t experiment_seed) {
  RunnerState r;
  r.runner_id = id;
  r.sample_count = train.size();
  r.train_data = std::move(train);
  r.test_data = std::move(test);
  r.seed = runner_seed(experiment_seed, id);
  return r;
}

struct TrainingCounters {
  std::uint64_t epochs = 0;
  std::uint64_t optimizer_steps = 0;
  std::uint64_t sample_gradients = 0; // one per sample per epoch
};

/// Copies dataset windows at `order[begin, end)` into rows of `batch`.
inline void gather(const WindowDataset& data, std::span<const std::size_t> order, Matrix& batch,
                   std::vector<double>& targets) {
  const auto w = static_cast<Eigen::Index>(data.window_length());
  batch.resize(static_cast<Eigen::Index>(order.size()), w);
  targets.resize(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto win = data.window(order[i]);
    std::copy(win.begin(), win.end(), batch.row(static_cast<Eigen::Index>(i)).data());
    targets[i] = data.sample(order[i]).target;
  }
}

/// One pass over the runner's training data, shuffled with the stream for
/// (runner seed, round, epoch). Each batch (the last may be partial) takes one
/// optimizer step on the batch-mean loss. Returns the summed per-sample loss.
inline double train_epoch(const Network& net, RunnerState& runner, std::vector<double>& params, const FLConfig& cfg,
                          std::size_t round, std::size_t epoch, TrainingCounters* counters = nullptr) {
  const auto& data = runner.train_data;
  const auto order = shuffled_indices(data.size(), derive_seed(runner.seed, {kTagShuffle, round, epoch}));
  std::vector<double> grad(params.size());
  std::vector<double> targets;
  Matrix batch;
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
    gather(data, std::span(order).subspan(begin, end - begin), batch, targets);
    std::fill(grad.begin(), grad.end(), 0.0);
    loss_sum += net.backward_into(params.data(), batch, targets, grad.data());
    const double scale = 1.0 / static_cast<double>(end - begin);
    for (double& g : grad) {
      g *= scale;
    }
    if (cfg.optimizer == OptimizerKind::adam) {
      adam_update(params, grad, runner.optimizer_state, cfg.lr);
    } else {
      sgd_update(params, grad, cfg.lr);
    }
    if (counters != nullptr) {
      ++counters->optimizer_steps;
      counters->sample_gradients += end - begin;
    }
  }
  if (counters != nullptr) {
    ++counters->epochs;
  }
  return loss_sum;
}

struct ClientUpdate {
  ParameterVector weights;
  double mean_loss = 0.0; // mean per-sample loss over the final epoch
  TrainingCounters counters;
};

/// E local epochs starting from `w`. Adam moments persist in the runner
/// across calls unless cfg.reset_optimizer_per_round.
inline ClientUpdate client_update(const Network& net, RunnerState& runner, const ParameterVector& w,
                                  const FLConfig& cfg, std::size_t round) {
  net.check_params(w);
  if (runner.train_data.empty()) {
    throw DataError("runner " + std::to_string(runner.runner_id) + " has no training data");
  }
  if (runner.optimizer_state.m.size() != w.size()) {
    runner.optimizer_state = AdamState(w.size());
  } else if (cfg.reset_optimizer_per_round) {
    runner.optimizer_state.reset();
  }
  ClientUpdate out{w, 0.0, {}};
  double last = 0.0;
  for (std::size_t e = 1; e <= cfg.local_epochs; ++e) {
    last = train_epoch(net, runner, out.weights.values, cfg, round, e, &out.counters);
  }
  out.mean_loss = last / static_cast<double>(runner.train_data.size());
  return out;
}

inline constexpr std::size_t kEvalChunk = 512;

inline std::vector<double> predict(const Network& net, const ParameterVector& w, const WindowDataset& data) {
  net.check_params(w);
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  std::vector<double> targets;
  Matrix batch;
  for (std::size_t begin = 0; begin < data.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(data.size(), begin + kEvalChunk);
    idx.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      idx[i - begin] = i;
    }
    gather(data, idx, batch, targets);
    const auto p = net.forward(w, batch);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Forward every window, threshold at `cutoff`, tally against the labels.
inline ConfusionCounts evaluate(const Network& net, const ParameterVector& w, const WindowDataset& data,
                                double cutoff) {
  if (data.empty()) {
    throw DataError("evaluation set is empty");
  }
  const auto predicted = classify(predict(net, w, data), cutoff);
  std::vector<int> actual;
  actual.reserve(data.size());
  for (const auto& s : data.samples()) {
    actual.push_back(s.target >= 0.5 ? 1 : 0);
  }
  return count(predicted, actual);
}

inline ConfusionCounts local_testing(const Network& net, const RunnerState& runner, const ParameterVector& w,
                                     const FLConfig& cfg) {
  if (runner.test_data.empty()) {
    throw DataError("runner " + std::to_string(runner.runner_id) + " has no test data");
  }
  return evaluate(net, w, runner.test_data, cfg.cutoff);
}

} // namespace fednilm
