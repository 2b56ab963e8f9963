#pragma once

// Coordinator round loop: broadcast, client updates, sample-weighted
// averaging, distributed testing through confusion counts, and selection of
// the round with the best global (micro) F1.
//
// The coordinator never holds a RunnerState. It talks to RunnerEndpoint
// objects whose replies are TrainReply / TestReply, and neither type can
// carry window data (checked at compile time below).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "fednilm/checkpoint.hpp"
#include "fednilm/concurrency.hpp"
#include "fednilm/metrics.hpp"
#include "fednilm/model.hpp"
#include "fednilm/training.hpp"

namespace fednilm {

struct ClientWeights {
  ParameterVector weights;
  std::size_t samples = 0; // n_k
};

/// sum_k (n_k / n) w_k, accumulated in client order as w_1 + sum_k (n_k/n)(w_k - w_1)
/// and clamped to the clients' componentwise range, so identical inputs come
/// back bit-exact and the result never leaves the convex hull.
inline ParameterVector fed_avg(std::span<const ClientWeights> clients) {
  if (clients.empty()) {
    throw InputError("fed_avg: no client weights");
  }
  const ParameterLayout& layout = clients.front().weights.layout;
  std::uint64_t n = 0;
  for (const auto& c : clients) {
    if (c.weights.layout != layout || c.weights.size() != layout.total) {
      throw ShapeError("fed_avg: client layouts differ");
    }
    if (c.samples == 0) {
      throw InputError("fed_avg: client with zero samples");
    }
    n += c.samples;
  }
  const auto& ref = clients.front().weights.values;
  ParameterVector out(layout, ref);
  auto& acc = out.values;
  std::vector<double> delta(layout.total, 0.0);
  for (std::size_t k = 1; k < clients.size(); ++k) {
    const double alpha = static_cast<double>(clients[k].samples) / static_cast<double>(n);
    const auto& w = clients[k].weights.values;
    for (std::size_t i = 0; i < acc.size(); ++i) {
      delta[i] += alpha * (w[i] - ref[i]);
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    double lo = ref[i];
    double hi = ref[i];
    for (std::size_t k = 1; k < clients.size(); ++k) {
      lo = std::min(lo, clients[k].weights.values[i]);
      hi = std::max(hi, clients[k].weights.values[i]);
    }
    acc[i] = std::clamp(ref[i] + delta[i], lo, hi);
  }
  return out;
}

struct ClientGradient {
  GradientVector grad; // mean per-sample gradient of the client's local loss
  std::size_t samples = 0;
};

/// Gradient-aggregation form of the server update:
/// w - server_lr * sum_k (n_k / n) g_k.
inline ParameterVector fed_sgd_step(const ParameterVector& w, std::span<const ClientGradient> clients,
                                    double server_lr) {
  if (clients.empty()) {
    throw InputError("fed_sgd_step: no client gradients");
  }
  std::uint64_t n = 0;
  for (const auto& c : clients) {
    if (c.grad.values.size() != w.size()) {
      throw ShapeError("fed_sgd_step: gradient size differs from weights");
    }
    if (c.samples == 0) {
      throw InputError("fed_sgd_step: client with zero samples");
    }
    n += c.samples;
  }
  std::vector<double> g(w.size(), 0.0);
  for (const auto& c : clients) {
    const double alpha = static_cast<double>(c.samples) / static_cast<double>(n);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += alpha * c.grad.values[i];
    }
  }
  ParameterVector out = w;
  for (std::size_t i = 0; i < g.size(); ++i) {
    out.values[i] -= server_lr * g[i];
  }
  return out;
}

inline double global_f1(std::span<const ConfusionCounts> per_runner) { return f1(merge(per_runner)); }

// ---------------------------------------------------------------------------
// Runner boundary

struct TrainReply {
  std::size_t runner_id = 0;
  ParameterVector weights;
  double mean_loss = 0.0;
  std::size_t sample_count = 0;
};

struct TestReply {
  std::size_t runner_id = 0;
  ConfusionCounts counts;
};

template <typename T>
struct carries_window_data
    : std::bool_constant<std::is_same_v<T, WindowSample> || std::is_same_v<T, WindowDataset> ||
                         std::is_same_v<T, RunnerState>> {};

static_assert(!carries_window_data<TrainReply>::value && !carries_window_data<TestReply>::value);

/// Hooks on everything that crosses the runner/coordinator boundary.
class BoundaryObserver {
public:
  virtual ~BoundaryObserver() = default;
  virtual void on_broadcast(std::size_t /*round*/, const ParameterVector&) {}
  virtual void on_train_reply(std::size_t /*round*/, const TrainReply&) {}
  virtual void on_test_reply(std::size_t /*round*/, const TestReply&) {}
};

/// Owns one runner's private state; exposes only train and test.
class RunnerEndpoint {
public:
  RunnerEndpoint(const Network& net, RunnerState& state, const FLConfig& cfg) : net_(&net), state_(&state), cfg_(&cfg) {}

  std::size_t runner_id() const noexcept { return state_->runner_id; }

  TrainReply train(const ParameterVector& w, std::size_t round) {
    auto update = client_update(*net_, *state_, w, *cfg_, round);
    counters_.epochs += update.counters.epochs;
    counters_.optimizer_steps += update.counters.optimizer_steps;
    counters_.sample_gradients += update.counters.sample_gradients;
    return {state_->runner_id, std::move(update.weights), update.mean_loss, state_->sample_count};
  }

  /// Runner-local diagnostics; never sent to the coordinator.
  const TrainingCounters& counters() const noexcept { return counters_; }

  TestReply test(const ParameterVector& w) const {
    return {state_->runner_id, local_testing(*net_, *state_, w, *cfg_)};
  }

private:
  const Network* net_;
  RunnerState* state_;
  const FLConfig* cfg_;
  TrainingCounters counters_;
};

// ---------------------------------------------------------------------------
// Coordinator state

/// Global weights of one round, in memory or spilled to a checkpoint file.
class ParamSnapshot {
public:
  ParamSnapshot() = default;
  explicit ParamSnapshot(ParameterVector p) : memory_(std::move(p)) {}
  ParamSnapshot(const ParameterVector& p, std::filesystem::path file) : file_(std::move(file)), layout_(p.layout) {
    save_checkpoint(p, file_);
  }

  bool spilled() const noexcept { return !memory_.has_value(); }
  const std::filesystem::path& file() const noexcept { return file_; }

  ParameterVector load() const { return memory_ ? *memory_ : load_checkpoint(file_, layout_); }

private:
  std::optional<ParameterVector> memory_;
  std::filesystem::path file_;
  ParameterLayout layout_;
};

struct RoundRecord {
  std::size_t round = 0; // 1-based
  ParamSnapshot global_params; // the averaged model that produced per_runner_counts
  std::vector<ConfusionCounts> per_runner_counts;
  std::vector<std::size_t> runner_ids;
  double global_f1 = 0.0;
  double mean_train_loss = 0.0; // sample-weighted over runners, final local epoch
};

struct CoordinatorState {
  FLConfig config;
  ParameterVector current;
  std::vector<RoundRecord> history;
};

struct OptimalModel {
  std::size_t t_star = 0;
  ParameterVector w_star;
  double global_f1 = 0.0;
};

/// Earliest round with the maximum global F1.
inline OptimalModel select_optimal(std::span<const RoundRecord> history) {
  if (history.empty()) {
    throw InputError("select_optimal: empty history");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].global_f1 > history[best].global_f1) {
      best = i;
    }
  }
  return {history[best].round, history[best].global_params.load(), history[best].global_f1};
}

struct FederationResult {
  CoordinatorState state;
  OptimalModel optimal;
  TrainingCounters counters; // summed over runners and rounds
};

/// T rounds of broadcast -> client updates -> fed_avg -> local testing of the
/// averaged model -> record; then select_optimal. Runner states are updated in
/// place (optimizer moments persist across rounds).
inline FederationResult run_federation(std::span<RunnerState> runners, const FLConfig& cfg, const NetworkSpec& spec,
                                       BoundaryObserver* observer = nullptr,
                                       std::optional<ParameterVector> initial = std::nullopt) {
  cfg.validate();
  if (runners.empty()) {
    throw InputError("run_federation: no runners");
  }
  const Network net(spec);
  if (spec.input_window != cfg.window) {
    throw ConfigError("network input window " + std::to_string(spec.input_window) + " != config window " +
                      std::to_string(cfg.window));
  }
  std::vector<RunnerEndpoint> endpoints;
  endpoints.reserve(runners.size());
  for (auto& r : runners) {
    endpoints.emplace_back(net, r, cfg);
  }

  FederationResult result;
  auto& state = result.state;
  state.config = cfg;
  state.current = initial ? std::move(*initial) : init_params(spec, init_seed(cfg.seed));
  net.check_params(state.current);

  const bool spill = cfg.snapshot_budget_bytes != 0 &&
                     cfg.rounds * state.current.size() * sizeof(double) > cfg.snapshot_budget_bytes;
  if (spill) {
    std::filesystem::create_directories(cfg.spill_dir);
  }

  const std::size_t k = endpoints.size();
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    if (observer) {
      observer->on_broadcast(t, state.current);
    }
    std::vector<TrainReply> replies(k);
    parallel_for(k, cfg.threads, [&](std::size_t i) { replies[i] = endpoints[i].train(state.current, t); });

    std::vector<ClientWeights> clients;
    clients.reserve(k);
    double loss_weighted = 0.0;
    std::uint64_t n = 0;
    for (auto& reply : replies) {
      if (observer) {
        observer->on_train_reply(t, reply);
      }
      loss_weighted += reply.mean_loss * static_cast<double>(reply.sample_count);
      n += reply.sample_count;
      clients.push_back({std::move(reply.weights), reply.sample_count});
    }
    state.current = fed_avg(clients);

    if (observer) {
      observer->on_broadcast(t, state.current);
    }
    std::vector<TestReply> tests(k);
    parallel_for(k, cfg.threads, [&](std::size_t i) { tests[i] = endpoints[i].test(state.current); });

    RoundRecord rec;
    rec.round = t;
    for (const auto& tr : tests) {
      if (observer) {
        observer->on_test_reply(t, tr);
      }
      rec.per_runner_counts.push_back(tr.counts);
      rec.runner_ids.push_back(tr.runner_id);
    }
    rec.global_f1 = global_f1(rec.per_runner_counts);
    rec.mean_train_loss = loss_weighted / static_cast<double>(n);
    rec.global_params = spill ? ParamSnapshot(state.current, std::filesystem::path(cfg.spill_dir) /
                                                                  ("round_" + std::to_string(t) + ".fnlm"))
                              : ParamSnapshot(state.current);
    state.history.push_back(std::move(rec));
  }
  result.optimal = select_optimal(state.history);
  for (const auto& e : endpoints) {
    result.counters.epochs += e.counters().epochs;
    result.counters.optimizer_steps += e.counters().optimizer_steps;
    result.counters.sample_gradients += e.counters().sample_gradients;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Logs

/// {round, global_f1, mean_train_loss, per_runner: [{runner_id, tp, fp, fn}]}
inline nlohmann::json round_log_entry(const RoundRecord& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < r.per_runner_counts.size(); ++i) {
    const auto& c = r.per_runner_counts[i];
    per.push_back({{"runner_id", r.runner_ids.at(i)}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}});
  }
  return {{"round", r.round}, {"global_f1", r.global_f1}, {"mean_train_loss", r.mean_train_loss}, {"per_runner", per}};
}

} // namespace fednilm
