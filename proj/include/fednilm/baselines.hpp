#pragma once

// Comparison arms: a centrally-trained model on pooled data and the mean F1
// of models trained on each runner's partition alone, plus the comparison
// table built from the three arms.

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fednilm/concurrency.hpp"
#include "fednilm/data.hpp"
#include "fednilm/metrics.hpp"
#include "fednilm/model.hpp"
#include "fednilm/training.hpp"

namespace fednilm {

struct StandaloneRun {
  ParameterVector params;
  TrainingCounters counters;
  std::vector<double> epoch_mean_loss;
};

/// Trains one runner alone for `epochs` passes. Epoch g (0-based) uses the
/// shuffle stream of (round g/E + 1, epoch g%E + 1), the same streams a
/// one-runner federation would draw, and optimizer moments are never reset.
inline StandaloneRun train_standalone(const Network& net, RunnerState& runner, ParameterVector w, const FLConfig& cfg,
                                      std::size_t epochs) {
  net.check_params(w);
  if (runner.train_data.empty()) {
    throw DataError("no training data");
  }
  runner.optimizer_state = AdamState(w.size());
  StandaloneRun run{std::move(w), {}, {}};
  for (std::size_t g = 0; g < epochs; ++g) {
    const std::size_t round = g / cfg.local_epochs + 1;
    const std::size_t epoch = g % cfg.local_epochs + 1;
    const double sum = train_epoch(net, runner, run.params.values, cfg, round, epoch, &run.counters);
    run.epoch_mean_loss.push_back(sum / static_cast<double>(runner.train_data.size()));
  }
  return run;
}

struct ArmResult {
  ParameterVector params;
  ConfusionCounts counts;
  double f1 = 0.0;
  TrainingCounters counters;
  std::vector<double> epoch_mean_loss;
};

/// `pooled` is the union of the runners' training windows, normalized with
/// pooled statistics; `test` is the shared test set under the same stats.
inline ArmResult train_central(const WindowDataset& pooled, const WindowDataset& test, const NetworkSpec& spec,
                               const FLConfig& cfg) {
  if (pooled.empty()) {
    throw DataError("central baseline: empty training data");
  }
  const Network net(spec);
  RunnerState site = make_runner(0, pooled, test, cfg.seed);
  auto run = train_standalone(net, site, init_params(spec, init_seed(cfg.seed)), cfg, cfg.effective_baseline_epochs());
  ArmResult out;
  out.counts = evaluate(net, run.params, test, cfg.cutoff);
  out.f1 = f1(out.counts);
  out.params = std::move(run.params);
  out.counters = run.counters;
  out.epoch_mean_loss = std::move(run.epoch_mean_loss);
  return out;
}

struct LocalsResult {
  std::vector<ArmResult> models;
  double mean_f1 = 0.0; // unweighted over runners
  TrainingCounters counters;
};

/// Every runner trains alone from the shared initialization. Each model is
/// scored on the shared test set (`raw_test`, unnormalized) expressed in that
/// runner's own training statistics.
inline LocalsResult train_locals(std::span<const RunnerState> runners, const WindowDataset& raw_test,
                                 const NetworkSpec& spec, const FLConfig& cfg) {
  if (runners.empty()) {
    throw InputError("local baseline: no runners");
  }
  const Network net(spec);
  const ParameterVector w0 = init_params(spec, init_seed(cfg.seed));
  LocalsResult out;
  out.models.resize(runners.size());
  parallel_for(runners.size(), cfg.threads, [&](std::size_t k) {
    RunnerState r = runners[k];
    auto run = train_standalone(net, r, w0, cfg, cfg.effective_baseline_epochs());
    const auto test = raw_test.renormalized(r.train_data.stats());
    ArmResult& m = out.models[k];
    m.counts = evaluate(net, run.params, test, cfg.cutoff);
    m.f1 = f1(m.counts);
    m.params = std::move(run.params);
    m.counters = run.counters;
    m.epoch_mean_loss = std::move(run.epoch_mean_loss);
  });
  double sum = 0.0;
  for (const auto& m : out.models) {
    sum += m.f1;
    out.counters.epochs += m.counters.epochs;
    out.counters.optimizer_steps += m.counters.optimizer_steps;
    out.counters.sample_gradients += m.counters.sample_gradients;
  }
  out.mean_f1 = sum / static_cast<double>(out.models.size());
  return out;
}

// ---------------------------------------------------------------------------
// Comparison table

struct ComparisonInput {
  std::string appliance;
  std::size_t runners = 0;
  std::optional<double> local_avg_f1;
  std::optional<double> central_f1;
  std::optional<double> fedavg_f1;
  std::size_t scale = 0; // pooled training windows
};

struct ComparisonRow {
  std::string appliance;
  std::size_t runners = 0;
  double local_avg_f1 = 0.0;
  double central_f1 = 0.0;
  double fedavg_f1 = 0.0;
  double fedavg_over_local_pct = 0.0;
  double fedavg_over_central_pct = 0.0;
  std::size_t scale = 0;
};

inline std::vector<ComparisonRow> build_report(std::span<const ComparisonInput> inputs) {
  std::vector<ComparisonRow> rows;
  for (const auto& in : inputs) {
    if (!in.local_avg_f1 || !in.central_f1 || !in.fedavg_f1) {
      std::string missing;
      if (!in.local_avg_f1) {
        missing += " local";
      }
      if (!in.central_f1) {
        missing += " central";
      }
      if (!in.fedavg_f1) {
        missing += " federated";
      }
      throw DataError("report: " + in.appliance + " K=" + std::to_string(in.runners) + " missing arm(s):" + missing);
    }
    rows.push_back({in.appliance, in.runners, *in.local_avg_f1, *in.central_f1, *in.fedavg_f1,
                    improvement_pct(*in.fedavg_f1, *in.local_avg_f1), improvement_pct(*in.fedavg_f1, *in.central_f1),
                    in.scale});
  }
  return rows;
}

inline constexpr const char* kReportHeader =
    "appliance,runners,local_avg_f1,central_f1,fedavg_f1,fedavg_over_local_pct,fedavg_over_central_pct,scale";

inline void write_report_csv(std::span<const ComparisonRow> rows, std::ostream& out) {
  out << kReportHeader << '\n';
  for (const auto& r : rows) {
    out << r.appliance << ',' << r.runners << ',' << detail::format_double(r.local_avg_f1) << ','
        << detail::format_double(r.central_f1) << ',' << detail::format_double(r.fedavg_f1) << ','
        << detail::format_double(r.fedavg_over_local_pct) << ',' << detail::format_double(r.fedavg_over_central_pct)
        << ',' << r.scale << '\n';
  }
}

} // namespace fednilm
