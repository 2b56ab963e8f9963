#include <gtest/gtest.h>

#include <filesystem>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fednilm;
using fixture::AuditObserver;

namespace {

ParameterVector vec(std::vector<double> v) {
  const ParameterLayout layout{0, {}, v.size()};
  return ParameterVector(layout, std::move(v));
}

std::uint64_t test_size(const std::vector<RunnerState>& runners) {
  std::uint64_t n = 0;
  for (const auto& r : runners) {
    n += r.test_data.size();
  }
  return n;
}

/// Full-batch summed-loss gradient from a single backward call.
GradientVector full_gradient(const Network& net, const ParameterVector& w, const WindowDataset& d) {
  std::vector<std::size_t> all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i] = i;
  }
  Matrix batch;
  std::vector<double> targets;
  gather(d, all, batch, targets);
  return net.backward(w, batch, targets).grad;
}

} // namespace

// ---------------------------------------------------------------- fed_avg

TEST(FedAvg, Examples) {
  const std::vector<ClientWeights> one{{vec({1.5, -2.0}), 7}};
  EXPECT_EQ(fed_avg(one).values, one[0].weights.values);
  const std::vector<ClientWeights> same{{vec({0.1, 0.2, 0.3}), 3}, {vec({0.1, 0.2, 0.3}), 11}, {vec({0.1, 0.2, 0.3}), 1}};
  EXPECT_EQ(fed_avg(same).values, same[0].weights.values);
  const std::vector<ClientWeights> two{{vec({1, 2}), 1}, {vec({3, 4}), 3}};
  EXPECT_EQ(fed_avg(two).values, (std::vector<double>{2.5, 3.5}));
}

TEST(FedAvg, Errors) {
  EXPECT_THROW(fed_avg(std::vector<ClientWeights>{}), InputError);
  const std::vector<ClientWeights> mismatch{{vec({1, 2}), 1}, {vec({1, 2, 3}), 1}};
  EXPECT_THROW(fed_avg(mismatch), ShapeError);
  const std::vector<ClientWeights> zero{{vec({1}), 0}};
  EXPECT_THROW(fed_avg(zero), InputError);
}

TEST(FedAvg, RandomEnsemblesMatchWeightedMean) {
  SplitMix64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 1 + rng.below(8);
    const std::size_t n = 1 + rng.below(40);
    std::vector<ClientWeights> clients;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> w(n);
      for (double& x : w) {
        x = rng.normal() * 3.0;
      }
      clients.push_back({vec(w), 1 + rng.below(5000)});
    }
    const auto got = fed_avg(clients);
    const auto want = oracle::weighted_mean(clients);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(got.values[i], want[i], 1e-12);
    }
  }
}

TEST(FedSgd, GradientAggregationForm) {
  const auto w = vec({1.0, 2.0});
  const std::vector<ClientGradient> g{{{{1.0, 0.0}}, 1}, {{{0.0, 4.0}}, 3}};
  EXPECT_EQ(fed_sgd_step(w, g, 0.5).values, (std::vector<double>{1.0 - 0.5 * 0.25, 2.0 - 0.5 * 3.0}));
}

// ---------------------------------------------------------------- global F1 / selection

TEST(GlobalF1, Examples) {
  const ConfusionCounts a{3, 1, 0, 0};
  const ConfusionCounts b{1, 0, 2, 0};
  EXPECT_EQ(global_f1(std::vector{a}), f1(a));
  EXPECT_DOUBLE_EQ(global_f1(std::vector{a, b}), 8.0 / 11.0);
  EXPECT_EQ(global_f1(std::vector(5, b)), f1(b));
  EXPECT_THROW(global_f1(std::vector<ConfusionCounts>{}), InputError);
}

namespace {
std::vector<RoundRecord> history_of(const std::vector<double>& f1s) {
  std::vector<RoundRecord> h;
  for (std::size_t i = 0; i < f1s.size(); ++i) {
    RoundRecord r;
    r.round = i + 1;
    r.global_f1 = f1s[i];
    r.global_params = ParamSnapshot(vec({static_cast<double>(i + 1)}));
    h.push_back(std::move(r));
  }
  return h;
}
} // namespace

TEST(SelectOptimal, Examples) {
  EXPECT_EQ(select_optimal(history_of({0.1, 0.2, 0.3, 0.4})).t_star, 4u);
  EXPECT_EQ(select_optimal(history_of({0.4})).t_star, 1u);
  const auto best = select_optimal(history_of({0.5, 0.9, 0.9, 0.7}));
  EXPECT_EQ(best.t_star, 2u);
  EXPECT_EQ(best.w_star.values[0], 2.0);
  EXPECT_EQ(best.global_f1, 0.9);
  EXPECT_THROW(select_optimal(std::vector<RoundRecord>{}), InputError);
}

// ---------------------------------------------------------------- client update / local testing

TEST(ClientUpdate, ZeroLearningRateIsNoOp) {
  auto s = fixture::toy_scenario(1, 64, 1);
  auto cfg = fixture::toy_config(1, 1);
  cfg.lr = 0.0;
  const Network net(fixture::toy_spec());
  const auto w = init_params(fixture::toy_spec(), 5);
  const auto copy = w;
  const auto up = client_update(net, s.runners[0], w, cfg, 1);
  EXPECT_EQ(up.weights.values, w.values);
  EXPECT_EQ(w.values, copy.values); // input untouched
}

TEST(ClientUpdate, FullBatchSgdEqualsOneGradientStep) {
  auto s = fixture::toy_scenario(1, 50, 2);
  auto cfg = fixture::toy_config(1, 2);
  cfg.local_epochs = 1;
  cfg.batch_size = 1000;
  cfg.optimizer = OptimizerKind::sgd;
  const Network net(fixture::toy_spec());
  const auto w = init_params(fixture::toy_spec(), 6);
  const auto g = full_gradient(net, w, s.runners[0].train_data);
  const auto up = client_update(net, s.runners[0], w, cfg, 1);
  const double n = static_cast<double>(s.runners[0].train_data.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_NEAR(up.weights.values[i], w.values[i] - cfg.lr * g.values[i] / n, 1e-12);
  }
}

TEST(ClientUpdate, IdenticalRunnersGiveIdenticalWeights) {
  auto s = fixture::toy_scenario(1, 64, 3);
  RunnerState a = s.runners[0];
  RunnerState b = s.runners[0];
  const auto cfg = fixture::toy_config(1, 3);
  const Network net(fixture::toy_spec());
  const auto w = init_params(fixture::toy_spec(), 7);
  EXPECT_EQ(client_update(net, a, w, cfg, 1).weights.values, client_update(net, b, w, cfg, 1).weights.values);
}

TEST(ClientUpdate, PartialFinalBatchAndCounters) {
  auto s = fixture::toy_scenario(1, 50, 4);
  auto cfg = fixture::toy_config(1, 4);
  cfg.batch_size = 16; // 50 = 3 x 16 + 2
  const Network net(fixture::toy_spec());
  const auto up = client_update(net, s.runners[0], init_params(fixture::toy_spec(), 1), cfg, 1);
  EXPECT_EQ(up.counters.optimizer_steps, 4u * cfg.local_epochs);
  EXPECT_EQ(up.counters.sample_gradients, 50u * cfg.local_epochs);
  EXPECT_EQ(s.runners[0].optimizer_state.step_count, 4u * cfg.local_epochs);
}

TEST(ClientUpdate, Errors) {
  auto s = fixture::toy_scenario(1, 32, 4);
  const auto cfg = fixture::toy_config(1, 4);
  const Network net(fixture::toy_spec());
  EXPECT_THROW(client_update(net, s.runners[0], init_params(desk_spec(), 1), cfg, 1), ShapeError);
  RunnerState empty;
  EXPECT_THROW(client_update(net, empty, init_params(fixture::toy_spec(), 1), cfg, 1), DataError);
}

namespace {
// Series whose aggregate equals the on/off indicator, so the midpoint picker
// reproduces every label.
WindowDataset indicator_windows(std::size_t n, std::uint64_t seed) {
  LoadSeries s;
  s.appliances.push_back({"a", {}});
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double on = rng.bernoulli(0.3) ? 1.0 : 0.0;
    s.timestamps.push_back(static_cast<std::int64_t>(i));
    s.aggregate.push_back(on);
    s.appliances[0].watts.push_back(on);
  }
  return make_windows(s, "a", 15, kRawStats, 0.5);
}
} // namespace

TEST(LocalTesting, PerfectAndConstantModels) {
  const NetworkSpec spec{15, {Conv1D{1, 1, Activation::linear}, Dense{1, Activation::linear}}};
  const Network net(spec);
  ParameterVector picker(make_layout(spec));
  picker.values[picker.layout.slots[0].weight_offset] = 1.0;
  picker.values[picker.layout.slots[1].weight_offset + 7] = 1.0;
  RunnerState r;
  r.test_data = indicator_windows(200, 1);
  const FLConfig cfg = fixture::toy_config(1, 0);
  const auto c = local_testing(net, r, picker, cfg);
  EXPECT_EQ(c.fp, 0u);
  EXPECT_EQ(c.fn, 0u);
  EXPECT_GT(c.tp, 0u);

  LoadSeries off;
  off.appliances.push_back({"a", std::vector<double>(40, 0.0)});
  off.aggregate.assign(40, 3.0);
  for (int i = 0; i < 40; ++i) {
    off.timestamps.push_back(i);
  }
  r.test_data = make_windows(off, "a", 15, kRawStats, 0.5);
  const ParameterVector zero(make_layout(spec));
  const auto z = local_testing(net, r, zero, cfg);
  EXPECT_EQ(z, (ConfusionCounts{0, 0, 0, r.test_data.size()}));

  r.test_data = WindowDataset();
  EXPECT_THROW(local_testing(net, r, zero, cfg), DataError);
}

TEST(LocalTesting, MatchesBruteForceTally) {
  const auto spec = fixture::toy_spec();
  const Network net(spec);
  const auto w = init_params(spec, 12);
  RunnerState r;
  r.test_data = indicator_windows(24, 5); // 10 windows
  ASSERT_EQ(r.test_data.size(), 10u);
  std::vector<int> pred, act;
  for (std::size_t i = 0; i < r.test_data.size(); ++i) {
    const auto win = r.test_data.window(i);
    pred.push_back(oracle::forward_one(spec, w.values, {win.begin(), win.end()}) >= 0.5 ? 1 : 0);
    act.push_back(r.test_data.sample(i).target >= 0.5 ? 1 : 0);
  }
  const auto t = oracle::tally(pred, act);
  const auto c = local_testing(net, r, w, fixture::toy_config(1, 0));
  EXPECT_EQ(c.tp, static_cast<std::uint64_t>(t.tp));
  EXPECT_EQ(c.fp, static_cast<std::uint64_t>(t.fp));
  EXPECT_EQ(c.fn, static_cast<std::uint64_t>(t.fn));
  EXPECT_EQ(c.tn, static_cast<std::uint64_t>(t.tn));
}

// ---------------------------------------------------------------- run_federation

TEST(RunFederation, HistoryContract) {
  auto s = fixture::toy_scenario(3, 60, 7);
  const auto cfg = fixture::toy_config(3, 7);
  const auto spec = fixture::toy_spec();
  AuditObserver audit(make_layout(spec).total);
  const auto res = run_federation(s.runners, cfg, spec, &audit);
  fixture::expect_clean_audit(audit, 3, cfg.rounds, test_size(s.runners), make_layout(spec).total);
  const auto& h = res.state.history;
  ASSERT_EQ(h.size(), cfg.rounds);
  const Network net(spec);
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_EQ(h[i].round, i + 1);
    ASSERT_EQ(h[i].per_runner_counts.size(), 3u);
    EXPECT_EQ(h[i].global_f1, f1(merge(h[i].per_runner_counts)));
    // The stored weights are exactly the ones that produced the counts.
    const auto w = h[i].global_params.load();
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(local_testing(net, s.runners[k], w, cfg), h[i].per_runner_counts[k]);
    }
  }
  EXPECT_EQ(res.state.current.values, h.back().global_params.load().values);
  const auto best = select_optimal(h);
  EXPECT_EQ(res.optimal.t_star, best.t_star);
  EXPECT_EQ(res.optimal.w_star.values, best.w_star.values);
}

TEST(RunFederation, SingleRoundZeroLrReturnsInit) {
  auto s = fixture::toy_scenario(2, 40, 8);
  auto cfg = fixture::toy_config(2, 8);
  cfg.rounds = 1;
  cfg.lr = 0.0;
  const auto spec = fixture::toy_spec();
  AuditObserver audit(make_layout(spec).total);
  const auto res = run_federation(s.runners, cfg, spec, &audit);
  EXPECT_EQ(res.state.history[0].global_params.load().values, init_params(spec, init_seed(8)).values);
  fixture::expect_clean_audit(audit, 2, 1, test_size(s.runners), make_layout(spec).total);
}

TEST(RunFederation, DeterministicAcrossThreadCounts) {
  const auto spec = fixture::toy_spec();
  auto a = fixture::toy_scenario(4, 40, 9);
  auto b = fixture::toy_scenario(4, 40, 9);
  auto cfg = fixture::toy_config(4, 9);
  AuditObserver audit_a(make_layout(spec).total);
  AuditObserver audit_b(make_layout(spec).total);
  const auto ra = run_federation(a.runners, cfg, spec, &audit_a);
  cfg.threads = 4;
  const auto rb = run_federation(b.runners, cfg, spec, &audit_b);
  ASSERT_EQ(ra.state.history.size(), rb.state.history.size());
  for (std::size_t i = 0; i < ra.state.history.size(); ++i) {
    EXPECT_EQ(ra.state.history[i].global_params.load().values, rb.state.history[i].global_params.load().values);
    EXPECT_EQ(ra.state.history[i].per_runner_counts, rb.state.history[i].per_runner_counts);
    EXPECT_EQ(ra.state.history[i].mean_train_loss, rb.state.history[i].mean_train_loss);
  }
  fixture::expect_clean_audit(audit_b, 4, cfg.rounds, test_size(b.runners), make_layout(spec).total);
}

TEST(RunFederation, SpilledSnapshotsMatchInMemory) {
  const auto spec = fixture::toy_spec();
  auto a = fixture::toy_scenario(2, 40, 10);
  auto b = fixture::toy_scenario(2, 40, 10);
  auto cfg = fixture::toy_config(2, 10);
  AuditObserver audit(make_layout(spec).total);
  const auto mem = run_federation(a.runners, cfg, spec, &audit);
  cfg.snapshot_budget_bytes = 1;
  cfg.spill_dir = (std::filesystem::temp_directory_path() / "fednilm_spill_test").string();
  const auto disk = run_federation(b.runners, cfg, spec, &audit);
  for (std::size_t i = 0; i < mem.state.history.size(); ++i) {
    EXPECT_TRUE(disk.state.history[i].global_params.spilled());
    EXPECT_EQ(disk.state.history[i].global_params.load().values, mem.state.history[i].global_params.load().values);
  }
  EXPECT_EQ(disk.optimal.w_star.values, mem.optimal.w_star.values);
  std::filesystem::remove_all(cfg.spill_dir);
}

TEST(RunFederation, OptimizerStatePersistsUnlessReset) {
  const auto spec = fixture::toy_spec();
  auto a = fixture::toy_scenario(2, 32, 11);
  auto b = fixture::toy_scenario(2, 32, 11);
  auto cfg = fixture::toy_config(2, 11);
  AuditObserver audit(make_layout(spec).total);
  const auto keep = run_federation(a.runners, cfg, spec, &audit);
  EXPECT_EQ(a.runners[0].optimizer_state.step_count, cfg.rounds * cfg.local_epochs * 2);
  cfg.reset_optimizer_per_round = true;
  const auto reset = run_federation(b.runners, cfg, spec, &audit);
  EXPECT_EQ(b.runners[0].optimizer_state.step_count, cfg.local_epochs * 2);
  EXPECT_NE(keep.state.current.values, reset.state.current.values);
}

TEST(RunFederation, Errors) {
  const auto cfg = fixture::toy_config(1, 0);
  std::vector<RunnerState> none;
  EXPECT_THROW(run_federation(none, cfg, fixture::toy_spec()), InputError);
  auto s = fixture::toy_scenario(1, 32, 0);
  EXPECT_THROW(run_federation(s.runners, cfg, desk_spec()), ConfigError);
}

TEST(RoundLog, Shape) {
  RoundRecord r;
  r.round = 3;
  r.per_runner_counts = {{1, 2, 3, 4}, {5, 6, 7, 8}};
  r.runner_ids = {0, 1};
  r.global_f1 = 0.25;
  r.mean_train_loss = 0.5;
  const auto j = round_log_entry(r);
  EXPECT_EQ(j.at("round"), 3);
  EXPECT_EQ(j.at("per_runner").size(), 2u);
  EXPECT_EQ(j.at("per_runner")[1].at("fn"), 7);
  EXPECT_FALSE(j.at("per_runner")[1].contains("tn"));
}

// ---------------------------------------------------------------- baselines

TEST(Baselines, CentralEqualsSingleRunnerFederation) {
  const auto spec = fixture::toy_spec();
  auto s = fixture::toy_scenario(1, 64, 12);
  const auto cfg = fixture::toy_config(1, 12);
  const auto central = train_central(s.runners[0].train_data, s.runners[0].test_data, spec, cfg);
  AuditObserver audit(make_layout(spec).total);
  const auto fed = run_federation(s.runners, cfg, spec, &audit);
  for (std::size_t i = 0; i < central.params.size(); ++i) {
    EXPECT_NEAR(central.params.values[i], fed.state.current.values[i], 1e-12);
  }
  EXPECT_EQ(central.counters.sample_gradients, fed.counters.sample_gradients);
}

TEST(Baselines, CentralZeroLrScoresInitialNetwork) {
  const auto spec = fixture::toy_spec();
  auto s = fixture::toy_scenario(1, 64, 13);
  auto cfg = fixture::toy_config(1, 13);
  cfg.lr = 0.0;
  const auto central = train_central(s.runners[0].train_data, s.runners[0].test_data, spec, cfg);
  const Network net(spec);
  const auto init = evaluate(net, init_params(spec, init_seed(13)), s.runners[0].test_data, cfg.cutoff);
  EXPECT_EQ(central.f1, f1(init));
  EXPECT_THROW(train_central(WindowDataset(), s.runners[0].test_data, spec, cfg), DataError);
}

TEST(Baselines, BudgetParity) {
  const auto spec = fixture::toy_spec();
  auto s = fixture::toy_scenario(3, 40, 14);
  const auto cfg = fixture::toy_config(3, 14);
  AuditObserver audit(make_layout(spec).total);
  const auto fed = run_federation(s.runners, cfg, spec, &audit);
  std::vector<WindowSample> pooled_samples;
  std::vector<WindowDataset> parts;
  std::size_t pooled_n = 0;
  for (const auto& r : s.runners) {
    parts.push_back(r.train_data.renormalized(s.pooled));
    pooled_n += r.sample_count;
  }
  // Per-runner stats differ, so pool by concatenating re-expressed parts.
  const auto pooled = concat(parts);
  EXPECT_EQ(pooled.size(), pooled_n);
  const auto central = train_central(pooled, s.test_raw.renormalized(s.pooled), spec, cfg);
  const auto locals = train_locals(s.runners, s.test_raw, spec, cfg);
  const std::uint64_t epochs = cfg.rounds * cfg.local_epochs;
  EXPECT_EQ(fed.counters.sample_gradients, pooled_n * epochs);
  EXPECT_EQ(central.counters.sample_gradients, pooled_n * epochs);
  EXPECT_EQ(locals.counters.sample_gradients, pooled_n * epochs);
  for (std::size_t k = 0; k < locals.models.size(); ++k) {
    EXPECT_EQ(locals.models[k].counters.sample_gradients, s.runners[k].sample_count * epochs);
  }
  fixture::expect_clean_audit(audit, 3, cfg.rounds, test_size(s.runners), make_layout(spec).total);
}

TEST(Baselines, LocalsMeanAndDegenerateCases) {
  const auto spec = fixture::toy_spec();
  auto s = fixture::toy_scenario(4, 40, 15);
  const auto cfg = fixture::toy_config(4, 15);
  const auto locals = train_locals(s.runners, s.test_raw, spec, cfg);
  double sum = 0.0;
  for (const auto& m : locals.models) {
    sum += m.f1;
  }
  EXPECT_NEAR(locals.mean_f1, sum / 4.0, 1e-12);

  const auto single = train_locals(std::span(s.runners).first(1), s.test_raw, spec, cfg);
  EXPECT_EQ(single.mean_f1, single.models[0].f1);

  std::vector<RunnerState> clones(3, s.runners[0]);
  const auto same = train_locals(clones, s.test_raw, spec, cfg);
  EXPECT_EQ(same.models[0].f1, same.models[1].f1);
  EXPECT_EQ(same.models[1].f1, same.models[2].f1);
  EXPECT_DOUBLE_EQ(same.mean_f1, same.models[0].f1);
  EXPECT_THROW(train_locals(std::vector<RunnerState>{}, s.test_raw, spec, cfg), InputError);
}

TEST(Report, Examples) {
  const std::vector<ComparisonInput> in{{"microwave", 32, 0.340, 0.986, 0.963, 163840},
                                        {"kettle", 4, 0.863, 0.960, 0.995, 20480},
                                        {"x", 4, 0.5, 0.5, 0.5, 1}};
  const auto rows = build_report(in);
  EXPECT_NEAR(rows[0].fedavg_over_local_pct, 183.235, 0.01);
  EXPECT_NEAR(rows[0].fedavg_over_central_pct, -2.333, 0.01);
  // Recomputed from the three F1 values; the published text states 15.255 / 3.608.
  EXPECT_NEAR(rows[1].fedavg_over_local_pct, 15.2955, 0.001);
  EXPECT_NEAR(rows[1].fedavg_over_central_pct, 3.6458, 0.001);
  EXPECT_EQ(rows[2].fedavg_over_local_pct, 0.0);
  EXPECT_EQ(rows[2].fedavg_over_central_pct, 0.0);
  for (const auto& r : rows) {
    EXPECT_NEAR(r.fedavg_over_local_pct, 100.0 * (r.fedavg_f1 - r.local_avg_f1) / r.local_avg_f1, 1e-9);
    EXPECT_NEAR(r.fedavg_over_central_pct, 100.0 * (r.fedavg_f1 - r.central_f1) / r.central_f1, 1e-9);
  }
  std::ostringstream csv;
  write_report_csv(rows, csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
            "appliance,runners,local_avg_f1,central_f1,fedavg_f1,fedavg_over_local_pct,fedavg_over_central_pct,scale");
}

TEST(Report, MissingArmIsNamed) {
  const std::vector<ComparisonInput> in{{"kettle", 8, 0.5, std::nullopt, 0.6, 1}};
  try {
    build_report(in);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("central"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("K=8"), std::string::npos);
  }
}
