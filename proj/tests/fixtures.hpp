#pragma once

#include <gtest/gtest.h>

#include <string>
#include <type_traits>
#include <vector>

#include "fednilm/baselines.hpp"
#include "fednilm/federation.hpp"

namespace fixture {

using namespace fednilm;

inline NetworkSpec toy_spec() {
  return {15, {Conv1D{3, 5, Activation::relu}, Dense{6, Activation::relu}, Dense{1, Activation::linear}}};
}

struct ToyScenario {
  std::vector<RunnerState> runners;
  WindowDataset test_raw;
  NormalizationStats pooled;
};

/// K runners cut from one synthetic household; each trains in its own stats
/// and tests a round-robin slice of a shared test set in pooled stats.
inline ToyScenario toy_scenario(std::size_t k, std::size_t per_runner, std::uint64_t seed, std::size_t window = 15) {
  const ApplianceProfile kettle{"kettle", 1000, 2000, 6, 18, 50};
  const auto series = synth_generate(std::vector{kettle}, (k + 2) * per_runner + 400, 99, {100, 10, 8});
  const auto cut = series.size() - 300;
  const auto train = make_windows(slice(series, 0, cut), "kettle", window, kRawStats, 1000);
  const auto test = make_windows(slice(series, cut, series.size()), "kettle", window, kRawStats, 1000);
  auto parts = partition(train, k, per_runner, derive_seed(seed, {kTagPartition}));
  std::vector<double> all;
  for (const auto& p : parts) {
    const auto v = p.covered_values();
    all.insert(all.end(), v.begin(), v.end());
  }
  ToyScenario s;
  s.pooled = compute_stats(all);
  s.test_raw = test;
  for (std::size_t r = 0; r < k; ++r) {
    std::vector<std::size_t> idx;
    for (std::size_t j = r; j < test.size(); j += k) {
      idx.push_back(j);
    }
    s.runners.push_back(make_runner(r, parts[r].renormalized(compute_stats(parts[r].covered_values())),
                                    test.subset(idx).renormalized(s.pooled), seed));
  }
  return s;
}

inline FLConfig toy_config(std::size_t k, std::uint64_t seed) {
  FLConfig c;
  c.runners = k;
  c.rounds = 3;
  c.local_epochs = 2;
  c.batch_size = 16;
  c.lr = 2e-3;
  c.window = 15;
  c.seed = seed;
  c.threads = 1;
  return c;
}

/// Records everything crossing the runner/coordinator boundary and checks
/// that it is only parameter vectors, scalar losses and confusion counts.
class AuditObserver : public BoundaryObserver {
public:
  // Reply types are closed: exactly these members, none of them window data.
  static_assert(!carries_window_data<TrainReply>::value && !carries_window_data<TestReply>::value);
  static_assert(std::is_same_v<decltype(TrainReply::weights), ParameterVector>);
  static_assert(std::is_same_v<decltype(TrainReply::mean_loss), double>);
  static_assert(std::is_same_v<decltype(TrainReply::sample_count), std::size_t>);
  static_assert(std::is_same_v<decltype(TestReply::counts), ConfusionCounts>);
  static_assert(sizeof(TestReply) == sizeof(std::size_t) + sizeof(ConfusionCounts));

  explicit AuditObserver(std::size_t layout_size) : layout_size_(layout_size) {}

  void on_broadcast(std::size_t, const ParameterVector& w) override {
    ++broadcasts;
    EXPECT_EQ(w.size(), layout_size_);
  }
  void on_train_reply(std::size_t, const TrainReply& r) override {
    ++train_replies;
    EXPECT_EQ(r.weights.size(), layout_size_);
    EXPECT_TRUE(std::isfinite(r.mean_loss));
    values_seen += r.weights.size() + 2;
  }
  void on_test_reply(std::size_t, const TestReply& r) override {
    ++test_replies;
    tested += r.counts.total();
    values_seen += 4;
  }

  std::size_t broadcasts = 0;
  std::size_t train_replies = 0;
  std::size_t test_replies = 0;
  std::uint64_t tested = 0;
  std::uint64_t values_seen = 0;
  // No hook ever receives a WindowSample, so this stays zero by construction.
  static constexpr std::size_t window_samples_seen = 0;

private:
  std::size_t layout_size_;
};

/// Expected traffic for a completed run.
inline void expect_clean_audit(const AuditObserver& a, std::size_t k, std::size_t rounds, std::uint64_t test_windows,
                               std::size_t layout_size) {
  EXPECT_EQ(a.window_samples_seen, 0u);
  EXPECT_EQ(a.train_replies, k * rounds);
  EXPECT_EQ(a.test_replies, k * rounds);
  EXPECT_EQ(a.broadcasts, 2 * rounds);
  EXPECT_EQ(a.tested, test_windows * rounds);
  EXPECT_EQ(a.values_seen, k * rounds * (layout_size + 2 + 4));
}

} // namespace fixture
