#pragma once

// Experiment matrix driver behind the CLI: config parsing and hashing, data
// preparation per (appliance, K, seed) cell, the three arms, on-disk outputs
// and the comparison report.
//
// Output layout under output_dir:
//   resolved_config.json            config with defaults filled in
//   metadata.json                   wall-clock timestamps (not reproducible)
//   summary.csv                     one row per cell and arm
//   cells/<appliance>/K<k>/seed<s>/<arm>/
//       summary.json                f1, losses, counters, config_hash
//       rounds.jsonl                federated: one line per round
//       optimal.fnlm, optimal.json  federated: selected round's model
//       model.fnlm                  central
//       local_<k>.fnlm              local
//   comparison.csv, comparison_seeds.csv, comparison_spread.csv, curves/  (report)

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fednilm/baselines.hpp"
#include "fednilm/checkpoint.hpp"
#include "fednilm/concurrency.hpp"
#include "fednilm/data.hpp"
#include "fednilm/federation.hpp"
#include "fednilm/network.hpp"

namespace fednilm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

struct SyntheticSource {
  std::vector<ApplianceProfile> appliances;
  std::size_t length = 24000;      // samples per household
  std::size_t households = 4;
  SynthOptions options{150.0, 20.0, 8};
  std::uint64_t seed = 7;
  bool unseen = true;              // generate an extra held-out household
  double unseen_power_scale = 0.9; // its profiles differ from training ones
  double unseen_duration_scale = 1.25;
};

struct CsvSource {
  std::vector<std::string> households;
  std::string unseen; // optional
  CsvSchema schema;
};

enum class Arm { federated, central, local };

inline std::string to_string(Arm a) {
  switch (a) {
  case Arm::federated:
    return "federated";
  case Arm::central:
    return "central";
  case Arm::local:
    return "local";
  }
  return "?";
}

inline std::vector<Arm> arms_from_string(const std::string& s) {
  if (s == "all") {
    return {Arm::federated, Arm::central, Arm::local};
  }
  if (s == "federated") {
    return {Arm::federated};
  }
  if (s == "central") {
    return {Arm::central};
  }
  if (s == "local") {
    return {Arm::local};
  }
  throw ConfigError("unknown arm '" + s + "' (expected federated|central|local|all)");
}

struct ExperimentConfig {
  std::vector<std::string> appliances;
  std::vector<std::size_t> runners{4};
  std::variant<SyntheticSource, CsvSource> data;
  NetworkSpec network = desk_spec();
  FLConfig fl;
  std::size_t per_runner = 2048;
  std::size_t test_windows = 2048;
  double holdout_fraction = 0.2;
  std::map<std::string, double> thresholds;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "out";

  double threshold(const std::string& appliance) const {
    if (auto it = thresholds.find(appliance); it != thresholds.end()) {
      return it->second;
    }
    if (const auto* syn = std::get_if<SyntheticSource>(&data)) {
      for (const auto& p : syn->appliances) {
        if (p.name == appliance) {
          return p.on_threshold;
        }
      }
    }
    return default_threshold(appliance);
  }
};

namespace detail {

inline void allow_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError(where + " must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) {
    return fallback;
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

} // namespace detail

inline SyntheticSource synthetic_from_json(const json& j) {
  detail::allow_keys(j,
                     {"appliances", "length", "households", "baseline", "noise_std", "sample_period", "seed",
                      "unseen", "unseen_power_scale", "unseen_duration_scale"},
                     "data.synthetic");
  SyntheticSource s;
  if (!j.contains("appliances") || !j.at("appliances").is_array()) {
    throw ConfigError("data.synthetic needs an 'appliances' array");
  }
  for (const auto& p : j.at("appliances")) {
    s.appliances.push_back(profile_from_json(p));
  }
  s.length = detail::get_or<std::size_t>(j, "length", s.length);
  s.households = detail::get_or<std::size_t>(j, "households", s.households);
  s.options.baseline = detail::get_or<double>(j, "baseline", s.options.baseline);
  s.options.noise_std = detail::get_or<double>(j, "noise_std", s.options.noise_std);
  s.options.sample_period = detail::get_or<std::int64_t>(j, "sample_period", s.options.sample_period);
  s.seed = detail::get_or<std::uint64_t>(j, "seed", s.seed);
  s.unseen = detail::get_or<bool>(j, "unseen", s.unseen);
  s.unseen_power_scale = detail::get_or<double>(j, "unseen_power_scale", s.unseen_power_scale);
  s.unseen_duration_scale = detail::get_or<double>(j, "unseen_duration_scale", s.unseen_duration_scale);
  if (s.length == 0) {
    throw ConfigError("data.synthetic.length must be positive");
  }
  if (s.households == 0) {
    throw ConfigError("data.synthetic.households must be positive");
  }
  return s;
}

inline json to_json(const SyntheticSource& s) {
  json apps = json::array();
  for (const auto& p : s.appliances) {
    apps.push_back(to_json(p));
  }
  return {{"appliances", apps},
          {"length", s.length},
          {"households", s.households},
          {"baseline", s.options.baseline},
          {"noise_std", s.options.noise_std},
          {"sample_period", s.options.sample_period},
          {"seed", s.seed},
          {"unseen", s.unseen},
          {"unseen_power_scale", s.unseen_power_scale},
          {"unseen_duration_scale", s.unseen_duration_scale}};
}

inline CsvSource csv_from_json(const json& j) {
  detail::allow_keys(j, {"households", "unseen", "timestamp_column", "aggregate_column"}, "data.csv");
  CsvSource c;
  c.households = detail::get_or<std::vector<std::string>>(j, "households", {});
  if (c.households.empty()) {
    throw ConfigError("data.csv.households must list at least one file");
  }
  c.unseen = detail::get_or<std::string>(j, "unseen", "");
  c.schema.timestamp_column = detail::get_or<std::string>(j, "timestamp_column", "timestamp");
  c.schema.aggregate_column = detail::get_or<std::string>(j, "aggregate_column", "aggregate");
  return c;
}

inline json to_json(const CsvSource& c) {
  return {{"households", c.households},
          {"unseen", c.unseen},
          {"timestamp_column", c.schema.timestamp_column},
          {"aggregate_column", c.schema.aggregate_column}};
}

/// Parses and validates an experiment config. Unknown keys are rejected.
inline ExperimentConfig experiment_from_json(const json& j) {
  detail::allow_keys(j,
                     {"appliances", "runners", "data", "network", "training", "per_runner", "test_windows",
                      "holdout_fraction", "thresholds", "seeds", "output_dir"},
                     "config");
  ExperimentConfig c;
  if (!j.contains("data")) {
    throw ConfigError("config needs a 'data' section");
  }
  const json& d = j.at("data");
  detail::allow_keys(d, {"synthetic", "csv"}, "data");
  if (d.contains("synthetic") == d.contains("csv")) {
    throw ConfigError("data must contain exactly one of 'synthetic' or 'csv'");
  }
  if (d.contains("synthetic")) {
    c.data = synthetic_from_json(d.at("synthetic"));
  } else {
    c.data = csv_from_json(d.at("csv"));
  }
  if (j.contains("network")) {
    try {
      c.network = resolve_network_spec(j.at("network"));
    } catch (const SpecError& e) {
      throw ConfigError(std::string("network: ") + e.what());
    }
  }
  c.fl.window = c.network.input_window;

  if (j.contains("training")) {
    const json& t = j.at("training");
    detail::allow_keys(t,
                       {"rounds", "local_epochs", "batch_size", "lr", "optimizer", "cutoff", "server_lr",
                        "reset_optimizer_per_round", "baseline_epochs", "snapshot_budget_bytes", "spill_dir"},
                       "training");
    c.fl.rounds = detail::get_or<std::size_t>(t, "rounds", c.fl.rounds);
    c.fl.local_epochs = detail::get_or<std::size_t>(t, "local_epochs", c.fl.local_epochs);
    c.fl.batch_size = detail::get_or<std::size_t>(t, "batch_size", c.fl.batch_size);
    c.fl.lr = detail::get_or<double>(t, "lr", c.fl.lr);
    c.fl.optimizer = optimizer_from_string(detail::get_or<std::string>(t, "optimizer", "adam"));
    c.fl.cutoff = detail::get_or<double>(t, "cutoff", c.fl.cutoff);
    c.fl.server_lr = detail::get_or<double>(t, "server_lr", c.fl.server_lr);
    c.fl.reset_optimizer_per_round = detail::get_or<bool>(t, "reset_optimizer_per_round", false);
    c.fl.baseline_epochs = detail::get_or<std::size_t>(t, "baseline_epochs", 0);
    c.fl.snapshot_budget_bytes = detail::get_or<std::uint64_t>(t, "snapshot_budget_bytes", 0);
    c.fl.spill_dir = detail::get_or<std::string>(t, "spill_dir", "");
  } else {
    c.fl.batch_size = 64;
  }
  c.appliances = detail::get_or<std::vector<std::string>>(j, "appliances", {});
  if (c.appliances.empty()) {
    if (const auto* syn = std::get_if<SyntheticSource>(&c.data)) {
      for (const auto& p : syn->appliances) {
        c.appliances.push_back(p.name);
      }
    }
  }
  if (c.appliances.empty()) {
    throw ConfigError("no appliances to model");
  }
  c.runners = detail::get_or<std::vector<std::size_t>>(j, "runners", c.runners);
  if (c.runners.empty() || std::find(c.runners.begin(), c.runners.end(), 0) != c.runners.end()) {
    throw ConfigError("runners must be a non-empty list of positive counts");
  }
  c.per_runner = detail::get_or<std::size_t>(j, "per_runner", c.per_runner);
  c.test_windows = detail::get_or<std::size_t>(j, "test_windows", c.test_windows);
  c.holdout_fraction = detail::get_or<double>(j, "holdout_fraction", c.holdout_fraction);
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must be in (0, 1)");
  }
  if (c.per_runner == 0 || c.test_windows == 0) {
    throw ConfigError("per_runner and test_windows must be positive");
  }
  c.thresholds = detail::get_or<std::map<std::string, double>>(j, "thresholds", {});
  c.seeds = detail::get_or<std::vector<std::uint64_t>>(j, "seeds", c.seeds);
  if (c.seeds.empty()) {
    throw ConfigError("seeds must not be empty");
  }
  c.output_dir = detail::get_or<std::string>(j, "output_dir", c.output_dir);
  c.fl.validate();
  if (!(c.fl.lr > 0.0)) {
    throw ConfigError("training.lr must be > 0");
  }
  for (auto k : c.runners) {
    if (c.test_windows < k) {
      throw ConfigError("test_windows must be at least the runner count");
    }
  }
  if (const auto* syn = std::get_if<SyntheticSource>(&c.data)) {
    for (const auto& a : c.appliances) {
      if (std::none_of(syn->appliances.begin(), syn->appliances.end(), [&](const auto& p) { return p.name == a; })) {
        throw ConfigError("appliance '" + a + "' is not part of the synthetic scenario");
      }
    }
  }
  return c;
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config " + path.string());
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

/// Fully resolved config; parsing it back yields the same experiment.
inline json to_json(const ExperimentConfig& c) {
  json data;
  if (const auto* syn = std::get_if<SyntheticSource>(&c.data)) {
    data["synthetic"] = to_json(*syn);
  } else {
    data["csv"] = to_json(std::get<CsvSource>(c.data));
  }
  return {{"appliances", c.appliances},
          {"runners", c.runners},
          {"data", data},
          {"network", to_json(c.network)},
          {"training",
           {{"rounds", c.fl.rounds},
            {"local_epochs", c.fl.local_epochs},
            {"batch_size", c.fl.batch_size},
            {"lr", c.fl.lr},
            {"optimizer", to_string(c.fl.optimizer)},
            {"cutoff", c.fl.cutoff},
            {"server_lr", c.fl.server_lr},
            {"reset_optimizer_per_round", c.fl.reset_optimizer_per_round},
            {"baseline_epochs", c.fl.baseline_epochs},
            {"snapshot_budget_bytes", c.fl.snapshot_budget_bytes},
            {"spill_dir", c.fl.spill_dir}}},
          {"per_runner", c.per_runner},
          {"test_windows", c.test_windows},
          {"holdout_fraction", c.holdout_fraction},
          {"thresholds", c.thresholds},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir}};
}

/// Content hash of the resolved config, excluding where outputs are written.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return detail::hex64(detail::fnv1a(j.dump()));
}

/// Hash of everything that affects one cell's results; seeds/matrix lists and
/// output location excluded so adding seeds does not invalidate finished cells.
inline std::string cell_hash(const ExperimentConfig& c, const std::string& appliance, std::size_t k,
                             std::uint64_t seed) {
  json j = to_json(c);
  for (const char* key : {"output_dir", "seeds", "appliances", "runners"}) {
    j.erase(key);
  }
  j["cell"] = {{"appliance", appliance}, {"runners", k}, {"seed", seed}};
  return detail::hex64(detail::fnv1a(j.dump()));
}

inline std::string describe(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "E=" << c.fl.local_epochs << " B=" << c.fl.batch_size << " lr=" << c.fl.lr << " T=" << c.fl.rounds
     << " W=" << c.network.input_window << " optimizer=" << to_string(c.fl.optimizer)
     << " per_runner=" << c.per_runner << " test_windows=" << c.test_windows << " params="
     << make_layout(c.network).total;
  return os.str();
}

// ---------------------------------------------------------------------------
// Data preparation

struct Sources {
  std::vector<LoadSeries> households;
  std::optional<LoadSeries> unseen;
};

inline std::vector<ApplianceProfile> unseen_variant(const SyntheticSource& s) {
  auto profiles = s.appliances;
  for (auto& p : profiles) {
    p.on_power = std::max(p.on_power * s.unseen_power_scale, p.on_threshold * 1.05);
    p.mean_on_duration = std::max(1.0, p.mean_on_duration * s.unseen_duration_scale);
  }
  return profiles;
}

inline Sources load_sources(const ExperimentConfig& c) {
  Sources out;
  if (const auto* syn = std::get_if<SyntheticSource>(&c.data)) {
    for (std::size_t h = 0; h < syn->households; ++h) {
      out.households.push_back(
          synth_generate(syn->appliances, syn->length, derive_seed(syn->seed, {kTagSynth, 1000 + h}), syn->options));
    }
    if (syn->unseen) {
      const auto variant = unseen_variant(*syn);
      out.unseen = synth_generate(variant, syn->length, derive_seed(syn->seed, {kTagSynth, 2000}), syn->options);
    }
  } else {
    const auto& csv = std::get<CsvSource>(c.data);
    for (const auto& path : csv.households) {
      out.households.push_back(ingest_csv(path, csv.schema));
    }
    if (!csv.unseen.empty()) {
      out.unseen = ingest_csv(csv.unseen, csv.schema);
    }
  }
  return out;
}

/// Everything one (appliance, K, seed) cell needs, in raw watts.
struct CellData {
  std::vector<WindowDataset> runner_train; // raw
  std::vector<NormalizationStats> runner_stats;
  NormalizationStats pooled_stats;
  WindowDataset pooled_train;              // raw, union of runner_train
  WindowDataset test;                      // raw, shared global test set
  std::vector<WindowDataset> runner_test;  // raw slices of `test`
};

/// Picks m indices spread evenly over [0, n).
inline std::vector<std::size_t> even_picks(std::size_t n, std::size_t m) {
  std::vector<std::size_t> idx;
  idx.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    idx.push_back(j * n / m);
  }
  return idx;
}

/// Chronological split of every household: the first (1 - holdout) feeds the
/// training pool, the tail feeds held-out test windows. The runner blocks come
/// from partition(); the test set draws evenly from each household tail and
/// the unseen household, then is dealt round-robin to the runners.
inline CellData prepare_cell(const Sources& src, const ExperimentConfig& c, const std::string& appliance,
                             std::size_t k, std::uint64_t seed) {
  const std::size_t w = c.network.input_window;
  const double threshold = c.threshold(appliance);
  std::vector<WindowDataset> train_parts;
  std::vector<WindowDataset> test_sources;
  for (const auto& h : src.households) {
    const auto cut = static_cast<std::size_t>(static_cast<double>(h.size()) * (1.0 - c.holdout_fraction));
    const auto head = slice(h, 0, cut);
    const auto tail = slice(h, cut, h.size());
    if (head.size() >= w) {
      train_parts.push_back(make_windows(head, appliance, w, kRawStats, threshold));
    }
    if (tail.size() >= w) {
      test_sources.push_back(make_windows(tail, appliance, w, kRawStats, threshold));
    }
  }
  if (src.unseen && src.unseen->size() >= w) {
    test_sources.push_back(make_windows(*src.unseen, appliance, w, kRawStats, threshold));
  }
  if (train_parts.empty() || test_sources.empty()) {
    throw DataError("series too short for window " + std::to_string(w));
  }

  CellData cell;
  const WindowDataset pool = concat(train_parts);
  cell.runner_train = partition(pool, k, c.per_runner, derive_seed(seed, {kTagPartition}));
  std::vector<WindowSample> union_samples;
  for (const auto& part : cell.runner_train) {
    cell.runner_stats.push_back(compute_stats(part.covered_values()));
    union_samples.insert(union_samples.end(), part.samples().begin(), part.samples().end());
  }
  cell.pooled_train = WindowDataset(pool.signal_ptr(), std::move(union_samples), appliance, kRawStats, w);
  cell.pooled_stats = compute_stats(cell.pooled_train.covered_values());

  std::vector<WindowDataset> picked;
  const std::size_t per_source = c.test_windows / test_sources.size();
  std::size_t extra = c.test_windows % test_sources.size();
  for (const auto& s : test_sources) {
    const std::size_t m = per_source + (extra > 0 ? 1 : 0);
    extra -= extra > 0 ? 1 : 0;
    if (m > s.size()) {
      throw DataError("test source has only " + std::to_string(s.size()) + " windows, need " + std::to_string(m));
    }
    picked.push_back(s.subset(even_picks(s.size(), m)));
  }
  cell.test = concat(picked);
  for (std::size_t r = 0; r < k; ++r) {
    std::vector<std::size_t> idx;
    for (std::size_t j = r; j < cell.test.size(); j += k) {
      idx.push_back(j);
    }
    cell.runner_test.push_back(cell.test.subset(idx));
  }
  return cell;
}

/// Federated-arm runners: training in per-runner stats, testing in pooled
/// stats published by the coordinator.
inline std::vector<RunnerState> federated_runners(const CellData& cell, std::uint64_t seed) {
  std::vector<RunnerState> runners;
  for (std::size_t r = 0; r < cell.runner_train.size(); ++r) {
    runners.push_back(make_runner(r, cell.runner_train[r].renormalized(cell.runner_stats[r]),
                                  cell.runner_test[r].renormalized(cell.pooled_stats), seed));
  }
  return runners;
}

// ---------------------------------------------------------------------------
// Running cells

struct CellKey {
  std::string appliance;
  std::size_t runners = 0;
  std::uint64_t seed = 0;
};

inline std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) {
    out.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' ? ch : '_');
  }
  return out;
}

inline fs::path cell_dir(const fs::path& out, const CellKey& key, Arm arm) {
  return out / "cells" / sanitize(key.appliance) / ("K" + std::to_string(key.runners)) /
         ("seed" + std::to_string(key.seed)) / to_string(arm);
}

inline std::vector<CellKey> cell_matrix(const ExperimentConfig& c) {
  std::vector<CellKey> cells;
  for (const auto& a : c.appliances) {
    for (auto k : c.runners) {
      for (auto s : c.seeds) {
        cells.push_back({a, k, s});
      }
    }
  }
  return cells;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << text;
}

inline std::optional<json> read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    return std::nullopt;
  }
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

/// Runs one arm of one cell and writes its outputs into `dir`.
inline json run_arm(const ExperimentConfig& c, const Sources& src, const CellKey& key, Arm arm, const fs::path& dir,
                    const std::string& hash) {
  fs::create_directories(dir);
  FLConfig fl = c.fl;
  fl.runners = key.runners;
  fl.seed = key.seed;
  fl.threads = 1;
  if (!fl.spill_dir.empty()) {
    fl.spill_dir = (dir / "snapshots").string();
  }
  const CellData cell = prepare_cell(src, c, key.appliance, key.runners, key.seed);
  std::size_t scale = 0;
  for (const auto& r : cell.runner_train) {
    scale += r.size();
  }
  json summary = {{"appliance", key.appliance}, {"runners", key.runners}, {"seed", key.seed},
                  {"arm", to_string(arm)},      {"config_hash", hash},    {"scale", scale},
                  {"test_windows", cell.test.size()}};

  if (arm == Arm::federated) {
    auto runners = federated_runners(cell, key.seed);
    auto result = run_federation(runners, fl, c.network);
    std::ostringstream log;
    for (const auto& rec : result.state.history) {
      json line = round_log_entry(rec);
      line["config_hash"] = hash;
      log << line.dump() << '\n';
    }
    write_text(dir / "rounds.jsonl", log.str());
    save_checkpoint(result.optimal.w_star, dir / "optimal.fnlm");
    write_text(dir / "optimal.json",
               json{{"t_star", result.optimal.t_star}, {"global_f1", result.optimal.global_f1}, {"config_hash", hash}}
                       .dump(2) +
                   "\n");
    const auto& hist = result.state.history;
    summary["f1"] = result.optimal.global_f1;
    summary["t_star"] = result.optimal.t_star;
    summary["first_train_loss"] = hist.front().mean_train_loss;
    summary["final_train_loss"] = hist.back().mean_train_loss;
    summary["epochs"] = result.counters.epochs;
    summary["sample_gradients"] = result.counters.sample_gradients;
    summary["normalization"] = "per-runner stats for training, pooled stats for testing";
  } else if (arm == Arm::central) {
    const auto pooled = cell.pooled_train.renormalized(cell.pooled_stats);
    const auto test = cell.test.renormalized(cell.pooled_stats);
    auto result = train_central(pooled, test, c.network, fl);
    save_checkpoint(result.params, dir / "model.fnlm");
    summary["f1"] = result.f1;
    summary["counts"] = to_json(result.counts);
    summary["first_train_loss"] = result.epoch_mean_loss.front();
    summary["final_train_loss"] = result.epoch_mean_loss.back();
    summary["epochs"] = result.counters.epochs;
    summary["sample_gradients"] = result.counters.sample_gradients;
    summary["normalization"] = "pooled stats";
  } else {
    std::vector<RunnerState> runners;
    for (std::size_t r = 0; r < cell.runner_train.size(); ++r) {
      runners.push_back(make_runner(r, cell.runner_train[r].renormalized(cell.runner_stats[r]), {}, key.seed));
    }
    auto result = train_locals(runners, cell.test, c.network, fl);
    json per = json::array();
    for (std::size_t r = 0; r < result.models.size(); ++r) {
      save_checkpoint(result.models[r].params, dir / ("local_" + std::to_string(r) + ".fnlm"));
      per.push_back({{"runner_id", r}, {"f1", result.models[r].f1}, {"counts", to_json(result.models[r].counts)}});
    }
    summary["f1"] = result.mean_f1;
    summary["models"] = per;
    summary["epochs"] = result.counters.epochs;
    summary["sample_gradients"] = result.counters.sample_gradients;
    summary["normalization"] = "own partition stats per runner";
  }
  summary["status"] = "ok";
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

struct RunOptions {
  std::vector<Arm> arms{Arm::federated, Arm::central, Arm::local};
  bool force = false;
  bool dry_run = false;
  std::size_t workers = default_thread_count();
  std::ostream* log = &std::cerr;
};

struct RunOutcome {
  std::size_t executed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};

inline std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Rewrites summary.csv from the per-arm summaries of the config's matrix.
inline void write_summary_csv(const ExperimentConfig& c, const fs::path& out, const std::vector<Arm>& arms) {
  std::ostringstream csv;
  csv << "appliance,runners,seed,arm,status,f1,t_star,first_train_loss,final_train_loss,config_hash\n";
  for (const auto& key : cell_matrix(c)) {
    for (Arm arm : arms) {
      const auto s = read_json(cell_dir(out, key, arm) / "summary.json");
      if (!s) {
        continue;
      }
      auto num = [&](const char* k) -> std::string {
        return s->contains(k) && s->at(k).is_number() ? detail::format_double(s->at(k).get<double>()) : "";
      };
      csv << key.appliance << ',' << key.runners << ',' << key.seed << ',' << to_string(arm) << ','
          << s->value("status", "") << ',' << num("f1") << ','
          << (s->contains("t_star") ? std::to_string(s->at("t_star").get<std::size_t>()) : "") << ','
          << num("first_train_loss") << ',' << num("final_train_loss") << ',' << s->value("config_hash", "") << '\n';
    }
  }
  write_text(out / "summary.csv", csv.str());
}

inline RunOutcome run_experiment(const ExperimentConfig& c, const RunOptions& opt) {
  const fs::path out = c.output_dir;
  const auto cells = cell_matrix(c);
  const std::string hash = config_hash(c);
  auto& log = *opt.log;
  if (opt.dry_run) {
    log << "config " << hash << ": " << describe(c) << "\n";
    for (const auto& key : cells) {
      for (Arm arm : opt.arms) {
        log << "  cell " << key.appliance << " K=" << key.runners << " seed=" << key.seed << " arm=" << to_string(arm)
            << "\n";
      }
    }
    return {};
  }
  fs::create_directories(out);
  write_text(out / "resolved_config.json", to_json(c).dump(2) + "\n");
  const std::string started = iso_now();
  const Sources src = load_sources(c);

  struct Job {
    CellKey key;
    Arm arm;
  };
  std::vector<Job> jobs;
  RunOutcome outcome;
  for (const auto& key : cells) {
    for (Arm arm : opt.arms) {
      const auto dir = cell_dir(out, key, arm);
      const auto prior = read_json(dir / "summary.json");
      if (!opt.force && prior && prior->value("status", "") == "ok" &&
          prior->value("cell_hash", "") == cell_hash(c, key.appliance, key.runners, key.seed)) {
        ++outcome.skipped;
        log << "skip " << dir.string() << " (up to date)\n";
        continue;
      }
      jobs.push_back({key, arm});
    }
  }
  std::vector<int> failed(jobs.size(), 0);
  std::mutex log_mutex;
  parallel_for(jobs.size(), opt.workers, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto dir = cell_dir(out, job.key, job.arm);
    const std::string chash = cell_hash(c, job.key.appliance, job.key.runners, job.key.seed);
    try {
      json s = run_arm(c, src, job.key, job.arm, dir, hash);
      s["cell_hash"] = chash;
      write_text(dir / "summary.json", s.dump(2) + "\n");
      std::lock_guard lock(log_mutex);
      log << "done " << job.key.appliance << " K=" << job.key.runners << " seed=" << job.key.seed
          << " arm=" << to_string(job.arm) << " f1=" << s.at("f1").get<double>() << "\n";
    } catch (const std::exception& e) {
      failed[i] = 1;
      fs::create_directories(dir);
      json s = {{"appliance", job.key.appliance}, {"runners", job.key.runners}, {"seed", job.key.seed},
                {"arm", to_string(job.arm)},      {"config_hash", hash},       {"cell_hash", chash},
                {"status", "failed"},             {"error", e.what()}};
      write_text(dir / "summary.json", s.dump(2) + "\n");
      std::lock_guard lock(log_mutex);
      log << "FAILED " << job.key.appliance << " K=" << job.key.runners << " seed=" << job.key.seed
          << " arm=" << to_string(job.arm) << ": " << e.what() << "\n";
    }
  });
  for (int f : failed) {
    outcome.failed += static_cast<std::size_t>(f);
  }
  outcome.executed = jobs.size() - outcome.failed;
  write_summary_csv(c, out, {Arm::federated, Arm::central, Arm::local});
  write_text(out / "metadata.json",
             json{{"started_at", started}, {"finished_at", iso_now()}, {"config_hash", hash}}.dump(2) + "\n");
  return outcome;
}

// ---------------------------------------------------------------------------
// Report

struct ReportOutcome {
  std::vector<ComparisonRow> rows;
  std::vector<std::string> missing; // "<appliance> K=<k> seed=<s> arm=<arm>"
  std::size_t curve_files = 0;
};

inline ReportOutcome build_experiment_report(const fs::path& out) {
  const auto resolved = read_json(out / "resolved_config.json");
  if (!resolved) {
    throw DataError("no resolved_config.json in " + out.string() + "; run the experiment first");
  }
  ExperimentConfig c = experiment_from_json(*resolved);
  const std::string hash = config_hash(c);
  ReportOutcome rep;
  fs::create_directories(out / "curves");

  std::ostringstream seeds_csv;
  seeds_csv << "appliance,runners,seed,local_avg_f1,central_f1,fedavg_f1,fedavg_over_local_pct,"
               "fedavg_over_central_pct,scale\n";
  std::ostringstream spread_csv;
  spread_csv << "appliance,runners,arm,seeds,mean_f1,min_f1,max_f1\n";
  std::vector<ComparisonInput> inputs;

  for (const auto& appliance : c.appliances) {
    for (auto k : c.runners) {
      std::map<Arm, std::vector<double>> per_arm;
      std::size_t scale = 0;
      for (auto seed : c.seeds) {
        const CellKey key{appliance, k, seed};
        std::map<Arm, double> f;
        for (Arm arm : {Arm::local, Arm::central, Arm::federated}) {
          const auto s = read_json(cell_dir(out, key, arm) / "summary.json");
          if (!s || s->value("status", "") != "ok") {
            rep.missing.push_back(appliance + " K=" + std::to_string(k) + " seed=" + std::to_string(seed) +
                                  " arm=" + to_string(arm));
            continue;
          }
          f[arm] = s->at("f1").get<double>();
          scale = s->value("scale", scale);
        }
        // Curves from the federated round log.
        std::ifstream rounds(cell_dir(out, key, Arm::federated) / "rounds.jsonl");
        if (rounds) {
          std::ostringstream curve;
          curve << "round,mean_train_loss,global_f1\n";
          std::string line;
          while (std::getline(rounds, line)) {
            if (line.empty()) {
              continue;
            }
            const json r = json::parse(line);
            curve << r.at("round").get<std::size_t>() << ','
                  << detail::format_double(r.at("mean_train_loss").get<double>()) << ','
                  << detail::format_double(r.at("global_f1").get<double>()) << '\n';
          }
          write_text(out / "curves" /
                         (sanitize(appliance) + "_K" + std::to_string(k) + "_seed" + std::to_string(seed) + ".csv"),
                     curve.str());
          ++rep.curve_files;
        }
        if (f.size() != 3) {
          continue;
        }
        for (auto& [arm, v] : f) {
          per_arm[arm].push_back(v);
        }
        const ComparisonInput one{appliance, k, f[Arm::local], f[Arm::central], f[Arm::federated], scale};
        const auto row = build_report(std::span(&one, 1)).front();
        seeds_csv << appliance << ',' << k << ',' << seed << ',' << detail::format_double(row.local_avg_f1) << ','
                  << detail::format_double(row.central_f1) << ',' << detail::format_double(row.fedavg_f1) << ','
                  << detail::format_double(row.fedavg_over_local_pct) << ','
                  << detail::format_double(row.fedavg_over_central_pct) << ',' << scale << '\n';
      }
      if (per_arm.size() != 3) {
        continue;
      }
      auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) {
          s += x;
        }
        return s / static_cast<double>(v.size());
      };
      for (Arm arm : {Arm::local, Arm::central, Arm::federated}) {
        const auto& v = per_arm[arm];
        spread_csv << appliance << ',' << k << ',' << to_string(arm) << ',' << v.size() << ','
                   << detail::format_double(mean(v)) << ','
                   << detail::format_double(*std::min_element(v.begin(), v.end())) << ','
                   << detail::format_double(*std::max_element(v.begin(), v.end())) << '\n';
      }
      inputs.push_back(
          {appliance, k, mean(per_arm[Arm::local]), mean(per_arm[Arm::central]), mean(per_arm[Arm::federated]), scale});
    }
  }
  rep.rows = build_report(inputs);
  std::ostringstream cmp;
  write_report_csv(rep.rows, cmp);
  cmp << "# config_hash=" << hash << '\n';
  write_text(out / "comparison.csv", cmp.str());
  seeds_csv << "# config_hash=" << hash << '\n';
  write_text(out / "comparison_seeds.csv", seeds_csv.str());
  spread_csv << "# config_hash=" << hash << '\n';
  write_text(out / "comparison_spread.csv", spread_csv.str());
  std::ostringstream miss;
  for (const auto& m : rep.missing) {
    miss << m << '\n';
  }
  write_text(out / "missing_cells.txt", miss.str());
  return rep;
}

} // namespace fednilm
