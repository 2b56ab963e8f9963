#pragma once

// Load series, windowing and runner partitioning.
//
// A WindowDataset does not copy windows. It holds one shared signal (the
// normalized aggregate, possibly the concatenation of several households) and
// each sample names its start position in that signal, so a W=599 dataset of
// 100k windows costs 100k doubles rather than 60M.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "fednilm/error.hpp"
#include "fednilm/rng.hpp"

namespace fednilm {

struct ApplianceChannel {
  std::string name;
  std::vector<double> watts;
  friend bool operator==(const ApplianceChannel&, const ApplianceChannel&) = default;
};

struct LoadSeries {
  std::vector<std::int64_t> timestamps; // seconds, strictly increasing
  std::vector<double> aggregate;        // watts
  std::vector<ApplianceChannel> appliances;
  std::size_t dropped_rows = 0;         // rows skipped for missing values on ingest

  std::size_t size() const noexcept { return aggregate.size(); }

  const ApplianceChannel& appliance(std::string_view name) const {
    for (const auto& a : appliances) {
      if (a.name == name) {
        return a;
      }
    }
    throw DataError("unknown appliance '" + std::string(name) + "'");
  }

  bool has_appliance(std::string_view name) const {
    return std::any_of(appliances.begin(), appliances.end(), [&](const auto& a) { return a.name == name; });
  }

  friend bool operator==(const LoadSeries& a, const LoadSeries& b) {
    return a.timestamps == b.timestamps && a.aggregate == b.aggregate && a.appliances == b.appliances;
  }
};

/// Samples [begin, end) of every channel.
inline LoadSeries slice(const LoadSeries& s, std::size_t begin, std::size_t end) {
  end = std::min(end, s.size());
  begin = std::min(begin, end);
  LoadSeries out;
  out.timestamps.assign(s.timestamps.begin() + begin, s.timestamps.begin() + end);
  out.aggregate.assign(s.aggregate.begin() + begin, s.aggregate.begin() + end);
  for (const auto& a : s.appliances) {
    out.appliances.push_back({a.name, {a.watts.begin() + begin, a.watts.begin() + end}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: header `timestamp,aggregate,<appliance>...`, one row per sample.

struct CsvSchema {
  std::string timestamp_column = "timestamp";
  std::string aggregate_column = "aggregate";
  std::vector<std::string> appliances; // empty: every remaining column
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      cells.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return cells;
}

inline bool is_missing(std::string_view cell) {
  return cell.empty() || cell == "nan" || cell == "NaN" || cell == "NA" || cell == "null";
}

template <typename T>
std::optional<T> parse_number(std::string_view cell) {
  T value{};
  const auto* end = cell.data() + cell.size();
  const auto [ptr, ec] = std::from_chars(cell.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    return std::nullopt;
  }
  return value;
}

inline std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

} // namespace detail

/// Parses a household CSV. Rows with an empty or NaN cell are dropped;
/// any other unparsable or negative cell is an error naming the row.
inline LoadSeries parse_csv(std::istream& in, const CsvSchema& schema = {}, const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError(source + ": empty series");
  }
  const auto header = detail::split_csv(line);
  auto find_col = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) {
        return i;
      }
    }
    throw DataError(source + ": missing column '" + name + "'");
  };
  const std::size_t ts_col = find_col(schema.timestamp_column);
  const std::size_t agg_col = find_col(schema.aggregate_column);
  std::vector<std::size_t> app_cols;
  LoadSeries series;
  if (schema.appliances.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i != ts_col && i != agg_col) {
        app_cols.push_back(i);
        series.appliances.push_back({std::string(header[i]), {}});
      }
    }
  } else {
    for (const auto& name : schema.appliances) {
      app_cols.push_back(find_col(name));
      series.appliances.push_back({name, {}});
    }
  }

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) {
      continue;
    }
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) {
      throw DataError(source + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " cells, header has " + std::to_string(header.size()));
    }
    auto cell_missing = [&](std::size_t c) { return detail::is_missing(cells[c]); };
    bool missing = cell_missing(ts_col) || cell_missing(agg_col);
    for (auto c : app_cols) {
      missing = missing || cell_missing(c);
    }
    if (missing) {
      ++series.dropped_rows;
      continue;
    }
    auto watts = [&](std::size_t c) {
      const auto v = detail::parse_number<double>(cells[c]);
      if (!v || !std::isfinite(*v)) {
        throw DataError(source + ": row " + std::to_string(row) + ": non-numeric value '" + std::string(cells[c]) +
                        "' in column '" + std::string(header[c]) + "'");
      }
      if (*v < 0.0) {
        throw DataError(source + ": row " + std::to_string(row) + ": negative power in column '" +
                        std::string(header[c]) + "'");
      }
      return *v;
    };
    const auto ts = detail::parse_number<std::int64_t>(cells[ts_col]);
    if (!ts) {
      throw DataError(source + ": row " + std::to_string(row) + ": non-numeric timestamp '" +
                      std::string(cells[ts_col]) + "'");
    }
    if (!series.timestamps.empty() && *ts <= series.timestamps.back()) {
      throw DataError(source + ": row " + std::to_string(row) + ": non-monotone timestamps");
    }
    series.timestamps.push_back(*ts);
    series.aggregate.push_back(watts(agg_col));
    for (std::size_t a = 0; a < app_cols.size(); ++a) {
      series.appliances[a].watts.push_back(watts(app_cols[a]));
    }
  }
  if (series.aggregate.empty()) {
    throw DataError(source + ": empty series");
  }
  return series;
}

inline LoadSeries ingest_csv(const std::filesystem::path& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  return parse_csv(in, schema, path.string());
}

/// Shortest round-trip formatting, so ingest_csv(write_csv(s)) == s.
inline void write_csv(const LoadSeries& s, std::ostream& out) {
  out << "timestamp,aggregate";
  for (const auto& a : s.appliances) {
    out << ',' << a.name;
  }
  out << '\n';
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << s.timestamps[i] << ',' << detail::format_double(s.aggregate[i]);
    for (const auto& a : s.appliances) {
      out << ',' << detail::format_double(a.watts[i]);
    }
    out << '\n';
  }
}

inline void write_csv(const LoadSeries& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  write_csv(s, out);
  if (!out) {
    throw DataError("failed writing " + path.string());
  }
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kStdFloor = 1e-6;

struct NormalizationStats {
  double mean = 0.0;
  double std = 1.0;

  double normalize(double watts) const noexcept { return (watts - mean) / std; }
  double denormalize(double z) const noexcept { return z * std + mean; }
  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

/// Identity stats for unnormalized ("raw") datasets.
inline constexpr NormalizationStats kRawStats{0.0, 1.0};

/// Mean and population standard deviation (floored at 1e-6).
inline NormalizationStats compute_stats(std::span<const double> values) {
  if (values.empty()) {
    throw DataError("compute_stats: empty series");
  }
  // Welford.
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;
  for (double x : values) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  const double sd = std::sqrt(m2 / static_cast<double>(n));
  return {mean, std::max(sd, kStdFloor)};
}

inline NormalizationStats compute_stats(const LoadSeries& series) { return compute_stats(series.aggregate); }

// ---------------------------------------------------------------------------
// Windows

struct WindowSample {
  std::size_t source_index = 0; // start of the window in the dataset signal
  double target = 0.0;          // 1.0 if the appliance is on at the window midpoint
  friend bool operator==(const WindowSample&, const WindowSample&) = default;
};

class WindowDataset {
public:
  WindowDataset() = default;
  WindowDataset(std::shared_ptr<const std::vector<double>> signal, std::vector<WindowSample> samples,
                std::string appliance, NormalizationStats stats, std::size_t window)
      : signal_(std::move(signal)), samples_(std::move(samples)), appliance_(std::move(appliance)), stats_(stats),
        window_(window) {
    for (const auto& s : samples_) {
      if (s.source_index + window_ > signal_->size()) {
        throw ShapeError("window sample runs past the end of its signal");
      }
    }
  }

  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  std::size_t window_length() const noexcept { return window_; }
  const std::string& appliance() const noexcept { return appliance_; }
  const NormalizationStats& stats() const noexcept { return stats_; }
  const std::vector<WindowSample>& samples() const noexcept { return samples_; }
  const WindowSample& sample(std::size_t i) const { return samples_.at(i); }
  const std::vector<double>& signal() const noexcept { return *signal_; }
  const std::shared_ptr<const std::vector<double>>& signal_ptr() const noexcept { return signal_; }

  std::span<const double> window(std::size_t i) const {
    return {signal_->data() + samples_[i].source_index, window_};
  }

  std::vector<double> targets() const {
    std::vector<double> t;
    t.reserve(samples_.size());
    for (const auto& s : samples_) {
      t.push_back(s.target);
    }
    return t;
  }

  /// Samples at the given positions, sharing this dataset's signal.
  WindowDataset subset(std::span<const std::size_t> positions) const {
    std::vector<WindowSample> picked;
    picked.reserve(positions.size());
    for (auto p : positions) {
      picked.push_back(samples_.at(p));
    }
    return {signal_, std::move(picked), appliance_, stats_, window_};
  }

  WindowDataset range(std::size_t begin, std::size_t end) const {
    return {signal_, {samples_.begin() + begin, samples_.begin() + end}, appliance_, stats_, window_};
  }

  /// Re-expresses the signal under new stats. `*this` must hold raw watts
  /// or be normalized with stats(); the result carries `to`.
  WindowDataset renormalized(const NormalizationStats& to) const {
    auto sig = std::make_shared<std::vector<double>>(signal_->size());
    for (std::size_t i = 0; i < sig->size(); ++i) {
      (*sig)[i] = to.normalize(stats_.denormalize((*signal_)[i]));
    }
    return {std::move(sig), samples_, appliance_, to, window_};
  }

  /// Values of every signal position covered by at least one window.
  std::vector<double> covered_values() const {
    std::vector<bool> mark(signal_->size(), false);
    for (const auto& s : samples_) {
      std::fill(mark.begin() + static_cast<std::ptrdiff_t>(s.source_index),
                mark.begin() + static_cast<std::ptrdiff_t>(s.source_index + window_), true);
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < mark.size(); ++i) {
      if (mark[i]) {
        out.push_back(stats_.denormalize((*signal_)[i]));
      }
    }
    return out;
  }

private:
  std::shared_ptr<const std::vector<double>> signal_ = std::make_shared<std::vector<double>>();
  std::vector<WindowSample> samples_;
  std::string appliance_;
  NormalizationStats stats_;
  std::size_t window_ = 0;
};

/// Joins datasets that share appliance, W and stats, concatenating their
/// signals; source indices of later parts are shifted accordingly.
inline WindowDataset concat(std::span<const WindowDataset> parts) {
  if (parts.empty()) {
    throw DataError("concat: nothing to join");
  }
  auto sig = std::make_shared<std::vector<double>>();
  std::vector<WindowSample> samples;
  for (const auto& p : parts) {
    if (p.window_length() != parts[0].window_length() || p.appliance() != parts[0].appliance() ||
        !(p.stats() == parts[0].stats())) {
      throw DataError("concat: datasets disagree on window, appliance or stats");
    }
    const std::size_t shift = sig->size();
    sig->insert(sig->end(), p.signal().begin(), p.signal().end());
    for (auto s : p.samples()) {
      s.source_index += shift;
      samples.push_back(s);
    }
  }
  return {std::move(sig), std::move(samples), parts[0].appliance(), parts[0].stats(), parts[0].window_length()};
}

/// Median positive timestamp step, 0 for series shorter than 2.
inline double median_interval(std::span<const std::int64_t> ts) {
  if (ts.size() < 2) {
    return 0.0;
  }
  std::vector<std::int64_t> d;
  d.reserve(ts.size() - 1);
  for (std::size_t i = 1; i < ts.size(); ++i) {
    d.push_back(ts[i] - ts[i - 1]);
  }
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double m = static_cast<double>(d[mid]);
  if (d.size() % 2 == 0) {
    const auto lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    m = 0.5 * (m + static_cast<double>(lower));
  }
  return m;
}

inline constexpr double kGapFactor = 10.0;

/// One sample per start position i whose W samples contain no timestamp gap
/// wider than 10x the median step. target = appliance[i + (W-1)/2] >= threshold.
inline WindowDataset make_windows(const LoadSeries& series, std::string_view appliance, std::size_t window,
                                  const NormalizationStats& stats, double threshold) {
  if (window == 0 || window % 2 == 0) {
    throw DataError("window length must be odd, got " + std::to_string(window));
  }
  if (series.size() < window) {
    throw DataError("series of length " + std::to_string(series.size()) + " is shorter than window " +
                    std::to_string(window));
  }
  const auto& channel = series.appliance(appliance);
  const std::size_t n = series.size();
  // gaps[i] = number of oversized steps among (0..i], so the window starting
  // at i is clean iff gaps[i + W - 1] == gaps[i].
  std::vector<std::size_t> gaps(n, 0);
  const double limit = kGapFactor * median_interval(series.timestamps);
  for (std::size_t i = 1; i < n; ++i) {
    const bool big = limit > 0.0 && static_cast<double>(series.timestamps[i] - series.timestamps[i - 1]) > limit;
    gaps[i] = gaps[i - 1] + (big ? 1 : 0);
  }
  auto sig = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    (*sig)[i] = stats.normalize(series.aggregate[i]);
  }
  const std::size_t mid = (window - 1) / 2;
  std::vector<WindowSample> samples;
  samples.reserve(n - window + 1);
  for (std::size_t i = 0; i + window <= n; ++i) {
    if (gaps[i + window - 1] != gaps[i]) {
      continue;
    }
    samples.push_back({i, channel.watts[i + mid] >= threshold ? 1.0 : 0.0});
  }
  return {std::move(sig), std::move(samples), std::string(appliance), stats, window};
}

/// K disjoint contiguous blocks of `per_runner` samples. Block slots are the
/// aligned positions 0, per_runner, 2*per_runner, ...; a seeded shuffle of the
/// slots decides which runner gets which block.
inline std::vector<WindowDataset> partition(const WindowDataset& dataset, std::size_t runners, std::size_t per_runner,
                                            std::uint64_t seed) {
  if (runners == 0 || per_runner == 0) {
    throw DataError("partition: runner count and per-runner size must be positive");
  }
  if (runners * per_runner > dataset.size()) {
    throw DataError("partition: insufficient data (" + std::to_string(dataset.size()) + " windows for " +
                    std::to_string(runners) + " x " + std::to_string(per_runner) + ")");
  }
  const std::size_t slots = dataset.size() / per_runner;
  const auto order = shuffled_indices(slots, seed);
  std::vector<WindowDataset> out;
  out.reserve(runners);
  for (std::size_t k = 0; k < runners; ++k) {
    const std::size_t begin = order[k] * per_runner;
    out.push_back(dataset.range(begin, begin + per_runner));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic households

struct ApplianceProfile {
  std::string name;
  double on_threshold = 0.0;      // watts
  double on_power = 0.0;          // watts
  double mean_on_duration = 1.0;  // samples
  double mean_off_duration = 1.0; // samples
  double noise_std = 0.0;         // watts, applied while on

  void validate() const {
    if (name.empty()) {
      throw ConfigError("appliance profile needs a name");
    }
    if (!(on_threshold > 0.0)) {
      throw ConfigError(name + ": on_threshold must be > 0");
    }
    if (!(on_power > on_threshold)) {
      throw ConfigError(name + ": on_power must exceed on_threshold");
    }
    if (!(mean_on_duration >= 1.0) || !(mean_off_duration >= 1.0)) {
      throw ConfigError(name + ": mean durations must be >= 1 sample");
    }
    if (!(noise_std >= 0.0)) {
      throw ConfigError(name + ": noise_std must be >= 0");
    }
  }
};

/// Typical on/off thresholds in watts; 10 W for unknown names.
inline double default_threshold(std::string_view appliance) {
  static const std::map<std::string, double, std::less<>> table{
      {"kettle", 2000.0},      {"microwave", 200.0},    {"washing_machine", 20.0},
      {"washing machine", 20.0}, {"dishwasher", 10.0}, {"tumble_dryer", 20.0},
      {"tumble dryer", 20.0}};
  const auto it = table.find(appliance);
  return it == table.end() ? 10.0 : it->second;
}

struct SynthOptions {
  double baseline = 0.0;         // constant background load, watts
  double noise_std = 0.0;        // aggregate measurement noise, watts
  std::int64_t sample_period = 8; // seconds
};

/// Each appliance is a two-state semi-Markov chain with geometric state
/// durations (means from the profile) drawn from its own seeded stream. While
/// on it draws on_power + N(0, noise_std), clipped at 0; while off it draws 0.
/// aggregate = baseline + sum(appliances) + N(0, options.noise_std), clipped at 0.
inline LoadSeries synth_generate(std::span<const ApplianceProfile> profiles, std::size_t length,
                                 std::uint64_t seed, const SynthOptions& options = {}) {
  if (length == 0) {
    throw ConfigError("synthetic series length must be positive");
  }
  if (!(options.baseline >= 0.0) || !(options.noise_std >= 0.0) || options.sample_period <= 0) {
    throw ConfigError("invalid synthetic baseline, noise or sample period");
  }
  LoadSeries s;
  s.timestamps.resize(length);
  for (std::size_t i = 0; i < length; ++i) {
    s.timestamps[i] = static_cast<std::int64_t>(i) * options.sample_period;
  }
  s.aggregate.assign(length, options.baseline);
  for (std::size_t a = 0; a < profiles.size(); ++a) {
    const auto& p = profiles[a];
    p.validate();
    SplitMix64 rng(derive_seed(seed, {kTagSynth, a + 1}));
    const double p_on = p.mean_on_duration / (p.mean_on_duration + p.mean_off_duration);
    bool on = rng.bernoulli(p_on);
    std::vector<double> watts(length, 0.0);
    for (std::size_t i = 0; i < length; ++i) {
      if (on) {
        watts[i] = std::max(0.0, p.on_power + p.noise_std * rng.normal());
      }
      const double leave = 1.0 / (on ? p.mean_on_duration : p.mean_off_duration);
      if (rng.bernoulli(leave)) {
        on = !on;
      }
    }
    for (std::size_t i = 0; i < length; ++i) {
      s.aggregate[i] += watts[i];
    }
    s.appliances.push_back({p.name, std::move(watts)});
  }
  SplitMix64 noise(derive_seed(seed, {kTagSynth, 0}));
  for (auto& x : s.aggregate) {
    x = std::max(0.0, x + options.noise_std * noise.normal());
  }
  return s;
}

inline double on_fraction(const LoadSeries& s, std::string_view appliance, double threshold) {
  const auto& w = s.appliance(appliance).watts;
  const auto on = std::count_if(w.begin(), w.end(), [&](double x) { return x >= threshold; });
  return static_cast<double>(on) / static_cast<double>(w.size());
}

inline nlohmann::json to_json(const ApplianceProfile& p) {
  return {{"name", p.name},
          {"on_threshold", p.on_threshold},
          {"on_power", p.on_power},
          {"mean_on_duration", p.mean_on_duration},
          {"mean_off_duration", p.mean_off_duration},
          {"noise_std", p.noise_std}};
}

inline ApplianceProfile profile_from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items()) {
    static const std::vector<std::string> allowed{"name",           "on_threshold",      "on_power",
                                                  "mean_on_duration", "mean_off_duration", "noise_std"};
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("appliance profile: unknown key '" + key + "'");
    }
  }
  ApplianceProfile p;
  try {
    p.name = j.at("name").get<std::string>();
    p.on_threshold = j.contains("on_threshold") ? j.at("on_threshold").get<double>() : default_threshold(p.name);
    p.on_power = j.at("on_power").get<double>();
    p.mean_on_duration = j.at("mean_on_duration").get<double>();
    p.mean_off_duration = j.at("mean_off_duration").get<double>();
    p.noise_std = j.value("noise_std", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("appliance profile: ") + e.what());
  }
  p.validate();
  return p;
}

} // namespace fednilm
