#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fednilm/error.hpp"

namespace fednilm {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// 1 where prediction >= cutoff.
inline std::vector<int> classify(std::span<const double> predictions, double cutoff = 0.5) {
  std::vector<int> labels;
  labels.reserve(predictions.size());
  for (double p : predictions) {
    if (!std::isfinite(p)) {
      throw InputError("classify: non-finite prediction");
    }
    labels.push_back(p >= cutoff ? 1 : 0);
  }
  return labels;
}

inline ConfusionCounts count(std::span<const int> predicted, std::span<const int> actual) {
  if (predicted.size() != actual.size()) {
    throw ShapeError("count: " + std::to_string(predicted.size()) + " predictions vs " +
                     std::to_string(actual.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] != 0;
    const bool a = actual[i] != 0;
    if (p && a) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (a) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

/// 2TP / (2TP + FN + FP); 0 when nothing was positive in either labels or
/// predictions.
inline double f1(const ConfusionCounts& c) noexcept {
  const std::uint64_t denom = 2 * c.tp + c.fn + c.fp;
  if (denom == 0) {
    return 0.0;
  }
  return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

/// True when f1() fell back to the zero-denominator convention.
inline bool f1_undefined(const ConfusionCounts& c) noexcept { return 2 * c.tp + c.fn + c.fp == 0; }

inline ConfusionCounts merge(std::span<const ConfusionCounts> counts) {
  if (counts.empty()) {
    throw InputError("merge: no confusion counts");
  }
  ConfusionCounts total;
  for (const auto& c : counts) {
    total += c;
  }
  return total;
}

/// 100 * (candidate - baseline) / baseline.
inline double improvement_pct(double candidate_f1, double baseline_f1) {
  if (baseline_f1 == 0.0) {
    throw InputError("improvement_pct: baseline F1 is zero");
  }
  return 100.0 * (candidate_f1 - baseline_f1) / baseline_f1;
}

inline nlohmann::json to_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

inline ConfusionCounts counts_from_json(const nlohmann::json& j) {
  return {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("fn").get<std::uint64_t>(),
          j.value("tn", std::uint64_t{0})};
}

} // namespace fednilm
