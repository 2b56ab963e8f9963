#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fednilm/error.hpp"
#include "fednilm/network.hpp"

namespace fednilm {

enum class OptimizerKind { adam, sgd };

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void reset() {
    std::fill(m.begin(), m.end(), 0.0);
    std::fill(v.begin(), v.end(), 0.0);
    step_count = 0;
  }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (double x : values) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(what) + " produced a non-finite parameter");
    }
  }
}

} // namespace detail

/// In-place w -= lr * g.
inline void sgd_update(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != grad.size()) {
    throw ShapeError("sgd: " + std::to_string(params.size()) + " parameters vs " + std::to_string(grad.size()) +
                     " gradient components");
  }
  if (!(lr >= 0.0)) {
    throw InputError("sgd: learning rate must be >= 0");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] -= lr * grad[i];
  }
  detail::require_finite(params, "sgd step");
}

/// In-place bias-corrected Adam update.
inline void adam_update(std::span<double> params, std::span<const double> grad, AdamState& state, double lr) {
  if (params.size() != grad.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam: parameter, gradient and moment lengths differ");
  }
  state.step_count += 1;
  const auto t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
  detail::require_finite(params, "adam step");
}

inline ParameterVector sgd_step(ParameterVector params, const GradientVector& grad, double lr) {
  sgd_update(params.values, grad.values, lr);
  return params;
}

struct AdamResult {
  ParameterVector params;
  AdamState state;
};

inline AdamResult adam_step(ParameterVector params, const GradientVector& grad, AdamState state, double lr) {
  adam_update(params.values, grad.values, state, lr);
  return {std::move(params), std::move(state)};
}

} // namespace fednilm
