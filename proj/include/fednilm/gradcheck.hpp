#pragma once

// Central finite-difference verification of Network::backward.
//
// The oracle evaluates the network with its own naive loop implementation
// (no im2col, no Eigen), so it shares no code path with the analytic
// gradient beyond the parameter layout. Perturbing one parameter only changes
// one output channel of its layer; the oracle recomputes that channel and
// every later layer, which keeps a full check of a 45k-parameter network in
// the sub-second range.
//
// The network is piecewise linear in any single parameter and the loss is
// quadratic in the output, so the central difference is exact up to rounding
// unless a ReLU changes state inside [theta - h, theta + h]. Such components
// are reported as kinks and excluded from the error statistic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fednilm/model.hpp"
#include "fednilm/network.hpp"

namespace fednilm {

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t kinks = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with a floor on the denominator so that components that are
/// zero up to rounding compare absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

class FiniteDifferenceOracle {
public:
  FiniteDifferenceOracle(const ParameterLayout& layout, std::vector<double> params, const Matrix& windows,
                         std::vector<double> targets)
      : layout_(layout), params_(std::move(params)), targets_(std::move(targets)),
        batch_(static_cast<std::size_t>(windows.rows())) {
    input_.assign(windows.data(), windows.data() + windows.size());
    z_.resize(layout_.slots.size());
    a_.resize(layout_.slots.size());
    for (std::size_t l = 0; l < layout_.slots.size(); ++l) {
      eval_layer(l, l == 0 ? input_ : a_[l - 1], z_[l], a_[l], kAllChannels);
    }
  }

  double loss() const { return sum_sq(a_.back()); }

  struct Difference {
    double value = 0.0;
    bool kink = false;
  };

  /// (L(theta_i + h) - L(theta_i - h)) / 2h.
  Difference central_difference(std::size_t index, double h) {
    const auto l = layer_of(index);
    const LayerSlot& s = layout_.slots[l];
    const std::size_t channel = index < s.bias_offset ? (index - s.weight_offset) / s.fan_in()
                                                      : index - s.bias_offset;
    const double original = params_[index];
    params_[index] = original + h;
    const Side plus = perturbed(l, channel);
    params_[index] = original - h;
    const Side minus = perturbed(l, channel);
    params_[index] = original;

    Difference d;
    d.kink = plus.pattern != minus.pattern;
    double acc = 0.0;
    for (std::size_t b = 0; b < batch_; ++b) {
      const double op = plus.out[b];
      const double om = minus.out[b];
      acc += (op - om) * (op + om - 2.0 * targets_[b]);
    }
    d.value = acc / (2.0 * h);
    return d;
  }

private:
  static constexpr std::size_t kAllChannels = static_cast<std::size_t>(-1);

  struct Side {
    std::vector<double> out;
    std::vector<bool> pattern; // relu states of every recomputed unit
  };

  std::size_t layer_of(std::size_t index) const {
    for (std::size_t l = 0; l < layout_.slots.size(); ++l) {
      const auto& s = layout_.slots[l];
      if (index < s.bias_offset + s.bias_count) {
        return l;
      }
    }
    throw ShapeError("parameter index out of range");
  }

  double sum_sq(const std::vector<double>& out) const {
    double sum = 0.0;
    for (std::size_t b = 0; b < batch_; ++b) {
      const double r = targets_[b] - out[b];
      sum += r * r;
    }
    return sum;
  }

  // Activations are [batch][position][channel].
  void eval_layer(std::size_t l, const std::vector<double>& in, std::vector<double>& z, std::vector<double>& a,
                  std::size_t only_channel) const {
    const LayerSlot& s = layout_.slots[l];
    const std::size_t out_size = s.out_length * s.out_channels;
    if (only_channel == kAllChannels) {
      z.assign(batch_ * out_size, 0.0);
      a.assign(batch_ * out_size, 0.0);
    }
    const double* w = params_.data() + s.weight_offset;
    const double* bias = params_.data() + s.bias_offset;
    const std::size_t in_size = s.in_features();
    for (std::size_t b = 0; b < batch_; ++b) {
      const double* x = in.data() + b * in_size;
      for (std::size_t p = 0; p < s.out_length; ++p) {
        for (std::size_t f = 0; f < s.out_channels; ++f) {
          if (only_channel != kAllChannels && f != only_channel) {
            continue;
          }
          double acc = bias[f];
          if (s.kind == LayerKind::conv1d) {
            for (std::size_t j = 0; j < s.kernel; ++j) {
              for (std::size_t c = 0; c < s.in_channels; ++c) {
                acc += w[(f * s.kernel + j) * s.in_channels + c] * x[(p + j) * s.in_channels + c];
              }
            }
          } else {
            for (std::size_t i = 0; i < in_size; ++i) {
              acc += w[f * in_size + i] * x[i];
            }
          }
          const std::size_t k = b * out_size + p * s.out_channels + f;
          z[k] = acc;
          a[k] = s.activation == Activation::relu ? std::max(acc, 0.0) : acc;
        }
      }
    }
  }

  Side perturbed(std::size_t l, std::size_t channel) const {
    Side side;
    std::vector<double> z = z_[l];
    std::vector<double> a = a_[l];
    eval_layer(l, l == 0 ? input_ : a_[l - 1], z, a, channel);
    record_pattern(l, z, channel, side.pattern);
    for (std::size_t next = l + 1; next < layout_.slots.size(); ++next) {
      std::vector<double> zn;
      std::vector<double> an;
      eval_layer(next, a, zn, an, kAllChannels);
      record_pattern(next, zn, kAllChannels, side.pattern);
      a = std::move(an);
    }
    side.out = std::move(a);
    return side;
  }

  void record_pattern(std::size_t l, const std::vector<double>& z, std::size_t channel,
                      std::vector<bool>& pattern) const {
    const LayerSlot& s = layout_.slots[l];
    if (s.activation != Activation::relu) {
      return;
    }
    for (std::size_t k = 0; k < z.size(); ++k) {
      if (channel == kAllChannels || k % s.out_channels == channel) {
        pattern.push_back(z[k] > 0.0);
      }
    }
  }

  const ParameterLayout& layout_;
  std::vector<double> params_;
  std::vector<double> targets_;
  std::size_t batch_;
  std::vector<double> input_;
  std::vector<std::vector<double>> z_;
  std::vector<std::vector<double>> a_;
};

/// Compares backward() with central differences over every parameter.
inline GradCheckReport check_gradient(const Network& net, const ParameterVector& params, const Matrix& windows,
                                      std::span<const double> targets, double h = 1e-5) {
  const BackwardResult analytic = net.backward(params, windows, targets);
  FiniteDifferenceOracle oracle(net.layout(), params.values, windows, {targets.begin(), targets.end()});
  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto d = oracle.central_difference(i, h);
    if (d.kink) {
      ++report.kinks;
      continue;
    }
    ++report.checked;
    const double err = relative_error(analytic.grad.values[i], d.value);
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
      report.worst_analytic = analytic.grad.values[i];
      report.worst_numeric = d.value;
    }
  }
  return report;
}

/// Random batch of standard-normal windows and {0,1} targets.
struct RandomBatch {
  Matrix windows;
  std::vector<double> targets;
};

inline RandomBatch random_batch(std::size_t batch, std::size_t window, std::uint64_t seed) {
  SplitMix64 rng(seed);
  RandomBatch rb{Matrix(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(window)), {}};
  for (Eigen::Index i = 0; i < rb.windows.size(); ++i) {
    rb.windows.data()[i] = rng.normal();
  }
  for (std::size_t b = 0; b < batch; ++b) {
    rb.targets.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
  }
  return rb;
}

} // namespace fednilm
