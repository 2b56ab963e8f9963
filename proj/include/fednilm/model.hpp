#pragma once

// Forward/backward passes for the Conv1D/Dense stack described by a
// NetworkSpec. All math is double precision and single-threaded so results
// are bit-reproducible for identical inputs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fednilm/error.hpp"
#include "fednilm/network.hpp"
#include "fednilm/rng.hpp"

namespace fednilm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using Vector = Eigen::VectorXd;

/// Squared-error loss summed over the batch: sum_t (target_t - prediction_t)^2.
inline double loss(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) {
    throw ShapeError("loss: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double r = targets[i] - predictions[i];
    sum += r * r;
  }
  return sum;
}

struct BackwardResult {
  double loss = 0.0; // summed over the batch
  GradientVector grad; // gradient of the summed loss
};

class Network {
public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)), layout_(make_layout(spec_)) {}

  const NetworkSpec& spec() const noexcept { return spec_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  std::size_t window() const noexcept { return spec_.input_window; }
  std::size_t parameter_count() const noexcept { return layout_.total; }

  /// Windows are rows of a batch x input_window matrix.
  std::vector<double> forward(const ParameterVector& params, const Matrix& windows) const {
    check(params, windows);
    Trace trace;
    run_forward(params.values.data(), windows, trace);
    const Matrix& out = trace.activations.back();
    return {out.data(), out.data() + out.size()};
  }

  BackwardResult backward(const ParameterVector& params, const Matrix& windows,
                          std::span<const double> targets) const {
    check(params, windows);
    if (targets.size() != static_cast<std::size_t>(windows.rows())) {
      throw ShapeError("backward: " + std::to_string(windows.rows()) + " windows vs " +
                       std::to_string(targets.size()) + " targets");
    }
    BackwardResult result;
    result.grad.values.assign(layout_.total, 0.0);
    result.loss = run_backward(params.values.data(), windows, targets, result.grad.values.data());
    return result;
  }

  /// Training hot path: accumulates the summed-loss gradient into `grad`
  /// (length parameter_count()) and returns the summed loss. No validation.
  double backward_into(const double* params, const Matrix& windows, std::span<const double> targets,
                       double* grad) const {
    return run_backward(params, windows, targets, grad);
  }

  void check_params(const ParameterVector& params) const {
    if (params.layout != layout_) {
      throw ShapeError("parameter layout does not match network (" + std::to_string(params.size()) + " vs " +
                       std::to_string(layout_.total) + " parameters)");
    }
  }

private:
  struct Trace {
    std::vector<Matrix> activations; // [0] = input as (B*W) x 1
    std::vector<Matrix> columns;     // im2col per conv layer; empty for dense
  };

  void check(const ParameterVector& params, const Matrix& windows) const {
    check_params(params);
    if (static_cast<std::size_t>(windows.cols()) != spec_.input_window) {
      throw ShapeError("window length " + std::to_string(windows.cols()) + " != " +
                       std::to_string(spec_.input_window));
    }
    if (!windows.allFinite()) {
      throw InputError("non-finite value in input windows");
    }
  }

  static void activate(Matrix& z, Activation a) {
    if (a == Activation::relu) {
      z = z.cwiseMax(0.0);
    }
  }

  // Eigen's reduction order depends on buffer alignment, so parameters and
  // gradients go through Eigen-owned (aligned) storage. Results then do not
  // depend on where the caller's vectors happen to sit on the heap.
  Eigen::VectorXd stage(const double* params) const {
    return Eigen::Map<const Eigen::VectorXd>(params, static_cast<Eigen::Index>(layout_.total));
  }

  void run_forward(const double* params, const Matrix& windows, Trace& trace) const {
    const Eigen::VectorXd p = stage(params);
    forward_impl(p.data(), windows, trace);
  }

  double run_backward(const double* params, const Matrix& windows, std::span<const double> targets,
                      double* grad) const {
    const Eigen::VectorXd p = stage(params);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout_.total));
    const double loss = backward_impl(p.data(), windows, targets, g.data());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      grad[i] += g[i];
    }
    return loss;
  }

  void forward_impl(const double* params, const Matrix& windows, Trace& trace) const {
    const Eigen::Index batch = windows.rows();
    trace.activations.clear();
    trace.columns.clear();
    trace.activations.reserve(layout_.slots.size() + 1);
    trace.columns.resize(layout_.slots.size());
    trace.activations.push_back(ConstMatrixMap(windows.data(), batch * windows.cols(), 1));
    for (std::size_t li = 0; li < layout_.slots.size(); ++li) {
      const LayerSlot& s = layout_.slots[li];
      const Matrix& x = trace.activations.back();
      const auto n_out = static_cast<Eigen::Index>(s.out_channels);
      ConstMatrixMap weights(params + s.weight_offset, n_out, static_cast<Eigen::Index>(s.fan_in()));
      Eigen::Map<const Eigen::RowVectorXd> bias(params + s.bias_offset, n_out);
      Matrix z;
      if (s.kind == LayerKind::conv1d) {
        Matrix& col = trace.columns[li];
        im2col(x, s, batch, col);
        z.noalias() = col * weights.transpose();
      } else {
        ConstMatrixMap flat(x.data(), batch, static_cast<Eigen::Index>(s.in_features()));
        z.noalias() = flat * weights.transpose();
      }
      z.rowwise() += bias;
      activate(z, s.activation);
      trace.activations.push_back(std::move(z));
    }
  }

  // Row (b, p) of col holds input rows b*Lin+p .. b*Lin+p+k-1, which are
  // contiguous in row-major storage.
  static void im2col(const Matrix& x, const LayerSlot& s, Eigen::Index batch, Matrix& col) {
    const auto lin = static_cast<Eigen::Index>(s.in_length);
    const auto lout = static_cast<Eigen::Index>(s.out_length);
    const auto width = static_cast<Eigen::Index>(s.kernel * s.in_channels);
    const auto cin = static_cast<Eigen::Index>(s.in_channels);
    col.resize(batch * lout, width);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index p = 0; p < lout; ++p) {
        const double* src = x.data() + (b * lin + p) * cin;
        std::copy(src, src + width, col.data() + (b * lout + p) * width);
      }
    }
  }

  double backward_impl(const double* params, const Matrix& windows, std::span<const double> targets,
                       double* grad) const {
    Trace trace;
    forward_impl(params, windows, trace);
    const Eigen::Index batch = windows.rows();
    const Matrix& out = trace.activations.back();

    Matrix delta(batch, 1); // dL/d(output)
    double total = 0.0;
    for (Eigen::Index i = 0; i < batch; ++i) {
      const double r = out(i, 0) - targets[static_cast<std::size_t>(i)];
      total += r * r;
      delta(i, 0) = 2.0 * r;
    }

    for (std::size_t li = layout_.slots.size(); li-- > 0;) {
      const LayerSlot& s = layout_.slots[li];
      const Matrix& y = trace.activations[li + 1];
      const Matrix& x = trace.activations[li];
      if (s.activation == Activation::relu) {
        delta = (y.array() > 0.0).select(delta, 0.0);
      }
      const auto n_out = static_cast<Eigen::Index>(s.out_channels);
      const auto fan_in = static_cast<Eigen::Index>(s.fan_in());
      ConstMatrixMap weights(params + s.weight_offset, n_out, fan_in);
      MatrixMap g_weights(grad + s.weight_offset, n_out, fan_in);
      Eigen::Map<Eigen::RowVectorXd> g_bias(grad + s.bias_offset, n_out);
      g_bias += delta.colwise().sum();
      const bool need_input_grad = li > 0;
      if (s.kind == LayerKind::conv1d) {
        const Matrix& col = trace.columns[li];
        g_weights.noalias() += delta.transpose() * col;
        if (need_input_grad) {
          Matrix dcol;
          dcol.noalias() = delta * weights;
          Matrix dx = Matrix::Zero(x.rows(), x.cols());
          col2im_add(dcol, s, batch, dx);
          delta = std::move(dx);
        }
      } else {
        ConstMatrixMap flat(x.data(), batch, static_cast<Eigen::Index>(s.in_features()));
        g_weights.noalias() += delta.transpose() * flat;
        if (need_input_grad) {
          Matrix dflat;
          dflat.noalias() = delta * weights;
          // Reinterpret as (batch*Lin) x Cin, the layout of x.
          delta = ConstMatrixMap(dflat.data(), x.rows(), x.cols());
        }
      }
    }
    return total;
  }

  static void col2im_add(const Matrix& dcol, const LayerSlot& s, Eigen::Index batch, Matrix& dx) {
    const auto lin = static_cast<Eigen::Index>(s.in_length);
    const auto lout = static_cast<Eigen::Index>(s.out_length);
    const auto width = static_cast<Eigen::Index>(s.kernel * s.in_channels);
    const auto cin = static_cast<Eigen::Index>(s.in_channels);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index p = 0; p < lout; ++p) {
        const double* src = dcol.data() + (b * lout + p) * width;
        double* dst = dx.data() + (b * lin + p) * cin;
        for (Eigen::Index j = 0; j < width; ++j) {
          dst[j] += src[j];
        }
      }
    }
  }

  NetworkSpec spec_;
  ParameterLayout layout_;
};

/// Packs equal-length windows into a batch matrix.
inline Matrix to_batch(std::span<const std::vector<double>> windows, std::size_t width) {
  Matrix m(static_cast<Eigen::Index>(windows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].size() != width) {
      throw ShapeError("window " + std::to_string(i) + " has length " + std::to_string(windows[i].size()) +
                       ", expected " + std::to_string(width));
    }
    std::copy(windows[i].begin(), windows[i].end(), m.row(static_cast<Eigen::Index>(i)).data());
  }
  return m;
}

inline std::vector<double> forward(const NetworkSpec& spec, const ParameterVector& params,
                                   std::span<const std::vector<double>> windows) {
  const Network net(spec);
  return net.forward(params, to_batch(windows, spec.input_window));
}

inline BackwardResult backward(const NetworkSpec& spec, const ParameterVector& params,
                               std::span<const std::vector<double>> windows, std::span<const double> targets) {
  const Network net(spec);
  return net.backward(params, to_batch(windows, spec.input_window), targets);
}

/// Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases. Layers are
/// filled in order from one SplitMix64 stream seeded with `seed`.
inline ParameterVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParameterVector p(make_layout(spec));
  SplitMix64 rng(seed);
  for (const auto& s : p.layout.slots) {
    const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in()));
    for (std::size_t i = 0; i < s.weight_count; ++i) {
      p.values[s.weight_offset + i] = rng.uniform(-bound, bound);
    }
  }
  return p;
}

} // namespace fednilm
