#pragma once

// Network description and the flat parameter layout derived from it.
//
// Activations flow between layers as row-major (batch * length) x channels
// matrices. The network input is a single channel of `input_window` samples.
// A Conv1D layer is valid-mode, stride 1. A Dense layer flattens its input
// position-major (feature index = position * channels + channel) and emits a
// length-1 signal with `units` channels.
//
// Parameter storage per layer: weights, then biases.
//   Conv1D weights: [filters][kernel][in_channels]
//   Dense weights:  [units][in_features]

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fednilm/error.hpp"

namespace fednilm {

enum class Activation { relu, linear };

inline std::string_view to_string(Activation a) {
  return a == Activation::relu ? "relu" : "linear";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") {
    return Activation::relu;
  }
  if (s == "linear") {
    return Activation::linear;
  }
  throw SpecError("unknown activation '" + std::string(s) + "'");
}

struct Conv1D {
  std::size_t filters = 1;
  std::size_t kernel = 1;
  Activation activation = Activation::relu;
  friend bool operator==(const Conv1D&, const Conv1D&) = default;
};

struct Dense {
  std::size_t units = 1;
  Activation activation = Activation::relu;
  friend bool operator==(const Dense&, const Dense&) = default;
};

using LayerSpec = std::variant<Conv1D, Dense>;

struct NetworkSpec {
  std::size_t input_window = 0;
  std::vector<LayerSpec> layers;
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class LayerKind : std::uint8_t { conv1d = 0, dense = 1 };

/// Geometry and parameter offsets of one layer.
struct LayerSlot {
  LayerKind kind = LayerKind::dense;
  Activation activation = Activation::linear;
  std::size_t in_length = 0;
  std::size_t in_channels = 0;
  std::size_t out_length = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0; // conv only
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;

  std::size_t in_features() const noexcept { return in_length * in_channels; }
  /// Inputs feeding one output unit.
  std::size_t fan_in() const noexcept {
    return kind == LayerKind::conv1d ? kernel * in_channels : in_features();
  }
  friend bool operator==(const LayerSlot&, const LayerSlot&) = default;
};

struct ParameterLayout {
  std::size_t input_window = 0;
  std::vector<LayerSlot> slots;
  std::size_t total = 0;
  friend bool operator==(const ParameterLayout&, const ParameterLayout&) = default;
};

/// Validates the spec and computes offsets. Throws SpecError.
inline ParameterLayout make_layout(const NetworkSpec& spec) {
  if (spec.input_window == 0) {
    throw SpecError("input_window must be positive");
  }
  if (spec.layers.empty()) {
    throw SpecError("network has no layers");
  }
  ParameterLayout layout;
  layout.input_window = spec.input_window;
  std::size_t length = spec.input_window;
  std::size_t channels = 1;
  bool seen_dense = false;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerSlot slot;
    slot.in_length = length;
    slot.in_channels = channels;
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (const auto* conv = std::get_if<Conv1D>(&spec.layers[i])) {
      if (seen_dense) {
        throw SpecError(where + "conv1d cannot follow a dense layer");
      }
      if (conv->filters == 0 || conv->kernel == 0) {
        throw SpecError(where + "filters and kernel must be positive");
      }
      if (conv->kernel > length) {
        throw SpecError(where + "kernel " + std::to_string(conv->kernel) +
                        " longer than input length " + std::to_string(length));
      }
      slot.kind = LayerKind::conv1d;
      slot.activation = conv->activation;
      slot.kernel = conv->kernel;
      slot.out_length = length - conv->kernel + 1;
      slot.out_channels = conv->filters;
      slot.weight_count = conv->filters * conv->kernel * channels;
      slot.bias_count = conv->filters;
    } else {
      const auto& dense = std::get<Dense>(spec.layers[i]);
      if (dense.units == 0) {
        throw SpecError(where + "units must be positive");
      }
      seen_dense = true;
      slot.kind = LayerKind::dense;
      slot.activation = dense.activation;
      slot.out_length = 1;
      slot.out_channels = dense.units;
      slot.weight_count = dense.units * slot.in_features();
      slot.bias_count = dense.units;
    }
    slot.weight_offset = offset;
    slot.bias_offset = offset + slot.weight_count;
    offset = slot.bias_offset + slot.bias_count;
    length = slot.out_length;
    channels = slot.out_channels;
    layout.slots.push_back(slot);
  }
  if (length * channels != 1) {
    throw SpecError("final layer must produce exactly one output, got " +
                    std::to_string(length * channels));
  }
  layout.total = offset;
  return layout;
}

struct ParameterVector {
  std::vector<double> values;
  ParameterLayout layout;

  ParameterVector() = default;
  explicit ParameterVector(ParameterLayout l) : values(l.total, 0.0), layout(std::move(l)) {}
  ParameterVector(ParameterLayout l, std::vector<double> v) : values(std::move(v)), layout(std::move(l)) {
    if (values.size() != layout.total) {
      throw ShapeError("parameter count " + std::to_string(values.size()) +
                       " does not match layout total " + std::to_string(layout.total));
    }
  }

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;
};

struct GradientVector {
  std::vector<double> values;
  std::size_t size() const noexcept { return values.size(); }
};

/// One layer's weight and bias arrays, unflattened.
struct LayerTensors {
  std::vector<double> weights;
  std::vector<double> biases;
  friend bool operator==(const LayerTensors&, const LayerTensors&) = default;
};

inline std::vector<LayerTensors> unflatten(const ParameterVector& p) {
  std::vector<LayerTensors> out;
  out.reserve(p.layout.slots.size());
  for (const auto& s : p.layout.slots) {
    const auto* base = p.values.data();
    out.push_back({{base + s.weight_offset, base + s.weight_offset + s.weight_count},
                   {base + s.bias_offset, base + s.bias_offset + s.bias_count}});
  }
  return out;
}

inline ParameterVector flatten(const ParameterLayout& layout, const std::vector<LayerTensors>& tensors) {
  if (tensors.size() != layout.slots.size()) {
    throw ShapeError("layer count mismatch");
  }
  ParameterVector p(layout);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& s = layout.slots[i];
    if (tensors[i].weights.size() != s.weight_count || tensors[i].biases.size() != s.bias_count) {
      throw ShapeError("tensor shape mismatch at layer " + std::to_string(i));
    }
    std::copy(tensors[i].weights.begin(), tensors[i].weights.end(), p.values.begin() + s.weight_offset);
    std::copy(tensors[i].biases.begin(), tensors[i].biases.end(), p.values.begin() + s.bias_offset);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Presets

/// Five conv layers + Dense(1024) on a 599-sample window.
inline NetworkSpec paper_like_spec() {
  using A = Activation;
  return {599,
          {Conv1D{30, 10, A::relu}, Conv1D{30, 8, A::relu}, Conv1D{40, 6, A::relu}, Conv1D{50, 5, A::relu},
           Conv1D{50, 5, A::relu}, Dense{1024, A::relu}, Dense{1, A::linear}}};
}

/// Small network for CPU-scale experiments.
inline NetworkSpec desk_spec() {
  using A = Activation;
  return {99, {Conv1D{8, 9, A::relu}, Conv1D{8, 5, A::relu}, Dense{64, A::relu}, Dense{1, A::linear}}};
}

// ---------------------------------------------------------------------------
// JSON: {"input_window": 599, "layers": [{"type":"conv1d","filters":30,"kernel":10,"activation":"relu"}, ...]}

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    if (const auto* c = std::get_if<Conv1D>(&layer)) {
      layers.push_back({{"type", "conv1d"},
                        {"filters", c->filters},
                        {"kernel", c->kernel},
                        {"activation", to_string(c->activation)}});
    } else {
      const auto& d = std::get<Dense>(layer);
      layers.push_back({{"type", "dense"}, {"units", d.units}, {"activation", to_string(d.activation)}});
    }
  }
  return {{"input_window", spec.input_window}, {"layers", layers}};
}

namespace detail {

inline std::size_t positive_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_integer() || j.at(key).get<long long>() <= 0) {
    throw SpecError(std::string("field '") + key + "' must be a positive integer");
  }
  return j.at(key).get<std::size_t>();
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                           const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) {
      ok = ok || key == a;
    }
    if (!ok) {
      throw SpecError(where + ": unknown key '" + key + "'");
    }
  }
}

} // namespace detail

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw SpecError("network spec must be a JSON object");
  }
  detail::reject_unknown(j, {"input_window", "layers"}, "network spec");
  NetworkSpec spec;
  spec.input_window = detail::positive_field(j, "input_window");
  if (!j.contains("layers") || !j.at("layers").is_array()) {
    throw SpecError("network spec needs a 'layers' array");
  }
  for (const auto& l : j.at("layers")) {
    const std::string type = l.value("type", "");
    const Activation act = activation_from_string(l.value("activation", "relu"));
    if (type == "conv1d") {
      detail::reject_unknown(l, {"type", "filters", "kernel", "activation"}, "conv1d layer");
      spec.layers.push_back(Conv1D{detail::positive_field(l, "filters"), detail::positive_field(l, "kernel"), act});
    } else if (type == "dense") {
      detail::reject_unknown(l, {"type", "units", "activation"}, "dense layer");
      spec.layers.push_back(Dense{detail::positive_field(l, "units"), act});
    } else {
      throw SpecError("unknown layer type '" + type + "'");
    }
  }
  make_layout(spec);
  return spec;
}

/// Accepts a preset name ("desk", "paper") or an inline spec object.
inline NetworkSpec resolve_network_spec(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "desk") {
      return desk_spec();
    }
    if (name == "paper") {
      return paper_like_spec();
    }
    std::ifstream in{std::filesystem::path(name)};
    if (!in) {
      throw SpecError("unknown network preset or unreadable file '" + name + "'");
    }
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw SpecError("cannot parse network spec '" + name + "': " + e.what());
    }
    return network_spec_from_json(doc);
  }
  return network_spec_from_json(j);
}

} // namespace fednilm
