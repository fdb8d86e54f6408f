#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "splitfed/tensor.hpp"

namespace splitfed {

struct Conv1D {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  // Only "same" padding is supported: output length = ceil(length / stride).
  friend bool operator==(const Conv1D&, const Conv1D&) = default;
};

struct BatchNorm1D {
  std::size_t channels = 1;
  double epsilon = 1e-5;
  // Weight of the previous running value in the running-average update.
  double momentum = 0.9;
  friend bool operator==(const BatchNorm1D&, const BatchNorm1D&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct MaxPool1D {
  std::size_t window = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPool1D&, const MaxPool1D&) = default;
};

struct GlobalAveragePool1D {
  friend bool operator==(const GlobalAveragePool1D&, const GlobalAveragePool1D&) = default;
};

struct Dense {
  std::size_t in_features = 1;
  std::size_t out_features = 1;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct ResidualStart {
  friend bool operator==(const ResidualStart&, const ResidualStart&) = default;
};

struct ResidualEnd {
  friend bool operator==(const ResidualEnd&, const ResidualEnd&) = default;
};

using LayerSpec = std::variant<Conv1D, BatchNorm1D, ReLU, MaxPool1D, GlobalAveragePool1D, Dense,
                               ResidualStart, ResidualEnd>;

inline std::string layer_name(const LayerSpec& spec) {
  struct Visitor {
    std::string operator()(const Conv1D&) const { return "conv1d"; }
    std::string operator()(const BatchNorm1D&) const { return "batchnorm1d"; }
    std::string operator()(const ReLU&) const { return "relu"; }
    std::string operator()(const MaxPool1D&) const { return "maxpool1d"; }
    std::string operator()(const GlobalAveragePool1D&) const { return "globalavgpool1d"; }
    std::string operator()(const Dense&) const { return "dense"; }
    std::string operator()(const ResidualStart&) const { return "residual_start"; }
    std::string operator()(const ResidualEnd&) const { return "residual_end"; }
  };
  return std::visit(Visitor{}, spec);
}

inline std::size_t conv_out_length(std::size_t length, std::size_t stride) {
  return (length + stride - 1) / stride;
}

// Left padding for "same" convolution; the remainder goes on the right.
inline std::size_t conv_pad_left(std::size_t length, std::size_t kernel, std::size_t stride) {
  const std::size_t out = conv_out_length(length, stride);
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > length ? needed - length : 0;
  return total / 2;
}

// Per-sample output shape of a layer, or ShapeError.
inline Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
  auto fail = [&](const std::string& why) -> ShapeError {
    return ShapeError(layer_name(spec) + ": " + why + " (input " + shape_str(in) + ")");
  };
  if (auto* conv = std::get_if<Conv1D>(&spec)) {
    if (in.size() != 2) throw fail("expects (channels, length) input");
    if (in[0] != conv->in_channels) throw fail("channel mismatch");
    if (conv->kernel == 0 || conv->stride == 0) throw fail("kernel and stride must be positive");
    return {conv->out_channels, conv_out_length(in[1], conv->stride)};
  }
  if (auto* bn = std::get_if<BatchNorm1D>(&spec)) {
    if (in.empty() || in[0] != bn->channels) throw fail("channel mismatch");
    return in;
  }
  if (auto* pool = std::get_if<MaxPool1D>(&spec)) {
    if (in.size() != 2) throw fail("expects (channels, length) input");
    if (pool->window == 0 || pool->stride == 0) throw fail("window and stride must be positive");
    if (in[1] < pool->window) throw fail("input shorter than pooling window");
    return {in[0], (in[1] - pool->window) / pool->stride + 1};
  }
  if (std::holds_alternative<GlobalAveragePool1D>(spec)) {
    if (in.size() != 2) throw fail("expects (channels, length) input");
    return {in[0]};
  }
  if (auto* dense = std::get_if<Dense>(&spec)) {
    if (numel(in) != dense->in_features) throw fail("feature count mismatch");
    return {dense->out_features};
  }
  return in;
}

}  // namespace splitfed
