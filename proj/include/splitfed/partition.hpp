#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitfed/loss.hpp"
#include "splitfed/model.hpp"

namespace splitfed {

class SplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The client-side front f^1 and the server-side tail f^2..f^N of one chain.
template <typename T>
struct SplitModel {
  ModelGraph<T> client_part;
  ModelGraph<T> server_part;
  std::size_t cut_index = 1;
};

// Cut-layer output a^1 as sent by a client.
template <typename T>
struct CutActivation {
  Tensor<T> tensor;  // (batch, channels, length)
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
};

// d loss / d a^1 as returned by the server.
template <typename T>
struct CutGradient {
  Tensor<T> tensor;
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
};

// Index just past the first convolution, also taking an immediately
// following ReLU onto the client.
template <typename T>
std::size_t default_cut_index(const ModelGraph<T>& model) {
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (std::holds_alternative<Conv1D>(model.layers[i])) {
      std::size_t cut = i + 1;
      if (cut < model.size() && std::holds_alternative<ReLU>(model.layers[cut])) ++cut;
      return cut < model.size() ? cut : i + 1;
    }
  }
  return 1;
}

template <typename T>
SplitModel<T> split_at(const ModelGraph<T>& model, std::size_t cut_index) {
  const std::size_t n = model.size();
  if (n < 2 || cut_index < 1 || cut_index > n - 1) {
    throw SplitError("cut index " + std::to_string(cut_index) + " outside [1, " +
                     std::to_string(n == 0 ? 0 : n - 1) + "]");
  }
  if (model.residual_depth(cut_index) != 0) {
    throw SplitError("cut index " + std::to_string(cut_index) + " falls inside a residual block");
  }
  const auto shapes = model.shapes();
  auto slice = [&](std::size_t from, std::size_t to) {
    ModelGraph<T> part;
    part.input_shape = shapes[from];
    part.layers.assign(model.layers.begin() + static_cast<std::ptrdiff_t>(from),
                       model.layers.begin() + static_cast<std::ptrdiff_t>(to));
    part.params.layers.assign(model.params.layers.begin() + static_cast<std::ptrdiff_t>(from),
                              model.params.layers.begin() + static_cast<std::ptrdiff_t>(to));
    part.buffers.layers.assign(model.buffers.layers.begin() + static_cast<std::ptrdiff_t>(from),
                               model.buffers.layers.begin() + static_cast<std::ptrdiff_t>(to));
    return part;
  };
  return SplitModel<T>{slice(0, cut_index), slice(cut_index, n), cut_index};
}

template <typename T>
ModelGraph<T> merge(const ModelGraph<T>& client_part, const ModelGraph<T>& server_part) {
  if (client_part.output_shape() != server_part.input_shape) {
    throw SplitError("client output " + shape_str(client_part.output_shape()) +
                     " does not match server input " + shape_str(server_part.input_shape));
  }
  ModelGraph<T> out = client_part;
  out.layers.insert(out.layers.end(), server_part.layers.begin(), server_part.layers.end());
  out.params.layers.insert(out.params.layers.end(), server_part.params.layers.begin(),
                           server_part.params.layers.end());
  out.buffers.layers.insert(out.buffers.layers.end(), server_part.buffers.layers.begin(),
                            server_part.buffers.layers.end());
  return out;
}

template <typename T>
struct ClientForwardResult {
  ActivationTape<T> tape;
  CutActivation<T> activation;
};

template <typename T>
ClientForwardResult<T> client_forward(ModelGraph<T>& client_part, const Tensor<T>& batch,
                                      std::uint32_t round = 0, std::uint32_t client_id = 0) {
  if (client_part.size() == 0) throw SplitError("client part is empty; the cut index must be at least 1");
  auto fwd = forward(client_part, batch, Mode::train);
  return {std::move(fwd.tape), CutActivation<T>{std::move(fwd.output), round, client_id}};
}

template <typename T>
ClientForwardResult<T> client_forward(SplitModel<T>& split, const Tensor<T>& batch) {
  return client_forward(split.client_part, batch);
}

template <typename T>
struct ServerStepResult {
  T loss{};
  GradientStore<T> grads;
  CutGradient<T> cut_grad;
  Tensor<T> logits;
};

// Runs the tail on a cut activation and back-propagates the loss to it.
// Only CutActivation crosses into the server; raw inputs never do.
template <typename T>
ServerStepResult<T> server_step(ModelGraph<T>& server_part, const CutActivation<T>& act,
                                const std::vector<int>& labels) {
  const Shape& in = server_part.input_shape;
  if (act.tensor.rank() != in.size() + 1 ||
      !std::equal(in.begin(), in.end(), act.tensor.shape().begin() + 1)) {
    throw ShapeError("cut activation shape " + shape_str(act.tensor.shape()) +
                     " does not match server input " + shape_str(in));
  }
  auto fwd = forward(server_part, act.tensor, Mode::train);
  auto loss = softmax_cross_entropy(fwd.output, labels);
  auto bwd = backward(server_part, fwd.tape, loss.grad);
  return {loss.loss, std::move(bwd.grads), CutGradient<T>{std::move(bwd.input_grad), act.round, act.client_id},
          std::move(fwd.output)};
}

template <typename T>
ServerStepResult<T> server_step(SplitModel<T>& split, const CutActivation<T>& act,
                                const std::vector<int>& labels) {
  return server_step(split.server_part, act, labels);
}

template <typename T>
GradientStore<T> client_backward(const ModelGraph<T>& client_part, const ActivationTape<T>& tape,
                                 const CutGradient<T>& cut_grad) {
  if (cut_grad.tensor.shape() != tape.output_shape) {
    throw ShapeError("cut gradient shape " + shape_str(cut_grad.tensor.shape()) +
                     " does not match cut activation " + shape_str(tape.output_shape));
  }
  return backward(client_part, tape, cut_grad.tensor).grads;
}

template <typename T>
GradientStore<T> client_backward(const SplitModel<T>& split, const ActivationTape<T>& tape,
                                 const CutGradient<T>& cut_grad) {
  return client_backward(split.client_part, tape, cut_grad);
}

}  // namespace splitfed
