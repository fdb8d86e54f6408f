#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitfed/tensor.hpp"

namespace splitfed {

template <typename T>
struct LossResult {
  T loss{};
  Tensor<T> grad;  // d(mean loss)/d(logits)
};

// Mean softmax cross-entropy over the batch, stabilized by subtracting the
// per-row maximum.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("logits must be (batch, classes), got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(batch));
  }
  LossResult<T> result{T{0}, Tensor<T>(logits.shape())};
  double total = 0;
  const T inv_batch = T{1} / static_cast<T>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::out_of_range("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
    const T* row = logits.data() + b * classes;
    const std::size_t top = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    const T mx = row[top];
    // the max term is exactly 1; log1p keeps tiny losses from rounding to 0
    T rest{0};
    for (std::size_t c = 0; c < classes; ++c)
      if (c != top) rest += std::exp(row[c] - mx);
    const T log_denom = std::log1p(rest);
    total += static_cast<double>(log_denom - (row[label] - mx));
    T* g = result.grad.data() + b * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      g[c] = std::exp(row[c] - mx - log_denom) * inv_batch;
    }
    g[label] -= inv_batch;
  }
  result.loss = static_cast<T>(total / static_cast<double>(batch));
  return result;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.data() + b * classes;
    out[b] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace splitfed
