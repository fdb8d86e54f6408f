#pragma once

#include <stdexcept>

#include "splitfed/model.hpp"

namespace splitfed {

// SGD with heavy-ball momentum: v <- mu*v + g; w <- w - lr*v.
template <typename T>
struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  ParameterSet<T> velocity;

  OptimizerState() = default;
  OptimizerState(double lr, double mu, const ParameterSet<T>& like)
      : learning_rate(lr), momentum(mu), velocity(like.zeros_like()) {
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
    if (!(mu >= 0 && mu < 1)) throw std::invalid_argument("momentum must lie in [0, 1)");
  }
};

template <typename T>
void sgd_step(ParameterSet<T>& params, const GradientStore<T>& grads, OptimizerState<T>& opt) {
  if (!params.same_shapes(grads)) throw ShapeError("gradient store does not match parameter shapes");
  if (!params.same_shapes(opt.velocity)) throw ShapeError("optimizer velocity does not match parameter shapes");
  const T lr = static_cast<T>(opt.learning_rate);
  const T mu = static_cast<T>(opt.momentum);
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    for (std::size_t k = 0; k < params.layers[li].size(); ++k) {
      auto& w = params.layers[li][k];
      auto& v = opt.velocity.layers[li][k];
      const auto& g = grads.layers[li][k];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        v[i] = mu * v[i] + g[i];
        w[i] -= lr * v[i];
      }
    }
  }
}

// Elementwise a += b * scale over matching stores.
template <typename T>
void accumulate(ParameterSet<T>& acc, const ParameterSet<T>& add, T scale = T{1}) {
  if (!acc.same_shapes(add)) throw ShapeError("cannot accumulate mismatched parameter stores");
  for (std::size_t li = 0; li < acc.layers.size(); ++li) {
    for (std::size_t k = 0; k < acc.layers[li].size(); ++k) {
      auto& a = acc.layers[li][k];
      const auto& b = add.layers[li][k];
      for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i] * scale;
    }
  }
}

}  // namespace splitfed
