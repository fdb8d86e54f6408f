#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "splitfed/layers.hpp"
#include "splitfed/tensor.hpp"

namespace splitfed {

enum class Mode { train, eval };

// Per-layer list of tensors. Layers without parameters hold an empty list.
template <typename T>
struct ParameterSet {
  std::vector<std::vector<Tensor<T>>> layers;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers) {
      for (const auto& t : layer) n += t.numel();
    }
    return n;
  }

  bool same_shapes(const ParameterSet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].size() != other.layers[i].size()) return false;
      for (std::size_t j = 0; j < layers[i].size(); ++j) {
        if (layers[i][j].shape() != other.layers[i][j].shape()) return false;
      }
    }
    return true;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    out.layers.reserve(layers.size());
    for (const auto& layer : layers) {
      auto& dst = out.layers.emplace_back();
      for (const auto& t : layer) dst.emplace_back(t.shape());
    }
    return out;
  }

  // Row-major concatenation of every tensor, layer by layer.
  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(scalar_count());
    for (const auto& layer : layers) {
      for (const auto& t : layer) flat.insert(flat.end(), t.values().begin(), t.values().end());
    }
    return flat;
  }

  void unflatten(const std::vector<T>& flat) {
    if (flat.size() != scalar_count()) {
      throw ShapeError("flat parameter blob has " + std::to_string(flat.size()) +
                       " values, expected " + std::to_string(scalar_count()));
    }
    std::size_t pos = 0;
    for (auto& layer : layers) {
      for (auto& t : layer) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.numel(), t.data());
        pos += t.numel();
      }
    }
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& layer : layers) {
      auto& dst = out.layers.emplace_back();
      for (const auto& t : layer) dst.push_back(t.template cast<U>());
    }
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.layers == b.layers; }
};

template <typename T>
using GradientStore = ParameterSet<T>;

// An ordered chain of layers with trainable parameters and batch-norm
// running statistics (buffers).
template <typename T>
struct ModelGraph {
  Shape input_shape;  // per sample, e.g. {channels, length}
  std::vector<LayerSpec> layers;
  ParameterSet<T> params;
  ParameterSet<T> buffers;

  std::size_t size() const { return layers.size(); }

  // Per-sample shapes after each layer; element 0 is the input shape.
  std::vector<Shape> shapes() const {
    std::vector<Shape> out{input_shape};
    std::vector<Shape> skips;
    for (const auto& spec : layers) {
      const Shape& cur = out.back();
      if (std::holds_alternative<ResidualStart>(spec)) {
        skips.push_back(cur);
      } else if (std::holds_alternative<ResidualEnd>(spec)) {
        if (skips.empty()) throw ShapeError("residual_end without matching residual_start");
        if (skips.back() != cur) {
          throw ShapeError("residual skip shape " + shape_str(skips.back()) +
                           " does not match trunk shape " + shape_str(cur));
        }
        skips.pop_back();
      }
      out.push_back(layer_output_shape(spec, cur));
    }
    if (!skips.empty()) throw ShapeError("unterminated residual block");
    return out;
  }

  Shape output_shape() const { return shapes().back(); }

  // Residual nesting depth just before layer `index` (index == size() allowed).
  std::size_t residual_depth(std::size_t index) const {
    std::size_t depth = 0;
    for (std::size_t i = 0; i < index && i < layers.size(); ++i) {
      if (std::holds_alternative<ResidualStart>(layers[i])) ++depth;
      if (std::holds_alternative<ResidualEnd>(layers[i]) && depth > 0) --depth;
    }
    return depth;
  }

  std::size_t param_count() const { return params.scalar_count(); }
  std::size_t buffer_count() const { return buffers.scalar_count(); }

  template <typename U>
  ModelGraph<U> cast() const {
    return ModelGraph<U>{input_shape, layers, params.template cast<U>(), buffers.template cast<U>()};
  }
};

namespace detail {

inline void allocate_layer(const LayerSpec& spec, std::vector<Shape>& params, std::vector<Shape>& buffers) {
  if (auto* conv = std::get_if<Conv1D>(&spec)) {
    params = {{conv->out_channels, conv->in_channels, conv->kernel}, {conv->out_channels}};
  } else if (auto* bn = std::get_if<BatchNorm1D>(&spec)) {
    params = {{bn->channels}, {bn->channels}};
    buffers = {{bn->channels}, {bn->channels}};
  } else if (auto* dense = std::get_if<Dense>(&spec)) {
    params = {{dense->out_features, dense->in_features}, {dense->out_features}};
  }
}

}  // namespace detail

// Builds a model and initializes it: He-uniform weights, zero biases,
// unit batch-norm scale, zero shift, running variance 1.
template <typename T = float>
ModelGraph<T> make_model(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed) {
  ModelGraph<T> model{std::move(input_shape), std::move(layers), {}, {}};
  model.shapes();  // validates the chain
  std::mt19937_64 rng(seed);
  for (const auto& spec : model.layers) {
    std::vector<Shape> pshapes, bshapes;
    detail::allocate_layer(spec, pshapes, bshapes);
    auto& params = model.params.layers.emplace_back();
    auto& buffers = model.buffers.layers.emplace_back();
    for (const auto& s : pshapes) params.emplace_back(s);
    for (const auto& s : bshapes) buffers.emplace_back(s);

    std::size_t fan_in = 0;
    if (auto* conv = std::get_if<Conv1D>(&spec)) fan_in = conv->in_channels * conv->kernel;
    if (auto* dense = std::get_if<Dense>(&spec)) fan_in = dense->in_features;
    if (fan_in > 0) {
      std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / static_cast<double>(fan_in)),
                                                  std::sqrt(6.0 / static_cast<double>(fan_in)));
      for (auto& w : params[0].values()) w = static_cast<T>(dist(rng));
    }
    if (std::holds_alternative<BatchNorm1D>(spec)) {
      params[0].fill(T{1});
      buffers[1].fill(T{1});
    }
  }
  return model;
}

// Everything backward needs from a train-mode forward pass.
template <typename T>
struct ActivationTape {
  std::size_t layer_count = 0;
  Mode mode = Mode::train;
  std::vector<Tensor<T>> inputs;  // input to each layer
  std::vector<Tensor<T>> normalized;  // batch-norm x-hat, per layer (empty otherwise)
  std::vector<std::vector<T>> inv_std;  // batch-norm 1/sqrt(var+eps)
  std::vector<std::vector<std::size_t>> argmax;  // max-pool source positions
  Shape output_shape;
};

template <typename T>
struct ForwardResult {
  ActivationTape<T> tape;
  Tensor<T> output;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unrolls "same"-padded windows into a (cin*kernel, batch*lout) matrix.
template <typename T>
RowMatrix<T> im2col(const Conv1D& spec, const Tensor<T>& x, std::size_t lout) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(conv_pad_left(len, spec.kernel, spec.stride));
  const auto slen = static_cast<std::ptrdiff_t>(len);
  RowMatrix<T> col = RowMatrix<T>::Zero(static_cast<Eigen::Index>(cin * spec.kernel),
                                        static_cast<Eigen::Index>(batch * lout));
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t j = 0; j < spec.kernel; ++j) {
      T* row = col.data() + (c * spec.kernel + j) * batch * lout;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* xc = &x.at(b, c, 0);
        T* dst = row + b * lout;
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * spec.stride + j) - pad;
          if (pos >= 0 && pos < slen) dst[t] = xc[pos];
        }
      }
    }
  }
  return col;
}

template <typename T>
Tensor<T> conv_forward(const Conv1D& spec, const Tensor<T>& x, const std::vector<Tensor<T>>& p) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t lout = conv_out_length(len, spec.stride);
  const RowMatrix<T> col = im2col(spec, x, lout);
  Eigen::Map<const RowMatrix<T>> w(p[0].data(), static_cast<Eigen::Index>(spec.out_channels),
                                   static_cast<Eigen::Index>(cin * spec.kernel));
  const RowMatrix<T> out = w * col;  // (cout, batch*lout)
  Tensor<T> y({batch, spec.out_channels, lout});
  for (std::size_t o = 0; o < spec.out_channels; ++o) {
    const T* src = out.data() + o * batch * lout;
    const T bias = p[1][o];
    for (std::size_t b = 0; b < batch; ++b) {
      T* dst = &y.at(b, o, 0);
      for (std::size_t t = 0; t < lout; ++t) dst[t] = src[b * lout + t] + bias;
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv_backward(const Conv1D& spec, const Tensor<T>& x, const std::vector<Tensor<T>>& p,
                        const Tensor<T>& dy, std::vector<Tensor<T>>& g) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t lout = dy.dim(2);
  const auto cout = static_cast<Eigen::Index>(spec.out_channels);
  const auto rows = static_cast<Eigen::Index>(cin * spec.kernel);
  RowMatrix<T> dout(cout, static_cast<Eigen::Index>(batch * lout));
  for (std::size_t o = 0; o < spec.out_channels; ++o) {
    T* dst = dout.data() + o * batch * lout;
    T bsum{0};
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = &dy.at(b, o, 0);
      for (std::size_t t = 0; t < lout; ++t) {
        dst[b * lout + t] = src[t];
        bsum += src[t];
      }
    }
    g[1][o] += bsum;
  }
  const RowMatrix<T> col = im2col(spec, x, lout);
  Eigen::Map<RowMatrix<T>> dw(g[0].data(), cout, rows);
  dw.noalias() += dout * col.transpose();
  Eigen::Map<const RowMatrix<T>> w(p[0].data(), cout, rows);
  const RowMatrix<T> dcol = w.transpose() * dout;

  Tensor<T> dx(x.shape());
  const auto pad = static_cast<std::ptrdiff_t>(conv_pad_left(len, spec.kernel, spec.stride));
  const auto slen = static_cast<std::ptrdiff_t>(len);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t j = 0; j < spec.kernel; ++j) {
      const T* row = dcol.data() + (c * spec.kernel + j) * batch * lout;
      for (std::size_t b = 0; b < batch; ++b) {
        T* dxc = &dx.at(b, c, 0);
        const T* src = row + b * lout;
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * spec.stride + j) - pad;
          if (pos >= 0 && pos < slen) dxc[pos] += src[t];
        }
      }
    }
  }
  return dx;
}

// Views any (batch, channels, ...) tensor as (batch, channels, rest).
inline void bn_dims(const Shape& s, std::size_t& batch, std::size_t& channels, std::size_t& len) {
  batch = s[0];
  channels = s.size() > 1 ? s[1] : 1;
  len = 1;
  for (std::size_t i = 2; i < s.size(); ++i) len *= s[i];
}

}  // namespace detail

namespace detail {

// `running` receives batch-norm running-statistic updates in train mode.
template <typename T>
ForwardResult<T> forward_impl(const ModelGraph<T>& model, ParameterSet<T>* running_stats,
                              const Tensor<T>& batch, Mode mode) {
  if (batch.rank() != model.input_shape.size() + 1 || batch.rank() < 1 ||
      !std::equal(model.input_shape.begin(), model.input_shape.end(), batch.shape().begin() + 1)) {
    throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match model input " +
                     shape_str(model.input_shape));
  }
  if (model.params.layers.size() != model.layers.size() ||
      model.buffers.layers.size() != model.layers.size()) {
    throw ShapeError("model parameter store does not match its layer list");
  }
  ForwardResult<T> result;
  auto& tape = result.tape;
  tape.layer_count = model.size();
  tape.mode = mode;
  tape.inputs.reserve(model.size());
  tape.normalized.resize(model.size());
  tape.inv_std.resize(model.size());
  tape.argmax.resize(model.size());
  std::vector<Tensor<T>> skips;

  Tensor<T> x = batch;
  const std::size_t bsz = batch.dim(0);
  for (std::size_t li = 0; li < model.size(); ++li) {
    const LayerSpec& spec = model.layers[li];
    auto& p = model.params.layers[li];
    Tensor<T> y;
    if (auto* conv = std::get_if<Conv1D>(&spec)) {
      if (x.rank() != 3 || x.dim(1) != conv->in_channels) {
        throw ShapeError("conv1d input shape " + shape_str(x.shape()));
      }
      y = detail::conv_forward(*conv, x, p);
    } else if (auto* bn = std::get_if<BatchNorm1D>(&spec)) {
      std::size_t nb, nc, nl;
      detail::bn_dims(x.shape(), nb, nc, nl);
      y = Tensor<T>(x.shape());
      if (mode == Mode::train) {
        auto& running = running_stats->layers[li];
        Tensor<T> xhat(x.shape());
        std::vector<T> inv(nc);
        const double n = static_cast<double>(nb * nl);
        for (std::size_t c = 0; c < nc; ++c) {
          double sum = 0;
          for (std::size_t b = 0; b < nb; ++b) {
            const T* xs = x.data() + (b * nc + c) * nl;
            for (std::size_t l = 0; l < nl; ++l) sum += xs[l];
          }
          const double mean = sum / n;
          double sq = 0;
          for (std::size_t b = 0; b < nb; ++b) {
            const T* xs = x.data() + (b * nc + c) * nl;
            for (std::size_t l = 0; l < nl; ++l) {
              const double d = static_cast<double>(xs[l]) - mean;
              sq += d * d;
            }
          }
          const double var = sq / n;
          const double istd = 1.0 / std::sqrt(var + bn->epsilon);
          inv[c] = static_cast<T>(istd);
          const T gamma = p[0][c], beta = p[1][c];
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * nc + c) * nl;
            for (std::size_t l = 0; l < nl; ++l) {
              const T h = static_cast<T>((static_cast<double>(x[off + l]) - mean) * istd);
              xhat[off + l] = h;
              y[off + l] = gamma * h + beta;
            }
          }
          const double unbiased = n > 1 ? sq / (n - 1) : var;
          running[0][c] = static_cast<T>(bn->momentum * running[0][c] + (1 - bn->momentum) * mean);
          running[1][c] = static_cast<T>(bn->momentum * running[1][c] + (1 - bn->momentum) * unbiased);
        }
        tape.normalized[li] = std::move(xhat);
        tape.inv_std[li] = std::move(inv);
      } else {
        const auto& running = model.buffers.layers[li];
        for (std::size_t c = 0; c < nc; ++c) {
          const T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running[1][c]) + bn->epsilon));
          const T scale = p[0][c] * istd;
          const T mean = running[0][c], beta = p[1][c];
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * nc + c) * nl;
            for (std::size_t l = 0; l < nl; ++l) y[off + l] = (x[off + l] - mean) * scale + beta;
          }
        }
      }
    } else if (std::holds_alternative<ReLU>(spec)) {
      y = x;
      for (auto& v : y.values()) v = v > T{0} ? v : T{0};
    } else if (auto* pool = std::get_if<MaxPool1D>(&spec)) {
      const std::size_t nc = x.dim(1), len = x.dim(2);
      const std::size_t lout = (len - pool->window) / pool->stride + 1;
      y = Tensor<T>({bsz, nc, lout});
      std::vector<std::size_t> arg(y.numel());
      for (std::size_t bc = 0; bc < bsz * nc; ++bc) {
        const T* xs = x.data() + bc * len;
        for (std::size_t t = 0; t < lout; ++t) {
          std::size_t best = t * pool->stride;
          for (std::size_t j = 1; j < pool->window; ++j) {
            if (xs[t * pool->stride + j] > xs[best]) best = t * pool->stride + j;
          }
          y[bc * lout + t] = xs[best];
          arg[bc * lout + t] = bc * len + best;
        }
      }
      tape.argmax[li] = std::move(arg);
    } else if (std::holds_alternative<GlobalAveragePool1D>(spec)) {
      const std::size_t nc = x.dim(1), len = x.dim(2);
      y = Tensor<T>({bsz, nc});
      for (std::size_t bc = 0; bc < bsz * nc; ++bc) {
        T sum{0};
        for (std::size_t l = 0; l < len; ++l) sum += x[bc * len + l];
        y[bc] = sum / static_cast<T>(len);
      }
    } else if (auto* dense = std::get_if<Dense>(&spec)) {
      const std::size_t in = dense->in_features, out = dense->out_features;
      if (x.numel() != bsz * in) throw ShapeError("dense input shape " + shape_str(x.shape()));
      y = Tensor<T>({bsz, out});
      const T* w = p[0].data();
      for (std::size_t b = 0; b < bsz; ++b) {
        const T* xs = x.data() + b * in;
        for (std::size_t o = 0; o < out; ++o) {
          T acc = p[1][o];
          const T* wr = w + o * in;
          for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xs[i];
          y[b * out + o] = acc;
        }
      }
    } else if (std::holds_alternative<ResidualStart>(spec)) {
      skips.push_back(x);
      y = x;
    } else if (std::holds_alternative<ResidualEnd>(spec)) {
      if (skips.empty()) throw ShapeError("residual_end without matching residual_start");
      require_same_shape(x, skips.back(), "residual merge");
      y = x;
      const auto& s = skips.back();
      for (std::size_t i = 0; i < y.numel(); ++i) y[i] += s[i];
      skips.pop_back();
    }
    if (mode == Mode::train) {
      tape.inputs.push_back(std::move(x));
    }
    x = std::move(y);
  }
  require_finite(x, "forward output");
  tape.output_shape = x.shape();
  result.output = std::move(x);
  return result;
}

}  // namespace detail

// Runs the chain. In train mode the returned tape supports backward and
// batch-norm running statistics in `model` are updated.
template <typename T>
ForwardResult<T> forward(ModelGraph<T>& model, const Tensor<T>& batch, Mode mode) {
  return detail::forward_impl(model, &model.buffers, batch, mode);
}

// Eval-mode forward that leaves the model untouched.
template <typename T>
Tensor<T> predict(const ModelGraph<T>& model, const Tensor<T>& batch) {
  return detail::forward_impl<T>(model, nullptr, batch, Mode::eval).output;
}

template <typename T>
struct BackwardResult {
  GradientStore<T> grads;
  Tensor<T> input_grad;
};

template <typename T>
BackwardResult<T> backward(const ModelGraph<T>& model, const ActivationTape<T>& tape,
                           const Tensor<T>& loss_grad) {
  if (tape.mode != Mode::train) throw std::invalid_argument("backward requires a train-mode tape");
  if (tape.layer_count != model.size() || tape.inputs.size() != model.size()) {
    throw std::invalid_argument("activation tape was produced by a different model");
  }
  if (loss_grad.shape() != tape.output_shape) {
    throw ShapeError("loss gradient shape " + shape_str(loss_grad.shape()) + " does not match output " +
                     shape_str(tape.output_shape));
  }
  BackwardResult<T> result;
  result.grads = model.params.zeros_like();
  std::vector<Tensor<T>> skip_grads;
  Tensor<T> g = loss_grad;

  for (std::size_t li = model.size(); li-- > 0;) {
    const LayerSpec& spec = model.layers[li];
    const Tensor<T>& x = tape.inputs[li];
    const auto& p = model.params.layers[li];
    auto& pg = result.grads.layers[li];
    Tensor<T> dx;
    if (auto* conv = std::get_if<Conv1D>(&spec)) {
      dx = detail::conv_backward(*conv, x, p, g, pg);
    } else if (std::holds_alternative<BatchNorm1D>(spec)) {
      std::size_t nb, nc, nl;
      detail::bn_dims(x.shape(), nb, nc, nl);
      dx = Tensor<T>(x.shape());
      const auto& xhat = tape.normalized[li];
      const auto& inv = tape.inv_std[li];
      const T n = static_cast<T>(nb * nl);
      for (std::size_t c = 0; c < nc; ++c) {
        T sum_dy{0}, sum_dy_xhat{0};
        for (std::size_t b = 0; b < nb; ++b) {
          const std::size_t off = (b * nc + c) * nl;
          for (std::size_t l = 0; l < nl; ++l) {
            sum_dy += g[off + l];
            sum_dy_xhat += g[off + l] * xhat[off + l];
          }
        }
        pg[0][c] += sum_dy_xhat;
        pg[1][c] += sum_dy;
        const T k = p[0][c] * inv[c] / n;
        for (std::size_t b = 0; b < nb; ++b) {
          const std::size_t off = (b * nc + c) * nl;
          for (std::size_t l = 0; l < nl; ++l) {
            dx[off + l] = k * (n * g[off + l] - sum_dy - xhat[off + l] * sum_dy_xhat);
          }
        }
      }
    } else if (std::holds_alternative<ReLU>(spec)) {
      dx = g;
      for (std::size_t i = 0; i < dx.numel(); ++i) {
        if (!(x[i] > T{0})) dx[i] = T{0};
      }
    } else if (std::holds_alternative<MaxPool1D>(spec)) {
      dx = Tensor<T>(x.shape());
      const auto& arg = tape.argmax[li];
      for (std::size_t i = 0; i < g.numel(); ++i) dx[arg[i]] += g[i];
    } else if (std::holds_alternative<GlobalAveragePool1D>(spec)) {
      dx = Tensor<T>(x.shape());
      const std::size_t len = x.dim(2);
      const T scale = T{1} / static_cast<T>(len);
      for (std::size_t bc = 0; bc < g.numel(); ++bc) {
        for (std::size_t l = 0; l < len; ++l) dx[bc * len + l] = g[bc] * scale;
      }
    } else if (auto* dense = std::get_if<Dense>(&spec)) {
      const std::size_t in = dense->in_features, out = dense->out_features;
      const std::size_t bsz = x.dim(0);
      dx = Tensor<T>(x.shape());
      const T* w = p[0].data();
      T* dw = pg[0].data();
      for (std::size_t b = 0; b < bsz; ++b) {
        const T* xs = x.data() + b * in;
        T* dxs = dx.data() + b * in;
        for (std::size_t o = 0; o < out; ++o) {
          const T go = g[b * out + o];
          pg[1][o] += go;
          const T* wr = w + o * in;
          T* dwr = dw + o * in;
          for (std::size_t i = 0; i < in; ++i) {
            dwr[i] += go * xs[i];
            dxs[i] += wr[i] * go;
          }
        }
      }
    } else if (std::holds_alternative<ResidualEnd>(spec)) {
      skip_grads.push_back(g);
      dx = std::move(g);
    } else if (std::holds_alternative<ResidualStart>(spec)) {
      dx = std::move(g);
      const auto& s = skip_grads.back();
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += s[i];
      skip_grads.pop_back();
    }
    g = std::move(dx);
  }
  require_finite(g, "backward input gradient");
  result.input_grad = std::move(g);
  return result;
}

}  // namespace splitfed
