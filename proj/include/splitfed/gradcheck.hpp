#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "splitfed/loss.hpp"
#include "splitfed/model.hpp"
#include "splitfed/partition.hpp"

namespace splitfed {

// Central finite differences in double precision against the analytic
// backward pass. Error per tensor is ||analytic - numeric|| / max(||analytic||,
// ||numeric||, 1e-4). The floor keeps gradients that are exactly zero (a conv
// bias feeding batch norm) from turning rounding noise into a failure.
struct GradcheckOptions {
  std::size_t cases_per_kind = 50;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 2024;
  std::string corrupt_kind;  // negates the analytic gradient of this check (fault injection)
};

struct GradcheckCase {
  std::string kind;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_error = 0;
  bool passed() const { return failures == 0; }
};

struct GradcheckReport {
  std::vector<GradcheckCase> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const GradcheckCase& c) { return c.passed(); });
  }
};

inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-4});
}

namespace detail {

// Numeric gradient of `loss` w.r.t. every scalar of `values`.
inline std::vector<double> numeric_grad(std::vector<double>& values, const std::function<double()>& loss, double h) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = loss();
    values[i] = orig - h;
    const double down = loss();
    values[i] = orig;
    out[i] = (up - down) / (2 * h);
  }
  return out;
}

inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
  return s;
}

// Largest error over the input and every parameter tensor for
// loss = sum(model(x) * weights).
inline double check_chain(ModelGraph<double>& model, Tensor<double> x, const Tensor<double>& weights, double h,
                          bool corrupt) {
  auto fwd = forward(model, x, Mode::train);
  auto bwd = backward(model, fwd.tape, weights);
  auto loss = [&] { return weighted_sum(forward(model, x, Mode::train).output, weights); };
  const double sign = corrupt ? -1.0 : 1.0;
  auto scaled = [sign](const std::vector<double>& v) {
    std::vector<double> out(v);
    for (auto& e : out) e *= sign;
    return out;
  };
  double worst = relative_error(scaled(bwd.input_grad.values()), numeric_grad(x.values(), loss, h));
  for (std::size_t li = 0; li < model.size(); ++li) {
    for (std::size_t k = 0; k < model.params.layers[li].size(); ++k) {
      auto num = numeric_grad(model.params.layers[li][k].values(), loss, h);
      worst = std::max(worst, relative_error(scaled(bwd.grads.layers[li][k].values()), num));
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// Moves values out of (-margin, margin) so ReLU kinks are not straddled.
inline void avoid_zero(Tensor<double>& t, double margin) {
  for (auto& v : t.values()) {
    if (std::fabs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
}

}  // namespace detail

inline GradcheckReport run_gradcheck(const GradcheckOptions& opts = {}) {
  GradcheckReport report;
  std::mt19937_64 rng(opts.seed);
  auto pick = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  auto run_kind = [&](const std::string& kind, const std::function<double(bool)>& one_case) {
    GradcheckCase c{kind, 0, 0, 0};
    const bool corrupt = opts.corrupt_kind == kind;
    for (std::size_t i = 0; i < opts.cases_per_kind; ++i) {
      const double err = one_case(corrupt);
      ++c.cases;
      c.max_error = std::max(c.max_error, err);
      if (!(err < opts.tolerance)) ++c.failures;
    }
    report.checks.push_back(c);
  };

  // One layer (optionally wrapped) on a random input.
  auto chain_case = [&](Shape in, std::vector<LayerSpec> layers, bool relu_safe, bool corrupt) {
    auto model = make_model<double>(in, std::move(layers), rng());
    // random BN affine so scale/shift gradients are non-trivial
    for (std::size_t li = 0; li < model.size(); ++li) {
      if (std::holds_alternative<BatchNorm1D>(model.layers[li])) {
        for (auto& v : model.params.layers[li][0].values()) v = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
        for (auto& v : model.params.layers[li][1].values()) v = std::normal_distribution<double>(0, 0.5)(rng);
      }
      if (std::holds_alternative<Conv1D>(model.layers[li]) || std::holds_alternative<Dense>(model.layers[li])) {
        for (auto& v : model.params.layers[li][1].values()) v = std::normal_distribution<double>(0, 0.5)(rng);
      }
    }
    Shape batch_shape{pick(2, 4)};
    batch_shape.insert(batch_shape.end(), in.begin(), in.end());
    Tensor<double> x = detail::random_tensor(batch_shape, rng);
    if (relu_safe) detail::avoid_zero(x, 1e-2);
    Shape out_shape{batch_shape[0]};
    const Shape per = model.output_shape();
    out_shape.insert(out_shape.end(), per.begin(), per.end());
    Tensor<double> w = detail::random_tensor(out_shape, rng);
    return detail::check_chain(model, std::move(x), w, opts.step, corrupt);
  };

  run_kind("conv1d", [&](bool corrupt) {
    const std::size_t cin = pick(1, 3), cout = pick(1, 3), kernel = pick(1, 5), stride = pick(1, 3);
    return chain_case({cin, pick(3, 9)}, {Conv1D{cin, cout, kernel, stride}}, false, corrupt);
  });
  run_kind("batchnorm1d", [&](bool corrupt) {
    const std::size_t c = pick(1, 3);
    Shape in = pick(0, 1) ? Shape{c, pick(2, 6)} : Shape{c};
    return chain_case(in, {BatchNorm1D{c, 1e-5, 0.9}}, false, corrupt);
  });
  run_kind("relu", [&](bool corrupt) { return chain_case({pick(1, 3), pick(2, 8)}, {ReLU{}}, true, corrupt); });
  run_kind("maxpool1d", [&](bool corrupt) {
    const std::size_t window = pick(1, 3), stride = pick(1, 3);
    return chain_case({pick(1, 3), pick(window, 9)}, {MaxPool1D{window, stride}}, false, corrupt);
  });
  run_kind("globalavgpool1d", [&](bool corrupt) {
    return chain_case({pick(1, 3), pick(1, 8)}, {GlobalAveragePool1D{}}, false, corrupt);
  });
  run_kind("dense", [&](bool corrupt) {
    const std::size_t in = pick(1, 6), out = pick(1, 4);
    return chain_case({in}, {Dense{in, out}}, false, corrupt);
  });
  run_kind("residual", [&](bool corrupt) {
    const std::size_t c = pick(1, 3);
    return chain_case({c, pick(3, 8)},
                      {ResidualStart{}, Conv1D{c, c, pick(1, 5), 1}, BatchNorm1D{c, 1e-5, 0.9}, ResidualEnd{}}, false,
                      corrupt);
  });
  run_kind("softmax_cross_entropy", [&](bool corrupt) {
    const std::size_t batch = pick(1, 4), classes = pick(2, 5);
    Tensor<double> logits = detail::random_tensor({batch, classes}, rng, 2.0);
    std::vector<int> labels(batch);
    for (auto& l : labels) l = static_cast<int>(pick(0, classes - 1));
    auto analytic = softmax_cross_entropy(logits, labels).grad.values();
    if (corrupt) {
      for (auto& v : analytic) v = -v;
    }
    auto num = detail::numeric_grad(logits.values(), [&] { return softmax_cross_entropy(logits, labels).loss; },
                                    opts.step);
    return relative_error(analytic, num);
  });
  run_kind("split_end_to_end", [&](bool corrupt) {
    const std::size_t c1 = pick(1, 3), c2 = pick(1, 3), len = pick(4, 10), classes = 2;
    // no max pool in the tail: ReLU zeros at the cut turn into exact ties there
    auto model = make_model<double>({1, len},
                                    {Conv1D{1, c1, pick(1, 4), 1}, ReLU{}, BatchNorm1D{c1, 1e-5, 0.9},
                                     Conv1D{c1, c2, pick(1, 3), pick(1, 2)}, GlobalAveragePool1D{},
                                     Dense{c2, classes}},
                                    rng());
    const std::size_t batch = pick(2, 4);
    Tensor<double> x = detail::random_tensor({batch, 1, len}, rng);
    std::vector<int> labels(batch);
    for (auto& l : labels) l = static_cast<int>(pick(0, classes - 1));

    auto split = split_at(model, default_cut_index(model));
    auto front = client_forward(split, x);
    auto step = server_step(split, front.activation, labels);
    auto client_grads = client_backward(split, front.tape, step.cut_grad);

    // Numeric side runs the unsplit chain.
    auto loss = [&] {
      auto merged = merge(split.client_part, split.server_part);
      return softmax_cross_entropy(forward(merged, x, Mode::train).output, labels).loss;
    };
    const double sign = corrupt ? -1.0 : 1.0;
    double worst = relative_error(
        [&] {
          auto v = step.cut_grad.tensor.values();
          for (auto& e : v) e *= sign;
          return v;
        }(),
        [&] {
          auto act = front.activation;
          return detail::numeric_grad(
              act.tensor.values(),
              [&] {
                auto tail = split.server_part;
                return softmax_cross_entropy(forward(tail, act.tensor, Mode::train).output, labels).loss;
              },
              opts.step);
        }());
    auto compare = [&](ModelGraph<double>& part, const GradientStore<double>& grads) {
      for (std::size_t li = 0; li < part.size(); ++li) {
        for (std::size_t k = 0; k < part.params.layers[li].size(); ++k) {
          auto num = detail::numeric_grad(part.params.layers[li][k].values(), loss, opts.step);
          auto ana = grads.layers[li][k].values();
          for (auto& e : ana) e *= sign;
          worst = std::max(worst, relative_error(ana, num));
        }
      }
    };
    compare(split.client_part, client_grads);
    compare(split.server_part, step.grads);
    return worst;
  });
  return report;
}

}  // namespace splitfed
