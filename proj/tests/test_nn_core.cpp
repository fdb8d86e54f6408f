#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "splitfed/gradcheck.hpp"
#include "splitfed/loss.hpp"
#include "splitfed/model.hpp"
#include "splitfed/optim.hpp"
#include "splitfed/partition.hpp"

using namespace splitfed;

namespace {

Tensor<float> random_input(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor<float> t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// Direct "same" convolution with its own padding arithmetic, kept
// deliberately naive.
Tensor<double> direct_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                           std::size_t stride) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = w.dim(0), kernel = w.dim(2);
  std::size_t lout = len / stride;
  if (lout * stride < len) ++lout;
  const long pad_total = std::max(0L, static_cast<long>((lout - 1) * stride + kernel) - static_cast<long>(len));
  const long pad = pad_total / 2;
  Tensor<double> y({batch, cout, lout});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < lout; ++t) {
        double acc = bias[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t k = 0; k < kernel; ++k) {
            const long pos = static_cast<long>(t * stride + k) - pad;
            if (pos < 0 || pos >= static_cast<long>(len)) continue;
            acc += w[(o * cin + c) * kernel + k] * x[(b * cin + c) * len + static_cast<std::size_t>(pos)];
          }
        y[(b * cout + o) * lout + t] = acc;
      }
  return y;
}

Tensor<double> relu_oracle(Tensor<double> x) {
  for (auto& v : x.values()) v = v > 0 ? v : 0;
  return x;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.values().size(), 24u);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Forward, EmptyChainIsIdentity) {
  auto model = make_model<float>({3}, {}, 1);
  auto x = random_input({4, 3}, 2);
  EXPECT_EQ(forward(model, x, Mode::train).output, x);
  EXPECT_EQ(predict(model, x), x);
}

TEST(Forward, DenseIdentityWeights) {
  auto model = make_model<float>({2}, {Dense{2, 2}}, 1);
  model.params.layers[0][0] = Tensor<float>({2, 2}, {1, 0, 0, 1});
  model.params.layers[0][1].fill(0);
  auto y = forward(model, Tensor<float>({1, 2}, {1, 2}), Mode::eval).output;
  EXPECT_EQ(y.values(), (std::vector<float>{1, 2}));
}

TEST(Forward, TwoLayerConvMatchesDirectConvolution) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    const std::size_t c0 = pick(1, 3), c1 = pick(1, 4), c2 = pick(1, 4), len = pick(5, 40);
    const std::size_t k1 = pick(1, 9), k2 = pick(1, 9), s1 = pick(1, 3), s2 = pick(1, 2);
    auto model = make_model<float>({c0, len}, {Conv1D{c0, c1, k1, s1}, ReLU{}, Conv1D{c1, c2, k2, s2}}, rng());
    for (auto& v : model.params.layers[0][1].values()) v = std::normal_distribution<float>(0, 0.3f)(rng);
    for (auto& v : model.params.layers[2][1].values()) v = std::normal_distribution<float>(0, 0.3f)(rng);
    auto x = random_input({pick(1, 3), c0, len}, rng());

    auto y = predict(model, x);
    const auto& p = model.params.layers;
    auto ref = direct_conv(relu_oracle(direct_conv(x.cast<double>(), p[0][0].cast<double>(), p[0][1].cast<double>(), s1)),
                           p[2][0].cast<double>(), p[2][1].cast<double>(), s2);
    ASSERT_EQ(y.shape(), ref.shape());
    double diff = 0, norm = 0;
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      diff += (y[i] - ref[i]) * (y[i] - ref[i]);
      norm += ref[i] * ref[i];
    }
    EXPECT_LT(std::sqrt(diff) / std::max(std::sqrt(norm), 1e-12), 1e-5) << "trial " << trial;
  }
}

TEST(Forward, SameLengthPadding) {
  auto model = make_model<float>({1, 256}, {Conv1D{1, 32, 16, 1}}, 3);
  EXPECT_EQ(model.output_shape(), (Shape{32, 256}));
  auto strided = make_model<float>({1, 255}, {Conv1D{1, 2, 16, 2}}, 3);
  EXPECT_EQ(strided.output_shape(), (Shape{2, 128}));
}

TEST(Forward, RejectsShapeMismatch) {
  auto model = make_model<float>({2, 8}, {Conv1D{2, 2, 3, 1}}, 1);
  EXPECT_THROW(forward(model, Tensor<float>({1, 3, 8}), Mode::train), ShapeError);
  EXPECT_THROW(forward(model, Tensor<float>({3, 8}), Mode::train), ShapeError);
}

TEST(Forward, NonFiniteOutputIsAnError) {
  auto model = make_model<float>({2}, {Dense{2, 1}}, 1);
  Tensor<float> x({1, 2}, {std::numeric_limits<float>::infinity(), 1});
  EXPECT_THROW(forward(model, x, Mode::train), NumericError);
}

TEST(Forward, Deterministic) {
  auto make = [] {
    return make_model<float>({1, 32}, {Conv1D{1, 4, 5, 1}, BatchNorm1D{4}, ReLU{}, MaxPool1D{2, 2},
                                       GlobalAveragePool1D{}, Dense{4, 2}},
                             11);
  };
  auto a = make(), b = make();
  auto x = random_input({5, 1, 32}, 4);
  const auto ya = forward(a, x, Mode::train).output;
  const auto yb = forward(b, x, Mode::train).output;
  EXPECT_EQ(ya, yb);
  EXPECT_EQ(a.buffers, b.buffers);
  EXPECT_EQ(predict(a, x), predict(b, x));
}

TEST(Forward, ConcatenatedChainEqualsChainedPieces) {
  auto model = make_model<float>({2, 16}, {Conv1D{2, 3, 3, 1}, ReLU{}, BatchNorm1D{3}, MaxPool1D{2, 2},
                                           GlobalAveragePool1D{}, Dense{3, 2}},
                                 5);
  auto x = random_input({3, 2, 16}, 6);
  for (std::size_t cut = 1; cut < model.size(); ++cut) {
    auto split = split_at(model, cut);
    auto whole = predict(model, x);
    auto pieces = predict(split.server_part, predict(split.client_part, x));
    EXPECT_EQ(whole, pieces) << "cut " << cut;
  }
}

TEST(Backward, DenseHandDerivation) {
  auto model = make_model<float>({2}, {Dense{2, 2}}, 1);
  model.params.layers[0][0] = Tensor<float>({2, 2}, {1, 2, 3, 4});
  model.params.layers[0][1].fill(0);
  auto fwd = forward(model, Tensor<float>({1, 2}, {1, 1}), Mode::train);
  auto bwd = backward(model, fwd.tape, Tensor<float>({1, 2}, {1, 1}));
  EXPECT_EQ(bwd.grads.layers[0][0].values(), (std::vector<float>{1, 1, 1, 1}));
  EXPECT_EQ(bwd.grads.layers[0][1].values(), (std::vector<float>{1, 1}));
  EXPECT_EQ(bwd.input_grad.values(), (std::vector<float>{4, 6}));
}

TEST(Backward, ReluBlocksNegativeInputs) {
  auto model = make_model<float>({3}, {ReLU{}}, 1);
  auto fwd = forward(model, Tensor<float>({1, 3}, {-1.0f, -0.5f, 2.0f}), Mode::train);
  auto bwd = backward(model, fwd.tape, Tensor<float>({1, 3}, {5, 5, 5}));
  EXPECT_EQ(bwd.input_grad.values(), (std::vector<float>{0, 0, 5}));
}

TEST(Backward, GradientShapesMirrorParameters) {
  auto model = make_model<float>({1, 16}, {Conv1D{1, 4, 3, 1}, BatchNorm1D{4}, ReLU{}, ResidualStart{},
                                           Conv1D{4, 4, 3, 1}, ResidualEnd{}, GlobalAveragePool1D{}, Dense{4, 2}},
                                 2);
  auto x = random_input({2, 1, 16}, 3);
  auto fwd = forward(model, x, Mode::train);
  auto bwd = backward(model, fwd.tape, Tensor<float>(fwd.output.shape(), 1.0f));
  EXPECT_TRUE(bwd.grads.same_shapes(model.params));
  EXPECT_EQ(bwd.input_grad.shape(), x.shape());
}

TEST(Backward, RejectsMismatchedTape) {
  auto a = make_model<float>({2}, {Dense{2, 2}}, 1);
  auto b = make_model<float>({2}, {Dense{2, 2}, ReLU{}}, 1);
  auto fwd = forward(a, Tensor<float>({1, 2}, {1, 1}), Mode::train);
  EXPECT_THROW(backward(b, fwd.tape, Tensor<float>({1, 2})), std::invalid_argument);
  auto eval = forward(a, Tensor<float>({1, 2}, {1, 1}), Mode::eval);
  EXPECT_THROW(backward(a, eval.tape, Tensor<float>({1, 2})), std::invalid_argument);
  EXPECT_THROW(backward(a, fwd.tape, Tensor<float>({2, 2})), ShapeError);
}

TEST(Gradcheck, EveryLayerKindPasses) {
  GradcheckOptions opts;
  opts.cases_per_kind = 20;
  const auto report = run_gradcheck(opts);
  ASSERT_EQ(report.checks.size(), 9u);
  for (const auto& c : report.checks) EXPECT_TRUE(c.passed()) << c.kind << " max error " << c.max_error;
}

TEST(Gradcheck, InjectedSignErrorIsCaught) {
  GradcheckOptions opts;
  opts.cases_per_kind = 3;
  opts.corrupt_kind = "dense";
  const auto report = run_gradcheck(opts);
  EXPECT_FALSE(report.passed());
  for (const auto& c : report.checks) EXPECT_EQ(c.passed(), c.kind != "dense") << c.kind;
}

TEST(BatchNorm, TrainModeNormalizesEachChannel) {
  auto model = make_model<float>({3, 50}, {BatchNorm1D{3}}, 1);
  auto x = random_input({8, 3, 50}, 7);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = 4.0f * x[i] + 2.5f;
  auto y = forward(model, x, Mode::train).output;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t l = 0; l < 50; ++l) sum += y.at(b, c, l);
    const double mean = sum / 400;
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t l = 0; l < 50; ++l) sq += (y.at(b, c, l) - mean) * (y.at(b, c, l) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-3);
    EXPECT_NEAR(sq / 400, 1.0, 1e-3);
  }
}

TEST(BatchNorm, RunningStatisticsUseMomentum) {
  auto model = make_model<float>({1}, {BatchNorm1D{1}}, 1);
  forward(model, Tensor<float>({4, 1}, {1, 2, 3, 6}), Mode::train);
  // batch mean 3, unbiased variance 14/3
  EXPECT_NEAR(model.buffers.layers[0][0][0], 0.1 * 3.0, 1e-6);
  EXPECT_NEAR(model.buffers.layers[0][1][0], 0.9 + 0.1 * 14.0 / 3.0, 1e-6);
  // eval uses the running statistics, not the batch
  auto y = predict(model, Tensor<float>({1, 1}, {0.3f}));
  EXPECT_NEAR(y[0], 0.0, 1e-6);
}

TEST(Loss, EqualLogitsGiveLog2) {
  auto r = softmax_cross_entropy(Tensor<float>({3, 2}, {0, 0, 5, 5, -1, -1}), {0, 1, 0});
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-6);
}

TEST(Loss, VanishesAsMarginGrows) {
  float prev = std::numeric_limits<float>::infinity();
  for (float margin : {1.0f, 2.0f, 5.0f, 10.0f, 20.0f, 50.0f}) {
    const float loss = softmax_cross_entropy(Tensor<float>({1, 2}, {margin, 0}), {0}).loss;
    EXPECT_LT(loss, prev);
    EXPECT_GE(loss, 0.0f);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-6f);
}

TEST(Loss, NonNegativeAndStableForLargeLogits) {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> dist(0, 200);
  for (int i = 0; i < 100; ++i) {
    Tensor<float> logits({4, 3});
    for (auto& v : logits.values()) v = dist(rng);
    auto r = softmax_cross_entropy(logits, {0, 1, 2, 1});
    EXPECT_GE(r.loss, 0.0f);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_TRUE(r.grad.all_finite());
  }
}

TEST(Loss, LabelOutOfRange) {
  EXPECT_THROW(softmax_cross_entropy(Tensor<float>({1, 2}), {2}), std::out_of_range);
  EXPECT_THROW(softmax_cross_entropy(Tensor<float>({1, 2}), {-1}), std::out_of_range);
}

TEST(Sgd, PlainStep) {
  ParameterSet<float> w{{{Tensor<float>({1}, {1.0f})}}};
  GradientStore<float> g{{{Tensor<float>({1}, {2.0f})}}};
  OptimizerState<float> opt(0.1, 0.0, w);
  sgd_step(w, g, opt);
  EXPECT_NEAR(w.layers[0][0][0], 0.8f, 1e-7);
}

TEST(Sgd, MomentumTwoSteps) {
  ParameterSet<float> w{{{Tensor<float>({1}, {1.0f})}}};
  GradientStore<float> g{{{Tensor<float>({1}, {1.0f})}}};
  OptimizerState<float> opt(0.1, 0.9, w);
  sgd_step(w, g, opt);
  EXPECT_NEAR(w.layers[0][0][0], 0.9f, 1e-7);
  EXPECT_NEAR(opt.velocity.layers[0][0][0], 1.0f, 1e-7);
  sgd_step(w, g, opt);
  EXPECT_NEAR(opt.velocity.layers[0][0][0], 1.9f, 1e-6);
  EXPECT_NEAR(w.layers[0][0][0], 0.71f, 1e-6);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  auto model = make_model<float>({4}, {Dense{4, 3}}, 1);
  const auto before = model.params;
  OptimizerState<float> opt(0.5, 0.9, model.params);
  sgd_step(model.params, model.params.zeros_like(), opt);
  EXPECT_EQ(model.params, before);
}

TEST(Sgd, ValidatesHyperparametersAndShapes) {
  auto model = make_model<float>({4}, {Dense{4, 3}}, 1);
  EXPECT_THROW(OptimizerState<float>(0.0, 0.9, model.params), std::invalid_argument);
  EXPECT_THROW(OptimizerState<float>(0.1, 1.0, model.params), std::invalid_argument);
  OptimizerState<float> opt(0.1, 0.0, model.params);
  auto other = make_model<float>({4}, {Dense{4, 2}}, 1);
  EXPECT_THROW(sgd_step(model.params, other.params, opt), ShapeError);
}

TEST(ParamCount, SmallLayers) {
  EXPECT_EQ(make_model<float>({3}, {Dense{3, 2}}, 0).param_count(), 8u);
  EXPECT_EQ(make_model<float>({1, 256}, {Conv1D{1, 32, 16, 1}}, 0).param_count(), 544u);
  auto bn = make_model<float>({4, 8}, {BatchNorm1D{4}}, 0);
  EXPECT_EQ(bn.param_count(), 8u);
  EXPECT_EQ(bn.buffer_count(), 8u);
}

TEST(ModelGraph, ResidualNestingIsValidated) {
  EXPECT_THROW(make_model<float>({2, 8}, {ResidualEnd{}}, 0), ShapeError);
  EXPECT_THROW(make_model<float>({2, 8}, {ResidualStart{}, ReLU{}}, 0), ShapeError);
  EXPECT_THROW(make_model<float>({2, 8}, {ResidualStart{}, Conv1D{2, 3, 3, 1}, ResidualEnd{}}, 0), ShapeError);
  EXPECT_NO_THROW(make_model<float>({2, 8}, {ResidualStart{}, Conv1D{2, 2, 3, 1}, ResidualEnd{}}, 0));
  EXPECT_THROW(make_model<float>({2, 8}, {Dense{3, 2}}, 0), ShapeError);
}
