#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitfed/architecture.hpp"
#include "splitfed/data.hpp"
#include "splitfed/loss.hpp"
#include "splitfed/model.hpp"
#include "splitfed/optim.hpp"
#include "splitfed/partition.hpp"
#include "splitfed/protocol.hpp"
#include "splitfed/sparse.hpp"

namespace splitfed {

struct Scheme {
  SchemeKind kind = SchemeKind::split_sparse;
  double fraction = 0.1;  // K, used by split_sparse only
  bool error_feedback = false;
  TopKScope scope = TopKScope::batch;

  bool is_split() const { return kind == SchemeKind::splitnn || kind == SchemeKind::split_sparse; }
};

struct FederationOptions {
  Scheme scheme;
  std::size_t devices = 8;
  std::size_t batch_size = 32;
  std::size_t local_steps = 1;  // FedAvg local iterations per round
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::size_t cut_index = 0;  // 0 selects default_cut_index
  ShardStrategy sharding = ShardStrategy::iid;
};

// Seeded reshuffling iterator over a fixed index pool. Always yields full
// batches, wrapping into a fresh permutation at the end of each pass.
class BatchCursor {
 public:
  BatchCursor() = default;
  BatchCursor(std::size_t pool_size, std::uint64_t seed) : order_(pool_size), rng_(seed) {
    if (pool_size == 0) throw std::invalid_argument("batch cursor over an empty pool");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kShardStream = 2;
inline constexpr std::uint64_t kCursorStream = 1000;  // + client id

struct ClientState {
  std::uint32_t id = 0;
  SegmentDataset shard;
  BatchCursor cursor;
  ModelGraph<float> model;  // front w^1_j (split) or full copy (FedAvg)
  OptimizerState<float> opt;
  ResidualBuffer activation_residual;
  ResidualBuffer gradient_residual;  // filled by the server when replying to this client
};

struct ServerState {
  ModelGraph<float> model;  // shared tail (split) or global model
  OptimizerState<float> opt;
  std::uint32_t round = 0;
  // Centralized baseline only: pooled training data.
  std::optional<SegmentDataset> pooled;
  BatchCursor pooled_cursor;
};

struct RoundMetrics {
  std::uint32_t round = 0;
  double loss = 0;
  std::optional<double> pooled_accuracy;
  std::vector<double> client_accuracy;
  ByteCount bytes;
};

struct EvalResult {
  double pooled = 0;
  std::vector<double> per_client;
};

// Weighted elementwise mean; weights are normalized by their total.
// Contributions are summed in sorted order so the result does not depend on
// client order.
template <typename T>
ParameterSet<T> fedavg_aggregate(const std::vector<ParameterSet<T>>& params, const std::vector<double>& weights) {
  if (params.empty()) throw std::invalid_argument("fedavg_aggregate needs at least one parameter set");
  if (params.size() != weights.size()) throw std::invalid_argument("one weight per parameter set required");
  double total = 0;
  for (double w : weights) {
    if (!(w > 0)) throw std::invalid_argument("aggregation weights must be positive");
    total += w;
  }
  for (const auto& p : params) {
    if (!p.same_shapes(params.front())) throw ShapeError("fedavg_aggregate: parameter shapes differ");
  }
  ParameterSet<T> out = params.front().zeros_like();
  std::vector<double> terms(params.size());
  for (std::size_t li = 0; li < out.layers.size(); ++li) {
    for (std::size_t k = 0; k < out.layers[li].size(); ++k) {
      auto& dst = out.layers[li][k];
      for (std::size_t i = 0; i < dst.numel(); ++i) {
        for (std::size_t c = 0; c < params.size(); ++c) {
          terms[c] = weights[c] * static_cast<double>(params[c].layers[li][k][i]);
        }
        std::sort(terms.begin(), terms.end());
        double sum = 0;
        for (double t : terms) sum += t;
        dst[i] = static_cast<T>(sum / total);
      }
    }
  }
  return out;
}

template <typename T>
double accuracy(const ModelGraph<T>& model, const SegmentDataset& test, std::size_t chunk = 256) {
  if (test.empty()) throw std::invalid_argument("test set is empty");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += chunk) {
    idx.resize(std::min(chunk, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = argmax_rows(predict(model, test.batch(idx).template cast<T>()));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == test.label(idx[i]) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// Accuracy of front + tail with the cut tensor top-K sparsified exactly as in
// training. Chunks match the training batch so batch-scope selection sees the
// same number of elements.
template <typename T>
double sparse_split_accuracy(const ModelGraph<T>& front, const ModelGraph<T>& tail, const SegmentDataset& test,
                             double fraction, TopKScope scope, std::size_t chunk) {
  if (test.empty()) throw std::invalid_argument("test set is empty");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += chunk) {
    idx.resize(std::min(chunk, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> cut = predict(front, test.batch(idx).template cast<T>()).template cast<float>();
    const Tensor<T> sent = densify(topk_sparsify(cut, fraction, scope)).template cast<T>();
    const auto pred = argmax_rows(predict(tail, sent));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == test.label(idx[i]) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// The simulator: M clients and one server exchanging frames over a loopback
// channel, one synchronous round at a time.
class Federation {
 public:
  using MessageObserver = std::function<void(Direction, const Message&)>;

  Federation(const Architecture& arch, const SegmentDataset& train, const FederationOptions& opts)
      : opts_(opts), channel_(ledger_, opts.scheme.kind) {
    if (opts.devices == 0) throw std::invalid_argument("at least one device is required");
    if (opts.batch_size == 0) throw std::invalid_argument("batch size must be positive");
    if (opts.scheme.kind == SchemeKind::split_sparse) check_fraction(opts.scheme.fraction);
    ModelGraph<float> model = arch.build<float>(derive_seed(opts.seed, kInitStream));
    cut_index_ = opts.cut_index ? opts.cut_index : default_cut_index(model);

    if (opts.scheme.kind == SchemeKind::centralized) {
      server_.model = std::move(model);
      server_.opt = OptimizerState<float>(opts.learning_rate, opts.momentum, server_.model.params);
      server_.pooled = train;
      server_.pooled_cursor = BatchCursor(train.size(), derive_seed(opts.seed, kCursorStream));
      return;
    }

    const auto shards = partition_shards(train, {opts.sharding, opts.devices, derive_seed(opts.seed, kShardStream)});
    ModelGraph<float> front;
    if (opts.scheme.is_split()) {
      auto split = split_at(model, cut_index_);
      front = std::move(split.client_part);
      server_.model = std::move(split.server_part);
    } else {
      front = model;
      server_.model = std::move(model);
    }
    server_.opt = OptimizerState<float>(opts.learning_rate, opts.momentum, server_.model.params);
    for (std::size_t j = 0; j < opts.devices; ++j) {
      ClientState c;
      c.id = static_cast<std::uint32_t>(j);
      c.shard = shards[j];
      c.cursor = BatchCursor(c.shard.size(), derive_seed(opts.seed, kCursorStream + j));
      c.model = front;
      c.opt = OptimizerState<float>(opts.learning_rate, opts.momentum, c.model.params);
      clients_.push_back(std::move(c));
    }
  }

  Federation(const Federation&) = delete;
  Federation& operator=(const Federation&) = delete;

  const FederationOptions& options() const { return opts_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const ServerState& server() const { return server_; }
  const TrafficLedger& ledger() const { return ledger_; }
  std::size_t cut_index() const { return cut_index_; }
  void set_message_observer(MessageObserver obs) { observer_ = std::move(obs); }

  // Full model seen by client j (front composed with the shared tail), or
  // the global model for the non-split schemes.
  ModelGraph<float> client_model(std::size_t j) const {
    if (opts_.scheme.is_split()) return merge(clients_.at(j).model, server_.model);
    return server_.model;
  }

  RoundMetrics run_round() {
    RoundMetrics m;
    m.round = server_.round;
    switch (opts_.scheme.kind) {
      case SchemeKind::centralized: m.loss = centralized_round(); break;
      case SchemeKind::fedavg: m.loss = fedavg_round(); break;
      case SchemeKind::splitnn:
      case SchemeKind::split_sparse: m.loss = split_round(); break;
    }
    m.bytes = ledger_.round_total(opts_.scheme.kind, server_.round);
    ++server_.round;
    return m;
  }

  EvalResult evaluate(const SegmentDataset& test) const {
    EvalResult r;
    if (opts_.scheme.is_split()) {
      for (std::size_t j = 0; j < clients_.size(); ++j) {
        if (opts_.scheme.kind == SchemeKind::split_sparse) {
          r.per_client.push_back(sparse_split_accuracy(clients_[j].model, server_.model, test, opts_.scheme.fraction,
                                                       opts_.scheme.scope, opts_.batch_size));
        } else {
          r.per_client.push_back(accuracy(client_model(j), test));
        }
      }
      r.pooled = std::accumulate(r.per_client.begin(), r.per_client.end(), 0.0) /
                 static_cast<double>(r.per_client.size());
    } else {
      r.pooled = accuracy(server_.model, test);
      r.per_client.assign(opts_.devices, r.pooled);
    }
    return r;
  }

 private:
  void send(Direction dir, const Message& msg) {
    if (observer_) observer_(dir, msg);
    channel_.send(server_.round, dir, msg);
  }

  double centralized_round() {
    const auto idx = server_.pooled_cursor.next(opts_.devices * opts_.batch_size);
    auto fwd = forward(server_.model, server_.pooled->batch(idx), Mode::train);
    auto loss = softmax_cross_entropy(fwd.output, server_.pooled->batch_labels(idx));
    auto bwd = backward(server_.model, fwd.tape, loss.grad);
    sgd_step(server_.model.params, bwd.grads, server_.opt);
    return loss.loss;
  }

  Tensor<float> ship_activation(ClientState& c, Tensor<float> act) {
    const std::uint32_t round = server_.round;
    if (opts_.scheme.kind == SchemeKind::splitnn) {
      send(Direction::up, DenseActivation{round, c.id, std::move(act)});
      return std::get<DenseActivation>(channel_.receive()).tensor;
    }
    const auto& s = opts_.scheme;
    SparseCutTensor sparse = s.error_feedback ? residual_sparsify(act, c.activation_residual, s.fraction, s.scope)
                                              : topk_sparsify(act, s.fraction, s.scope);
    send(Direction::up, ForwardActivation{round, c.id, std::move(sparse)});
    return densify(std::get<ForwardActivation>(channel_.receive()).tensor);
  }

  Tensor<float> ship_gradient(ClientState& c, Tensor<float> grad) {
    const std::uint32_t round = server_.round;
    if (opts_.scheme.kind == SchemeKind::splitnn) {
      send(Direction::down, DenseGradient{round, c.id, std::move(grad)});
      return std::get<DenseGradient>(channel_.receive()).tensor;
    }
    const auto& s = opts_.scheme;
    SparseCutTensor sparse = s.error_feedback ? residual_sparsify(grad, c.gradient_residual, s.fraction, s.scope)
                                              : topk_sparsify(grad, s.fraction, s.scope);
    send(Direction::down, ActivationGradient{round, c.id, std::move(sparse)});
    return densify(std::get<ActivationGradient>(channel_.receive()).tensor);
  }

  double split_round() {
    GradientStore<float> tail_sum = server_.model.params.zeros_like();
    double loss_sum = 0;
    for (auto& c : clients_) {
      const auto idx = c.cursor.next(opts_.batch_size);
      auto front = client_forward(c.model, c.shard.batch(idx), server_.round, c.id);

      // Server side sees only the received cut activation.
      CutActivation<float> received{ship_activation(c, std::move(front.activation.tensor)), server_.round, c.id};
      auto step = server_step(server_.model, received, c.shard.batch_labels(idx));
      loss_sum += step.loss;
      accumulate(tail_sum, step.grads);

      CutGradient<float> cut_grad{ship_gradient(c, std::move(step.cut_grad.tensor)), server_.round, c.id};
      auto grads = client_backward(c.model, front.tape, cut_grad);
      sgd_step(c.model.params, grads, c.opt);
    }
    const float inv = 1.0f / static_cast<float>(clients_.size());
    for (auto& layer : tail_sum.layers) {
      for (auto& t : layer) {
        for (auto& v : t.values()) v *= inv;
      }
    }
    sgd_step(server_.model.params, tail_sum, server_.opt);
    return loss_sum / static_cast<double>(clients_.size());
  }

  double fedavg_round() {
    double loss_sum = 0;
    std::size_t steps = 0;
    std::vector<ParameterSet<float>> uploaded, uploaded_buffers;
    std::vector<double> weights;
    for (auto& c : clients_) {
      for (std::size_t e = 0; e < opts_.local_steps; ++e) {
        const auto idx = c.cursor.next(opts_.batch_size);
        auto fwd = forward(c.model, c.shard.batch(idx), Mode::train);
        auto loss = softmax_cross_entropy(fwd.output, c.shard.batch_labels(idx));
        auto bwd = backward(c.model, fwd.tape, loss.grad);
        sgd_step(c.model.params, bwd.grads, c.opt);
        loss_sum += loss.loss;
        ++steps;
      }
      send(Direction::up, ModelSync{server_.round, c.id, SyncDirection::up, c.model.params.flatten(),
                                    c.model.buffers.flatten()});
      auto sync = std::get<ModelSync>(channel_.receive());
      ParameterSet<float> p = server_.model.params.zeros_like();
      ParameterSet<float> b = server_.model.buffers.zeros_like();
      p.unflatten(sync.params);
      b.unflatten(sync.buffers);
      uploaded.push_back(std::move(p));
      uploaded_buffers.push_back(std::move(b));
      weights.push_back(static_cast<double>(c.shard.size()));
    }
    server_.model.params = fedavg_aggregate(uploaded, weights);
    server_.model.buffers = fedavg_aggregate(uploaded_buffers, weights);
    for (auto& c : clients_) {
      send(Direction::down, ModelSync{server_.round, c.id, SyncDirection::down, server_.model.params.flatten(),
                                      server_.model.buffers.flatten()});
      auto sync = std::get<ModelSync>(channel_.receive());
      c.model.params.unflatten(sync.params);
      c.model.buffers.unflatten(sync.buffers);
    }
    return loss_sum / static_cast<double>(steps);
  }

  FederationOptions opts_;
  TrafficLedger ledger_;
  LoopbackChannel channel_;
  std::vector<ClientState> clients_;
  ServerState server_;
  std::size_t cut_index_ = 1;
  MessageObserver observer_;
};

}  // namespace splitfed
