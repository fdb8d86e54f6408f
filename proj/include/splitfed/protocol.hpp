#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "splitfed/sparse.hpp"
#include "splitfed/tensor.hpp"

namespace splitfed {

/*
    Wire format, all integers unsigned little-endian:

      frame   = magic 'S' 'F' | version u8 (=1) | msg_type u8 | payload_len u32 | payload
      sparse  = round u32 | client_id u32 | rank u8 | dims u32 * rank
                | count u32 | indices u32 * count | values f32 * count
      dense   = round u32 | client_id u32 | rank u8 | dims u32 * rank | values f32 * numel
      sync    = round u32 | client_id u32 | direction u8 | param_count u32
                | buffer_count u32 | values f32 * (param_count + buffer_count)
      control = code u8

    Tensor rank is capped at 8.
*/
inline constexpr std::uint8_t kMagic0 = 0x53;
inline constexpr std::uint8_t kMagic1 = 0x46;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 8;
inline constexpr std::size_t kMaxRank = 8;

enum class MsgType : std::uint8_t {
  forward_activation = 1,
  activation_gradient = 2,
  dense_activation = 3,
  dense_gradient = 4,
  model_sync = 5,
  control = 6,
};

struct ForwardActivation {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  SparseCutTensor tensor;
  friend bool operator==(const ForwardActivation&, const ForwardActivation&) = default;
};

struct ActivationGradient {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  SparseCutTensor tensor;
  friend bool operator==(const ActivationGradient&, const ActivationGradient&) = default;
};

struct DenseActivation {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  Tensor<float> tensor;
  friend bool operator==(const DenseActivation&, const DenseActivation&) = default;
};

struct DenseGradient {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  Tensor<float> tensor;
  friend bool operator==(const DenseGradient&, const DenseGradient&) = default;
};

enum class SyncDirection : std::uint8_t { up = 0, down = 1 };

// Full-model synchronization: trainable parameters then batch-norm buffers.
struct ModelSync {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  SyncDirection direction = SyncDirection::up;
  std::vector<float> params;
  std::vector<float> buffers;
  friend bool operator==(const ModelSync&, const ModelSync&) = default;
};

struct Control {
  std::uint8_t code = 0;
  friend bool operator==(const Control&, const Control&) = default;
};

using Message =
    std::variant<ForwardActivation, ActivationGradient, DenseActivation, DenseGradient, ModelSync, Control>;

enum class DecodeErrorCode {
  bad_magic,
  unsupported_version,
  truncated,
  index_out_of_bounds,
  unknown_type,
  malformed,
};

inline const char* to_string(DecodeErrorCode code) {
  switch (code) {
    case DecodeErrorCode::bad_magic: return "bad magic";
    case DecodeErrorCode::unsupported_version: return "unsupported version";
    case DecodeErrorCode::truncated: return "truncated frame";
    case DecodeErrorCode::index_out_of_bounds: return "index out of bounds";
    case DecodeErrorCode::unknown_type: return "unknown message type";
    case DecodeErrorCode::malformed: return "malformed payload";
  }
  return "unknown";
}

class DecodeError : public std::runtime_error {
 public:
  DecodeError(DecodeErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}
  DecodeErrorCode code() const { return code_; }

 private:
  DecodeErrorCode code_;
};

class EncodeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline MsgType message_type(const Message& msg) {
  return static_cast<MsgType>(msg.index() + 1);
}

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u32(bits);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) {
      throw DecodeError(DecodeErrorCode::truncated, "need " + std::to_string(n) + " bytes, have " +
                                                        std::to_string(remaining()));
    }
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void write_shape(Writer& w, const Shape& shape) {
  if (shape.empty() || shape.size() > kMaxRank) throw EncodeError("tensor rank must lie in [1, 8]");
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) {
    if (d == 0 || d > 0xFFFFFFFFu) throw EncodeError("tensor dimension out of range");
    w.u32(static_cast<std::uint32_t>(d));
  }
  if (numel(shape) > 0xFFFFFFFFu) throw EncodeError("tensor exceeds 2^32 - 1 elements");
}

inline Shape read_shape(Reader& r) {
  const std::uint8_t rank = r.u8();
  if (rank == 0 || rank > kMaxRank) {
    throw DecodeError(DecodeErrorCode::malformed, "tensor rank " + std::to_string(rank));
  }
  Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& d : shape) {
    d = r.u32();
    if (d == 0) throw DecodeError(DecodeErrorCode::malformed, "zero tensor dimension");
    total *= d;
    if (total > 0xFFFFFFFFull) throw DecodeError(DecodeErrorCode::malformed, "tensor exceeds 2^32 - 1 elements");
  }
  return shape;
}

inline float read_finite(Reader& r) {
  const float v = r.f32();
  if (!std::isfinite(v)) throw DecodeError(DecodeErrorCode::malformed, "non-finite tensor value");
  return v;
}

inline void write_sparse(Writer& w, const SparseCutTensor& s) {
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw EncodeError(e.what());
  }
  write_shape(w, s.shape);
  w.u32(static_cast<std::uint32_t>(s.count()));
  for (std::uint32_t i : s.indices) w.u32(i);
  for (float v : s.values) w.f32(v);
}

inline SparseCutTensor read_sparse(Reader& r) {
  SparseCutTensor s;
  s.shape = read_shape(r);
  const std::size_t n = numel(s.shape);
  const std::uint32_t count = r.u32();
  if (count > n) throw DecodeError(DecodeErrorCode::malformed, "more entries than tensor elements");
  r.need(std::size_t{8} * count);
  s.indices.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    s.indices[i] = r.u32();
    if (s.indices[i] >= n) {
      throw DecodeError(DecodeErrorCode::index_out_of_bounds,
                        "index " + std::to_string(s.indices[i]) + " >= " + std::to_string(n));
    }
    if (i > 0 && s.indices[i] <= s.indices[i - 1]) {
      throw DecodeError(DecodeErrorCode::malformed, "indices not strictly increasing");
    }
  }
  s.values.resize(count);
  for (auto& v : s.values) v = read_finite(r);
  return s;
}

inline void write_dense(Writer& w, const Tensor<float>& t) {
  write_shape(w, t.shape());
  for (float v : t.values()) w.f32(v);
}

inline Tensor<float> read_dense(Reader& r) {
  Shape shape = read_shape(r);
  const std::size_t n = numel(shape);
  r.need(4 * n);
  std::vector<float> values(n);
  for (auto& v : values) v = read_finite(r);
  return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Message& msg) {
  detail::Writer w;
  w.u8(kMagic0);
  w.u8(kMagic1);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(message_type(msg)));
  w.u32(0);  // payload length, patched below
  std::visit(
      [&w](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ForwardActivation> || std::is_same_v<M, ActivationGradient>) {
          w.u32(m.round);
          w.u32(m.client_id);
          detail::write_sparse(w, m.tensor);
        } else if constexpr (std::is_same_v<M, DenseActivation> || std::is_same_v<M, DenseGradient>) {
          w.u32(m.round);
          w.u32(m.client_id);
          detail::write_dense(w, m.tensor);
        } else if constexpr (std::is_same_v<M, ModelSync>) {
          w.u32(m.round);
          w.u32(m.client_id);
          w.u8(static_cast<std::uint8_t>(m.direction));
          w.u32(static_cast<std::uint32_t>(m.params.size()));
          w.u32(static_cast<std::uint32_t>(m.buffers.size()));
          for (float v : m.params) w.f32(v);
          for (float v : m.buffers) w.f32(v);
        } else {
          w.u8(m.code);
        }
      },
      msg);
  auto& bytes = w.bytes();
  const auto len = static_cast<std::uint32_t>(bytes.size() - kFrameHeaderBytes);
  for (int i = 0; i < 4; ++i) bytes[4 + i] = static_cast<std::uint8_t>(len >> (8 * i));
  return std::move(bytes);
}

// Decodes exactly one frame. Every failure is a DecodeError.
inline Message decode(std::span<const std::uint8_t> bytes) {
  detail::Reader header(bytes);
  if (bytes.size() < 2) throw DecodeError(DecodeErrorCode::truncated, "frame shorter than magic");
  if (bytes[0] != kMagic0 || bytes[1] != kMagic1) throw DecodeError(DecodeErrorCode::bad_magic, "expected 'SF'");
  header.need(kFrameHeaderBytes);
  header.u8();
  header.u8();
  const std::uint8_t version = header.u8();
  if (version != kVersion) {
    throw DecodeError(DecodeErrorCode::unsupported_version, "version " + std::to_string(version));
  }
  const std::uint8_t type = header.u8();
  const std::uint32_t len = header.u32();
  if (header.remaining() < len) {
    throw DecodeError(DecodeErrorCode::truncated, "payload length " + std::to_string(len) + " exceeds " +
                                                      std::to_string(header.remaining()) + " available bytes");
  }
  if (header.remaining() > len) throw DecodeError(DecodeErrorCode::malformed, "trailing bytes after frame");
  detail::Reader r(bytes.subspan(kFrameHeaderBytes, len));

  Message msg;
  switch (static_cast<MsgType>(type)) {
    case MsgType::forward_activation: {
      ForwardActivation m;
      m.round = r.u32();
      m.client_id = r.u32();
      m.tensor = detail::read_sparse(r);
      msg = std::move(m);
      break;
    }
    case MsgType::activation_gradient: {
      ActivationGradient m;
      m.round = r.u32();
      m.client_id = r.u32();
      m.tensor = detail::read_sparse(r);
      msg = std::move(m);
      break;
    }
    case MsgType::dense_activation: {
      DenseActivation m;
      m.round = r.u32();
      m.client_id = r.u32();
      m.tensor = detail::read_dense(r);
      msg = std::move(m);
      break;
    }
    case MsgType::dense_gradient: {
      DenseGradient m;
      m.round = r.u32();
      m.client_id = r.u32();
      m.tensor = detail::read_dense(r);
      msg = std::move(m);
      break;
    }
    case MsgType::model_sync: {
      ModelSync m;
      m.round = r.u32();
      m.client_id = r.u32();
      const std::uint8_t dir = r.u8();
      if (dir > 1) throw DecodeError(DecodeErrorCode::malformed, "sync direction " + std::to_string(dir));
      m.direction = static_cast<SyncDirection>(dir);
      const std::uint32_t np = r.u32(), nb = r.u32();
      r.need(4 * (std::size_t{np} + nb));
      m.params.resize(np);
      m.buffers.resize(nb);
      for (auto& v : m.params) v = detail::read_finite(r);
      for (auto& v : m.buffers) v = detail::read_finite(r);
      msg = std::move(m);
      break;
    }
    case MsgType::control:
      msg = Control{r.u8()};
      break;
    default:
      throw DecodeError(DecodeErrorCode::unknown_type, "type " + std::to_string(type));
  }
  if (r.remaining() != 0) throw DecodeError(DecodeErrorCode::malformed, "payload longer than message body");
  return msg;
}

// Bytes counted under the values-only convention: 4 per transmitted value,
// trainable parameters only for model syncs.
inline std::size_t values_bytes(const Message& msg) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ForwardActivation> || std::is_same_v<M, ActivationGradient>) {
          return 4 * m.tensor.count();
        } else if constexpr (std::is_same_v<M, DenseActivation> || std::is_same_v<M, DenseGradient>) {
          return 4 * m.tensor.numel();
        } else if constexpr (std::is_same_v<M, ModelSync>) {
          return 4 * m.params.size();
        } else {
          return 0;
        }
      },
      msg);
}

// Frame sizes, matching encode() byte for byte.
inline std::size_t sparse_frame_bytes(std::size_t rank, std::size_t count) {
  return kFrameHeaderBytes + 8 + 1 + 4 * rank + 4 + 8 * count;
}
inline std::size_t dense_frame_bytes(std::size_t rank, std::size_t numel) {
  return kFrameHeaderBytes + 8 + 1 + 4 * rank + 4 * numel;
}
inline std::size_t sync_frame_bytes(std::size_t params, std::size_t buffers) {
  return kFrameHeaderBytes + 8 + 1 + 4 + 4 + 4 * (params + buffers);
}
inline constexpr std::size_t kControlFrameBytes = kFrameHeaderBytes + 1;

enum class SchemeKind { centralized, fedavg, splitnn, split_sparse };

inline const char* to_string(SchemeKind s) {
  switch (s) {
    case SchemeKind::centralized: return "centralized";
    case SchemeKind::fedavg: return "fedavg";
    case SchemeKind::splitnn: return "splitnn";
    case SchemeKind::split_sparse: return "split-sparse";
  }
  return "unknown";
}

inline SchemeKind parse_scheme(const std::string& s) {
  if (s == "centralized") return SchemeKind::centralized;
  if (s == "fedavg") return SchemeKind::fedavg;
  if (s == "splitnn" || s == "split") return SchemeKind::splitnn;
  if (s == "split-sparse" || s == "proposed") return SchemeKind::split_sparse;
  throw std::invalid_argument("unknown scheme '" + s + "' (centralized|fedavg|splitnn|split-sparse)");
}

enum class Direction { up, down };
enum class Accounting { values_only, on_wire };

struct ByteCount {
  std::uint64_t values_only = 0;
  std::uint64_t on_wire = 0;

  std::uint64_t get(Accounting mode) const { return mode == Accounting::values_only ? values_only : on_wire; }
  ByteCount& operator+=(const ByteCount& o) {
    values_only += o.values_only;
    on_wire += o.on_wire;
    return *this;
  }
  friend bool operator==(const ByteCount&, const ByteCount&) = default;
};

// Per-scheme, per-round, per-direction byte counters.
class TrafficLedger {
 public:
  void record(SchemeKind scheme, std::uint32_t round, Direction dir, const Message& msg, std::size_t frame_bytes) {
    auto& c = counters_[{scheme, round, dir}];
    c.values_only += values_bytes(msg);
    c.on_wire += frame_bytes;
  }

  ByteCount at(SchemeKind scheme, std::uint32_t round, Direction dir) const {
    auto it = counters_.find({scheme, round, dir});
    return it == counters_.end() ? ByteCount{} : it->second;
  }

  ByteCount round_total(SchemeKind scheme, std::uint32_t round) const {
    ByteCount out = at(scheme, round, Direction::up);
    out += at(scheme, round, Direction::down);
    return out;
  }

  ByteCount total() const {
    ByteCount out;
    for (const auto& [key, c] : counters_) out += c;
    return out;
  }

 private:
  std::map<std::tuple<SchemeKind, std::uint32_t, Direction>, ByteCount> counters_;
};

// In-memory carrier. Every frame that passes through is decoded on receipt
// and charged to the ledger at its encoded size.
class LoopbackChannel {
 public:
  LoopbackChannel(TrafficLedger& ledger, SchemeKind scheme) : ledger_(&ledger), scheme_(scheme) {}

  void send(std::uint32_t round, Direction dir, const Message& msg) {
    auto bytes = encode(msg);
    ledger_->record(scheme_, round, dir, msg, bytes.size());
    queue_.push_back(std::move(bytes));
  }

  Message receive() {
    if (queue_.empty()) throw std::logic_error("loopback channel is empty");
    auto bytes = std::move(queue_.front());
    queue_.pop_front();
    return decode(bytes);
  }

  bool empty() const { return queue_.empty(); }

 private:
  TrafficLedger* ledger_;
  SchemeKind scheme_;
  std::deque<std::vector<std::uint8_t>> queue_;
};

}  // namespace splitfed
