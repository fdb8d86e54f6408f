#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitfed/tensor.hpp"

namespace splitfed {

// Top-K selection of a dense cut tensor: flat row-major positions in
// strictly increasing order, with their single-precision values.
struct SparseCutTensor {
  Shape shape;
  std::vector<std::uint32_t> indices;
  std::vector<float> values;

  std::size_t count() const { return indices.size(); }
  std::size_t dense_size() const { return numel(shape); }

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const {
    if (indices.size() != values.size()) throw std::invalid_argument("sparse tensor index/value count mismatch");
    const std::size_t n = dense_size();
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("sparse tensor has a zero dimension");
    }
    if (indices.size() > n) throw std::invalid_argument("sparse tensor holds more entries than elements");
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= n) throw std::out_of_range("sparse index " + std::to_string(indices[i]) + " out of bounds");
      if (i > 0 && indices[i] <= indices[i - 1]) throw std::invalid_argument("sparse indices not strictly increasing");
    }
  }

  friend bool operator==(const SparseCutTensor&, const SparseCutTensor&) = default;
};

enum class TopKScope { batch, sample };

inline std::size_t topk_count(std::size_t numel, double fraction) {
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(numel)));
  return std::max<std::size_t>(1, std::min(k, numel));
}

inline void check_fraction(double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("top-K fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
}

namespace detail {

// Appends the k largest-|v| positions of data[offset, offset+n), ties to the
// lowest position, in ascending order.
inline void select_topk(const float* data, std::size_t offset, std::size_t n, std::size_t k,
                        std::vector<std::uint32_t>& out) {
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  auto before = [data](std::uint32_t a, std::uint32_t b) {
    const float ma = std::fabs(data[a]), mb = std::fabs(data[b]);
    return ma > mb || (ma == mb && a < b);
  };
  if (k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
  order.resize(k);
  std::sort(order.begin(), order.end());
  for (std::uint32_t i : order) out.push_back(static_cast<std::uint32_t>(offset + i));
}

}  // namespace detail

// Keeps k = max(1, floor(K * numel)) largest-magnitude entries. With
// TopKScope::sample the rule applies to each leading-dimension slice.
inline SparseCutTensor topk_sparsify(const Tensor<float>& t, double fraction,
                                     TopKScope scope = TopKScope::batch) {
  check_fraction(fraction);
  if (t.empty()) throw std::invalid_argument("cannot sparsify an empty tensor");
  if (t.numel() > std::size_t{0xFFFFFFFFu}) throw std::invalid_argument("tensor too large for 32-bit indices");
  SparseCutTensor s{t.shape(), {}, {}};
  if (scope == TopKScope::batch || t.rank() < 2) {
    detail::select_topk(t.data(), 0, t.numel(), topk_count(t.numel(), fraction), s.indices);
  } else {
    const std::size_t rows = t.dim(0), per = t.numel() / rows;
    const std::size_t k = topk_count(per, fraction);
    for (std::size_t r = 0; r < rows; ++r) detail::select_topk(t.data() + r * per, r * per, per, k, s.indices);
  }
  s.values.reserve(s.indices.size());
  for (std::uint32_t i : s.indices) s.values.push_back(t[i]);
  return s;
}

inline Tensor<float> densify(const SparseCutTensor& s) {
  Tensor<float> out(s.shape);
  if (s.indices.size() != s.values.size()) throw std::invalid_argument("sparse tensor index/value count mismatch");
  for (std::size_t i = 0; i < s.indices.size(); ++i) {
    if (s.indices[i] >= out.numel()) {
      throw std::out_of_range("sparse index " + std::to_string(s.indices[i]) + " out of bounds for " +
                              shape_str(s.shape));
    }
    out[s.indices[i]] = s.values[i];
  }
  return out;
}

// Error-feedback accumulator of mass not yet transmitted.
struct ResidualBuffer {
  Tensor<float> residual;

  ResidualBuffer() = default;
  explicit ResidualBuffer(const Shape& shape) : residual(shape) {}

  bool initialized() const { return !residual.empty(); }
};

// m = t + r; send topk(m); r <- m - densify(sent).
inline SparseCutTensor residual_sparsify(const Tensor<float>& t, ResidualBuffer& r, double fraction,
                                         TopKScope scope = TopKScope::batch) {
  if (!r.initialized()) r = ResidualBuffer(t.shape());
  require_same_shape(t, r.residual, "residual_sparsify");
  Tensor<float> m = t;
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] += r.residual[i];
  SparseCutTensor s = topk_sparsify(m, fraction, scope);
  for (std::uint32_t i : s.indices) m[i] = 0.0f;
  r.residual = std::move(m);
  return s;
}

struct SparsityStats {
  std::size_t kept_count = 0;
  double kept_fraction = 0;
  std::size_t values_bytes = 0;
  std::size_t index_bytes = 0;
};

inline SparsityStats sparsity_stats(const SparseCutTensor& s) {
  const std::size_t n = s.dense_size();
  return {s.count(), n ? static_cast<double>(s.count()) / static_cast<double>(n) : 0.0, 4 * s.count(),
          4 * s.count()};
}

}  // namespace splitfed
