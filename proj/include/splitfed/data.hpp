#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "splitfed/tensor.hpp"

namespace splitfed {

inline constexpr std::size_t kSegmentLength = 256;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fixed-length single-lead segments with binary labels (0 normal, 1 arrhythmia).
class SegmentDataset {
 public:
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }

  void add(std::span<const float> segment, int label) {
    if (segment.size() != kSegmentLength) {
      throw DataError("segment length " + std::to_string(segment.size()) + " != " + std::to_string(kSegmentLength));
    }
    if (label != 0 && label != 1) throw DataError("label " + std::to_string(label) + " is not binary");
    samples_.insert(samples_.end(), segment.begin(), segment.end());
    labels_.push_back(label);
  }

  std::span<const float> segment(std::size_t i) const {
    return {samples_.data() + i * kSegmentLength, kSegmentLength};
  }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }

  SegmentDataset subset(std::span<const std::size_t> indices) const {
    SegmentDataset out;
    out.samples_.reserve(indices.size() * kSegmentLength);
    out.labels_.reserve(indices.size());
    for (std::size_t i : indices) out.add(segment(i), label(i));
    return out;
  }

  // (batch, 1, 256) input tensor and matching labels.
  Tensor<float> batch(std::span<const std::size_t> indices) const {
    std::vector<float> data;
    data.reserve(indices.size() * kSegmentLength);
    for (std::size_t i : indices) {
      auto s = segment(i);
      data.insert(data.end(), s.begin(), s.end());
    }
    return Tensor<float>({indices.size(), 1, kSegmentLength}, std::move(data));
  }
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(label(i));
    return out;
  }

  double positive_rate() const {
    if (labels_.empty()) return 0.0;
    return static_cast<double>(std::count(labels_.begin(), labels_.end(), 1)) / static_cast<double>(size());
  }

  friend bool operator==(const SegmentDataset&, const SegmentDataset&) = default;

 private:
  std::vector<float> samples_;
  std::vector<int> labels_;
};

struct SynthParams {
  double min_interval = 20.0;  // samples between beats, class 0
  double max_interval = 36.0;
  double jitter = 1.0;  // std-dev of class-0 interval jitter
  double irregular_low = 0.4;  // class-1 intervals ~ U[low*T, high*T]
  double irregular_high = 1.6;
  double spike_width = 1.5;
  double noise = 0.1;
};

namespace detail {

inline void render_segment(std::mt19937_64& rng, bool irregular, const SynthParams& p, std::vector<float>& out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double period = p.min_interval + (p.max_interval - p.min_interval) * unit(rng);
  std::vector<double> signal(kSegmentLength, 0.0);
  double t = period * unit(rng) - period;
  while (t < static_cast<double>(kSegmentLength) + 6 * p.spike_width) {
    const double amp = 0.9 + 0.2 * unit(rng);
    const auto lo = static_cast<long>(std::floor(t - 6 * p.spike_width));
    const auto hi = static_cast<long>(std::ceil(t + 6 * p.spike_width));
    for (long i = std::max(0L, lo); i <= hi && i < static_cast<long>(kSegmentLength); ++i) {
      const double d = (static_cast<double>(i) - t) / p.spike_width;
      signal[static_cast<std::size_t>(i)] += amp * std::exp(-0.5 * d * d);
    }
    double step = irregular ? period * (p.irregular_low + (p.irregular_high - p.irregular_low) * unit(rng))
                            : period + p.jitter * gauss(rng);
    t += std::max(step, 2.0);
  }
  double peak = 0.0;
  for (auto& v : signal) {
    v += p.noise * gauss(rng);
    peak = std::max(peak, std::fabs(v));
  }
  out.resize(kSegmentLength);
  for (std::size_t i = 0; i < kSegmentLength; ++i) out[i] = static_cast<float>(peak > 0 ? signal[i] / peak : 0.0);
}

}  // namespace detail

// Synthetic ECG-like segments: class 0 is a regular spike train, class 1 has
// per-beat intervals U[0.4T, 1.6T] (coefficient of variation ~0.35).
// Exactly round(positive_rate * n) samples are positive.
inline SegmentDataset synth_generate(std::size_t n, std::uint64_t seed, double positive_rate,
                                     const SynthParams& params = {}) {
  if (!(positive_rate >= 0.0 && positive_rate <= 1.0)) throw std::invalid_argument("positive_rate must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  const auto positives = static_cast<std::size_t>(std::llround(positive_rate * static_cast<double>(n)));
  std::vector<int> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(positives), 1);
  std::shuffle(labels.begin(), labels.end(), rng);
  SegmentDataset ds;
  std::vector<float> seg;
  for (std::size_t i = 0; i < n; ++i) {
    detail::render_segment(rng, labels[i] == 1, params, seg);
    ds.add(seg, labels[i]);
  }
  return ds;
}

// CSV, one row per segment: integer label then 256 values.
inline void write_segments(const SegmentDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.label(i);
    for (float v : ds.segment(i)) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

inline SegmentDataset load_segments(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open segment file " + path.string());
  SegmentDataset ds;
  std::string line;
  std::vector<float> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      return DataError(path.string() + ": row " + std::to_string(row) + ": " + why);
    };
    values.clear();
    const char* p = line.data();
    const char* end = p + line.size();
    int label = 0;
    auto [lp, lec] = std::from_chars(p, end, label);
    if (lec != std::errc() || (lp != end && *lp != ',')) throw fail("label is not an integer");
    if (label != 0 && label != 1) throw fail("label " + std::to_string(label) + " is not 0 or 1");
    p = lp;
    while (p != end) {
      ++p;  // skip ','
      float v = 0;
      auto [vp, vec] = std::from_chars(p, end, v);
      if (vec != std::errc() || (vp != end && *vp != ',')) {
        throw fail("value " + std::to_string(values.size() + 1) + " is not a number");
      }
      values.push_back(v);
      p = vp;
    }
    if (values.size() != kSegmentLength) {
      throw fail("segment has " + std::to_string(values.size()) + " values, expected " +
                 std::to_string(kSegmentLength));
    }
    ds.add(values, label);
  }
  return ds;
}

enum class ShardStrategy { iid, label_sorted };

struct ShardSpec {
  ShardStrategy strategy = ShardStrategy::iid;
  std::size_t devices = 1;
  std::uint64_t seed = 0;
};

// Index sets for each shard. IID: a seeded permutation cut into contiguous
// blocks whose sizes differ by at most one; label-sorted: contiguous blocks
// of the label-sorted order. Each shard keeps dataset order internally.
inline std::vector<std::vector<std::size_t>> shard_indices(const SegmentDataset& ds, const ShardSpec& spec) {
  if (spec.devices == 0) throw std::invalid_argument("shard count must be at least 1");
  if (spec.devices > ds.size()) {
    throw std::invalid_argument("cannot split " + std::to_string(ds.size()) + " segments across " +
                                std::to_string(spec.devices) + " shards");
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (spec.strategy == ShardStrategy::iid) {
    std::mt19937_64 rng(spec.seed);
    std::shuffle(order.begin(), order.end(), rng);
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ds.label(a) < ds.label(b); });
  }
  std::vector<std::vector<std::size_t>> shards(spec.devices);
  const std::size_t base = ds.size() / spec.devices, extra = ds.size() % spec.devices;
  std::size_t pos = 0;
  for (std::size_t j = 0; j < spec.devices; ++j) {
    const std::size_t len = base + (j < extra ? 1 : 0);
    shards[j].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    if (spec.strategy == ShardStrategy::iid) std::sort(shards[j].begin(), shards[j].end());
    pos += len;
  }
  return shards;
}

inline std::vector<SegmentDataset> partition_shards(const SegmentDataset& ds, const ShardSpec& spec) {
  std::vector<SegmentDataset> out;
  for (const auto& idx : shard_indices(ds, spec)) out.push_back(ds.subset(idx));
  return out;
}

}  // namespace splitfed
