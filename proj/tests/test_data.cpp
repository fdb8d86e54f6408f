#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include <gtest/gtest.h>

#include "splitfed/data.hpp"

using namespace splitfed;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "splitfed_test_data";
  fs::create_directories(dir);
  return dir / name;
}

std::string row(int label, std::size_t count, float value = 0.5f) {
  std::string s = std::to_string(label);
  for (std::size_t i = 0; i < count; ++i) s += "," + std::to_string(value);
  return s + "\n";
}

std::string data_error(const fs::path& path) {
  try {
    load_segments(path);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

// Multiset of (label, first value, last value) fingerprints.
std::multiset<std::tuple<int, float, float>> fingerprint(const SegmentDataset& ds) {
  std::multiset<std::tuple<int, float, float>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto seg = ds.segment(i);
    out.emplace(ds.label(i), seg[0], seg[kSegmentLength - 1]);
  }
  return out;
}

}  // namespace

TEST(Synth, EmptyDataset) {
  EXPECT_EQ(synth_generate(0, 1, 0.5).size(), 0u);
}

TEST(Synth, DeterministicPerSeed) {
  EXPECT_EQ(synth_generate(50, 3, 0.5), synth_generate(50, 3, 0.5));
  EXPECT_FALSE(synth_generate(50, 3, 0.5) == synth_generate(50, 4, 0.5));
}

TEST(Synth, SegmentsHaveLengthAndRange) {
  const auto ds = synth_generate(200, 5, 0.5);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto seg = ds.segment(i);
    ASSERT_EQ(seg.size(), kSegmentLength);
    float peak = 0;
    for (float v : seg) {
      EXPECT_LE(std::fabs(v), 1.0f);
      peak = std::max(peak, std::fabs(v));
    }
    EXPECT_FLOAT_EQ(peak, 1.0f);
    EXPECT_TRUE(ds.label(i) == 0 || ds.label(i) == 1);
  }
}

TEST(Synth, PositiveRateWithinOneSample) {
  for (double rate : {0.0, 0.1, 0.37, 0.5, 0.9, 1.0})
    for (std::size_t n : {1, 7, 100, 1001}) {
      const auto ds = synth_generate(n, 9, rate);
      EXPECT_LE(std::fabs(ds.positive_rate() - rate), 1.0 / static_cast<double>(n)) << rate << " " << n;
    }
  EXPECT_THROW(synth_generate(10, 1, 1.5), std::invalid_argument);
}

TEST(Synth, IrregularClassHasVariableIntervals) {
  // measured from spike peaks: class 1 coefficient of variation well above class 0
  SynthParams p;
  p.noise = 0.0;
  const auto ds = synth_generate(400, 10, 0.5, p);
  double cv[2] = {0, 0};
  int count[2] = {0, 0};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto seg = ds.segment(i);
    std::vector<double> peaks;
    for (std::size_t t = 1; t + 1 < kSegmentLength; ++t)
      if (seg[t] > 0.5f && seg[t] >= seg[t - 1] && seg[t] > seg[t + 1]) peaks.push_back(static_cast<double>(t));
    if (peaks.size() < 4) continue;
    std::vector<double> gaps;
    for (std::size_t k = 1; k < peaks.size(); ++k) gaps.push_back(peaks[k] - peaks[k - 1]);
    double mean = 0, var = 0;
    for (double g : gaps) mean += g;
    mean /= static_cast<double>(gaps.size());
    for (double g : gaps) var += (g - mean) * (g - mean);
    var /= static_cast<double>(gaps.size());
    cv[ds.label(i)] += std::sqrt(var) / mean;
    ++count[ds.label(i)];
  }
  ASSERT_GT(count[0], 50);
  ASSERT_GT(count[1], 50);
  EXPECT_LT(cv[0] / count[0], 0.1);
  EXPECT_GE(cv[1] / count[1], 0.3);
}

TEST(LoadSegments, TwoValidRows) {
  const auto path = temp_file("two.csv");
  std::ofstream(path) << row(0, 256) << row(1, 256, -0.25f);
  const auto ds = load_segments(path);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.label(1), 1);
  EXPECT_FLOAT_EQ(ds.segment(1)[255], -0.25f);
}

TEST(LoadSegments, ShortRowNamesTheRow) {
  const auto path = temp_file("short.csv");
  std::ofstream(path) << row(0, 256) << row(1, 256) << row(0, 255);
  const std::string msg = data_error(path);
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("255"), std::string::npos) << msg;
}

TEST(LoadSegments, ParseErrorsNameTheRow) {
  const auto path = temp_file("bad.csv");
  std::ofstream(path) << row(0, 256) << "1,abc" + row(0, 255).substr(1);
  EXPECT_NE(data_error(path).find("row 2"), std::string::npos);
  std::ofstream(path) << row(2, 256);
  EXPECT_NE(data_error(path).find("row 1"), std::string::npos);
  EXPECT_NE(data_error(temp_file("missing.csv")).find("missing.csv"), std::string::npos);
}

TEST(LoadSegments, WriteLoadRoundTripIsExact) {
  const auto ds = synth_generate(64, 11, 0.5);
  const auto path = temp_file("roundtrip.csv");
  write_segments(ds, path);
  EXPECT_EQ(load_segments(path), ds);
}

TEST(Shards, SingleShardEqualsInput) {
  const auto ds = synth_generate(37, 12, 0.5);
  const auto shards = partition_shards(ds, {ShardStrategy::iid, 1, 99});
  ASSERT_EQ(shards.size(), 1u);
  EXPECT_EQ(shards[0], ds);
}

TEST(Shards, IidIsDisjointCover) {
  const auto ds = synth_generate(203, 13, 0.5);
  for (std::size_t m : {2, 3, 7, 16, 203}) {
    const auto idx = shard_indices(ds, {ShardStrategy::iid, m, 5});
    std::vector<std::size_t> all;
    std::size_t lo = ds.size(), hi = 0;
    for (const auto& s : idx) {
      all.insert(all.end(), s.begin(), s.end());
      lo = std::min(lo, s.size());
      hi = std::max(hi, s.size());
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expected(ds.size());
    std::iota(expected.begin(), expected.end(), std::size_t{0});
    EXPECT_EQ(all, expected) << m;
    EXPECT_LE(hi - lo, 1u) << m;

    auto union_fp = fingerprint(SegmentDataset{});
    for (const auto& shard : partition_shards(ds, {ShardStrategy::iid, m, 5})) {
      auto fp = fingerprint(shard);
      union_fp.insert(fp.begin(), fp.end());
    }
    EXPECT_EQ(union_fp, fingerprint(ds)) << m;
  }
}

TEST(Shards, LabelSortedIsMostlySingleLabel) {
  const auto ds = synth_generate(400, 14, 0.5);
  const auto shards = partition_shards(ds, {ShardStrategy::label_sorted, 2, 0});
  ASSERT_EQ(shards.size(), 2u);
  for (const auto& s : shards) {
    const double rate = s.positive_rate();
    EXPECT_GE(std::max(rate, 1.0 - rate), 0.9);
  }
}

TEST(Shards, TooManyShards) {
  const auto ds = synth_generate(3, 15, 0.5);
  EXPECT_THROW(partition_shards(ds, {ShardStrategy::iid, 4, 0}), std::invalid_argument);
  EXPECT_THROW(partition_shards(ds, {ShardStrategy::iid, 0, 0}), std::invalid_argument);
}

TEST(Dataset, BatchShapeAndLabels) {
  const auto ds = synth_generate(10, 16, 0.5);
  const std::vector<std::size_t> idx{3, 7, 1};
  const auto x = ds.batch(idx);
  EXPECT_EQ(x.shape(), (Shape{3, 1, 256}));
  EXPECT_EQ(x.at(1, 0, 5), ds.segment(7)[5]);
  EXPECT_EQ(ds.batch_labels(idx), (std::vector<int>{ds.label(3), ds.label(7), ds.label(1)}));
}
