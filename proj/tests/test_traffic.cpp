#include <gtest/gtest.h>

#include "splitfed/architecture.hpp"
#include "splitfed/traffic.hpp"

using namespace splitfed;

namespace {

const ModelGraph<float>& reference() {
  static const ModelGraph<float> model =
      load_architecture(std::filesystem::path(SPLITFED_CONFIG_DIR) / "reference_full.cfg").build<float>(0);
  return model;
}

const ModelGraph<float>& desk() {
  static const ModelGraph<float> model =
      load_architecture(std::filesystem::path(SPLITFED_CONFIG_DIR) / "desk_small.cfg").build<float>(0);
  return model;
}

constexpr std::uint64_t kMiB = 1024 * 1024;

}  // namespace

TEST(ReferenceArchitecture, GoldenParameterCount) {
  // 2 * 4 * P * 16 devices ~ 1.36 GB puts P near 10.6M
  EXPECT_EQ(reference().param_count(), 10465698u);
  EXPECT_EQ(reference().buffer_count(), 7808u);
  const double fedavg16 = 2.0 * 4.0 * 16.0 * static_cast<double>(reference().param_count());
  EXPECT_NEAR(fedavg16 / 1.36e9, 1.0, 0.10);
  EXPECT_NEAR(fedavg16 / (1.36 * 1024 * kMiB), 1.0, 0.10);
}

TEST(ReferenceArchitecture, CutActivationIs256By32) {
  EXPECT_EQ(default_cut_index(reference()), 1u);
  EXPECT_EQ(cut_activation_size(reference(), 0), 8192u);
}

TEST(TrafficBytes, SplitNNSixteenDevicesIs32MiB) {
  EXPECT_EQ(traffic_bytes(SchemeKind::splitnn, reference(), 16, 32, 0.1, Accounting::values_only), 32 * kMiB);
  EXPECT_EQ(traffic_bytes(SchemeKind::splitnn, reference(), 32, 32, 0.1, Accounting::values_only), 64 * kMiB);
  EXPECT_EQ(traffic_bytes(SchemeKind::splitnn, reference(), 64, 32, 0.1, Accounting::values_only), 128 * kMiB);
}

TEST(TrafficBytes, ProposedIsTenthOfSplitNNUpToFloorRule) {
  const auto split = traffic_bytes(SchemeKind::splitnn, reference(), 16, 32, 0.1, Accounting::values_only);
  const auto proposed = traffic_bytes(SchemeKind::split_sparse, reference(), 16, 32, 0.1, Accounting::values_only);
  // floor(0.1 * 262144) = 26214 entries per message, 32 messages
  EXPECT_EQ(proposed, 16u * 2 * 4 * 26214);
  EXPECT_EQ(proposed, 3355392u);
  // 3,355,443 is 0.1 * 32 MiB before flooring; each message may lose at most one entry
  EXPECT_LE(static_cast<double>(split) * 0.1 - static_cast<double>(proposed), 16.0 * 2 * 4);
  EXPECT_GE(static_cast<double>(split) * 0.1 - static_cast<double>(proposed), 0.0);
}

TEST(TrafficBytes, ZeroDevicesIsZero) {
  for (auto s : {SchemeKind::centralized, SchemeKind::fedavg, SchemeKind::splitnn, SchemeKind::split_sparse})
    for (auto mode : {Accounting::values_only, Accounting::on_wire})
      EXPECT_EQ(traffic_bytes(s, reference(), 0, 32, 0.1, mode), 0u);
}

TEST(TrafficBytes, FedAvgNearPublishedGigabytes) {
  const double rows[] = {1.36e9, 2.72e9, 5.45e9};
  const std::size_t devices[] = {16, 32, 64};
  const auto base = traffic_bytes(SchemeKind::fedavg, reference(), 16, 32, 0.1, Accounting::values_only);
  for (int i = 0; i < 3; ++i) {
    const auto b = traffic_bytes(SchemeKind::fedavg, reference(), devices[i], 32, 0.1, Accounting::values_only);
    EXPECT_NEAR(static_cast<double>(b) / rows[i], 1.0, 0.10) << devices[i];
    EXPECT_EQ(b, base * (devices[i] / 16));
  }
}

TEST(TrafficBytes, LinearInDevicesForEveryScheme) {
  for (const auto* model : {&reference(), &desk()})
    for (auto s : {SchemeKind::fedavg, SchemeKind::splitnn, SchemeKind::split_sparse})
      for (auto mode : {Accounting::values_only, Accounting::on_wire}) {
        const auto one = traffic_bytes(s, *model, 1, 32, 0.1, mode);
        for (std::size_t m : {2, 3, 16, 64}) EXPECT_EQ(traffic_bytes(s, *model, m, 32, 0.1, mode), m * one);
      }
}

TEST(TrafficBytes, ReductionRatios) {
  const auto fedavg = traffic_bytes(SchemeKind::fedavg, reference(), 16, 32, 0.1, Accounting::values_only);
  const auto proposed = traffic_bytes(SchemeKind::split_sparse, reference(), 16, 32, 0.1, Accounting::values_only);
  const double ratio = static_cast<double>(proposed) / static_cast<double>(fedavg);
  EXPECT_GE(ratio, 0.0015);
  EXPECT_LE(ratio, 0.0030);
}

TEST(TrafficBytes, OnWireAddsIndicesAndFraming) {
  const auto& m = reference();
  // rank-3 cut tensor (batch, channels, length)
  EXPECT_EQ(traffic_bytes(SchemeKind::split_sparse, m, 1, 32, 0.1, Accounting::on_wire),
            2 * (8 + 8 + 1 + 12 + 4 + 8 * 26214u));
  EXPECT_EQ(traffic_bytes(SchemeKind::splitnn, m, 1, 32, 0.1, Accounting::on_wire), 2 * (8 + 8 + 1 + 12 + 4 * 262144u));
  EXPECT_EQ(traffic_bytes(SchemeKind::fedavg, m, 1, 32, 0.1, Accounting::on_wire),
            2 * (8 + 17 + 4 * (10465698u + 7808u)));
}

TEST(TrafficBytes, SampleScopeFloorsPerSample) {
  TrafficQuery q{SchemeKind::split_sparse, 1, 3, 0.1, Accounting::values_only, TopKScope::sample, 0};
  // desk cut: 16 channels x 256
  EXPECT_EQ(traffic_bytes(desk(), q), 2u * 4 * 3 * 409);
}

TEST(TrafficTable, DeskConfigIsInternallyConsistent) {
  const auto rows = traffic_table(desk(), {16, 32, 64}, 32, 0.1);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t i = 0; i < rows.size(); i += 3) {
    const auto& split = rows[i + 1];
    const auto& prop = rows[i + 2];
    EXPECT_EQ(split.scheme, SchemeKind::splitnn);
    EXPECT_EQ(prop.scheme, SchemeKind::split_sparse);
    EXPECT_NEAR(static_cast<double>(prop.values_only) / static_cast<double>(split.values_only), 0.1,
                static_cast<double>(2 * 4 * split.devices) / static_cast<double>(split.values_only));
    EXPECT_GE(rows[i].on_wire, rows[i].values_only);
    EXPECT_GE(prop.on_wire, prop.values_only);
  }
  for (std::size_t i = 3; i < rows.size(); ++i) EXPECT_EQ(rows[i].values_only, rows[i % 3].values_only * rows[i].devices / 16);
}
