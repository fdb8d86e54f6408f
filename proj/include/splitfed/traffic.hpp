#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splitfed/model.hpp"
#include "splitfed/partition.hpp"
#include "splitfed/protocol.hpp"
#include "splitfed/sparse.hpp"

namespace splitfed {

struct TrafficQuery {
  SchemeKind scheme = SchemeKind::split_sparse;
  std::size_t devices = 16;
  std::size_t batch = 32;
  double fraction = 0.1;
  Accounting mode = Accounting::values_only;
  TopKScope scope = TopKScope::batch;
  std::size_t cut_index = 0;  // 0 selects default_cut_index
};

// Per-sample scalar count of the cut activation a^1.
template <typename T>
std::size_t cut_activation_size(const ModelGraph<T>& arch, std::size_t cut_index) {
  if (cut_index == 0) cut_index = default_cut_index(arch);
  return numel(arch.shapes().at(cut_index));
}

// Analytic bytes exchanged in one training iteration (both directions):
//   FedAvg   M * 2 * 4 * P            (full sync up and down)
//   SplitNN  M * 2 * 4 * B * A        (dense a^1 up, da^1 down)
//   Proposed M * 2 * 4 * k,  k = max(1, floor(K * B * A))
// On-wire mode adds indices, message headers and framing exactly as encoded.
template <typename T>
std::uint64_t traffic_bytes(const ModelGraph<T>& arch, const TrafficQuery& q) {
  const std::uint64_t m = q.devices;
  if (m == 0) return 0;
  switch (q.scheme) {
    case SchemeKind::centralized:
      return 0;
    case SchemeKind::fedavg: {
      const std::uint64_t p = arch.param_count(), s = arch.buffer_count();
      const std::uint64_t per = q.mode == Accounting::values_only ? 4 * p : sync_frame_bytes(p, s);
      return m * 2 * per;
    }
    case SchemeKind::splitnn: {
      const std::uint64_t n = static_cast<std::uint64_t>(q.batch) * cut_activation_size(arch, q.cut_index);
      const std::size_t rank = arch.shapes().at(q.cut_index ? q.cut_index : default_cut_index(arch)).size() + 1;
      const std::uint64_t per = q.mode == Accounting::values_only ? 4 * n : dense_frame_bytes(rank, n);
      return m * 2 * per;
    }
    case SchemeKind::split_sparse: {
      const std::size_t a = cut_activation_size(arch, q.cut_index);
      const std::size_t k = q.scope == TopKScope::batch ? topk_count(q.batch * a, q.fraction)
                                                        : q.batch * topk_count(a, q.fraction);
      const std::size_t rank = arch.shapes().at(q.cut_index ? q.cut_index : default_cut_index(arch)).size() + 1;
      const std::uint64_t per = q.mode == Accounting::values_only ? 4 * k : sparse_frame_bytes(rank, k);
      return m * 2 * per;
    }
  }
  return 0;
}

template <typename T>
std::uint64_t traffic_bytes(SchemeKind scheme, const ModelGraph<T>& arch, std::size_t devices, std::size_t batch,
                            double fraction, Accounting mode) {
  TrafficQuery q;
  q.scheme = scheme;
  q.devices = devices;
  q.batch = batch;
  q.fraction = fraction;
  q.mode = mode;
  return traffic_bytes(arch, q);
}

struct TrafficRow {
  std::size_t devices = 0;
  SchemeKind scheme = SchemeKind::fedavg;
  std::uint64_t values_only = 0;
  std::uint64_t on_wire = 0;
};

// {FedAvg, SplitNN, Proposed} x device counts, both accounting modes.
template <typename T>
std::vector<TrafficRow> traffic_table(const ModelGraph<T>& arch, const std::vector<std::size_t>& device_counts,
                                      std::size_t batch, double fraction, std::size_t cut_index = 0,
                                      TopKScope scope = TopKScope::batch) {
  std::vector<TrafficRow> rows;
  for (std::size_t m : device_counts) {
    for (SchemeKind s : {SchemeKind::fedavg, SchemeKind::splitnn, SchemeKind::split_sparse}) {
      TrafficQuery q{s, m, batch, fraction, Accounting::values_only, scope, cut_index};
      TrafficRow row{m, s, traffic_bytes(arch, q), 0};
      q.mode = Accounting::on_wire;
      row.on_wire = traffic_bytes(arch, q);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace splitfed
