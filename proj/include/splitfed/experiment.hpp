#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "splitfed/architecture.hpp"
#include "splitfed/data.hpp"
#include "splitfed/federation.hpp"
#include "splitfed/kv_config.hpp"
#include "splitfed/traffic.hpp"

namespace splitfed {

enum class DataSource { synthetic, csv };

struct ExperimentConfig {
  FederationOptions federation;
  std::size_t rounds = 100;
  std::size_t eval_every = 10;  // 0: evaluate after the last round only
  Architecture arch;

  DataSource source = DataSource::synthetic;
  std::filesystem::path train_path, test_path;
  std::size_t train_size = 4096;
  std::size_t test_size = 1024;
  double positive_rate = 0.5;
  std::uint64_t data_seed = 0;

  std::vector<std::size_t> traffic_devices{16, 32, 64};
  std::size_t traffic_batch = 32;

  std::filesystem::path out_dir;
  std::string resolved_text;  // config text after overrides, kept for provenance
};

namespace detail {

inline std::vector<std::size_t> parse_size_list(const KvEntry& e, const std::string& src) {
  std::vector<std::size_t> out;
  std::stringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KvEntry part = e;
    part.value = trim(item);
    out.push_back(parse_value<std::size_t>(part, src));
  }
  if (out.empty()) throw ConfigError(src, e.line, "empty list for '" + KvConfig::qualified(e) + "'");
  return out;
}

}  // namespace detail

inline std::string render_config(const KvConfig& cfg);

// Applies "section.key=value" overrides on top of the file contents.
inline void apply_overrides(KvConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override", 0, "'" + o + "' is not section.key=value");
    }
    cfg.set(trim(o.substr(0, dot)), trim(o.substr(dot + 1, eq - dot - 1)), trim(o.substr(eq + 1)));
  }
}

inline ExperimentConfig load_experiment_config(const KvConfig& cfg) {
  const std::string& src = cfg.source();
  cfg.require_sections({"experiment", "optimizer", "model", "layers", "data", "traffic", "output"});
  cfg.require_known("experiment", {"scheme", "devices", "k", "error_feedback", "topk_scope", "rounds", "batch_size",
                                   "seed", "eval_every", "local_steps", "sharding"});
  cfg.require_known("optimizer", {"learning_rate", "momentum"});
  cfg.require_known("data", {"source", "train_path", "test_path", "train_size", "test_size", "positive_rate", "seed",
                             "full_scale_train_size", "full_scale_test_size"});
  cfg.require_known("traffic", {"devices", "batch_size"});
  cfg.require_known("output", {"dir"});

  ExperimentConfig ec;
  ec.arch = load_architecture(cfg);
  auto& fo = ec.federation;
  fo.cut_index = ec.arch.cut_index;

  auto with = [&](const char* section, const char* key, auto fn) {
    if (auto e = cfg.get(section, key)) fn(*e);
  };
  auto as_size = [&](const KvEntry& e) { return parse_value<std::size_t>(e, src); };
  auto positive = [&](const KvEntry& e) {
    const auto v = as_size(e);
    if (v == 0) throw ConfigError(src, e.line, "'" + KvConfig::qualified(e) + "' must be positive");
    return v;
  };

  with("experiment", "scheme", [&](const KvEntry& e) {
    try {
      fo.scheme.kind = parse_scheme(e.value);
    } catch (const std::invalid_argument& err) {
      throw ConfigError(src, e.line, err.what());
    }
  });
  with("experiment", "devices", [&](const KvEntry& e) { fo.devices = positive(e); });
  with("experiment", "k", [&](const KvEntry& e) {
    fo.scheme.fraction = parse_value<double>(e, src);
    if (!(fo.scheme.fraction > 0 && fo.scheme.fraction <= 1)) {
      throw ConfigError(src, e.line, "experiment.k must lie in (0, 1]");
    }
  });
  with("experiment", "error_feedback", [&](const KvEntry& e) { fo.scheme.error_feedback = parse_value<bool>(e, src); });
  with("experiment", "topk_scope", [&](const KvEntry& e) {
    if (e.value == "batch") fo.scheme.scope = TopKScope::batch;
    else if (e.value == "sample") fo.scheme.scope = TopKScope::sample;
    else throw ConfigError(src, e.line, "experiment.topk_scope must be batch or sample");
  });
  with("experiment", "rounds", [&](const KvEntry& e) { ec.rounds = as_size(e); });
  with("experiment", "batch_size", [&](const KvEntry& e) { fo.batch_size = positive(e); });
  with("experiment", "seed", [&](const KvEntry& e) { fo.seed = parse_value<std::uint64_t>(e, src); });
  with("experiment", "eval_every", [&](const KvEntry& e) { ec.eval_every = as_size(e); });
  with("experiment", "local_steps", [&](const KvEntry& e) { fo.local_steps = positive(e); });
  with("experiment", "sharding", [&](const KvEntry& e) {
    if (e.value == "iid") fo.sharding = ShardStrategy::iid;
    else if (e.value == "label-sorted") fo.sharding = ShardStrategy::label_sorted;
    else throw ConfigError(src, e.line, "experiment.sharding must be iid or label-sorted");
  });
  with("optimizer", "learning_rate", [&](const KvEntry& e) {
    fo.learning_rate = parse_value<double>(e, src);
    if (!(fo.learning_rate > 0)) throw ConfigError(src, e.line, "optimizer.learning_rate must be positive");
  });
  with("optimizer", "momentum", [&](const KvEntry& e) {
    fo.momentum = parse_value<double>(e, src);
    if (!(fo.momentum >= 0 && fo.momentum < 1)) throw ConfigError(src, e.line, "optimizer.momentum must lie in [0, 1)");
  });

  ec.data_seed = fo.seed;
  auto resolve = [&](const KvEntry& e) {
    std::filesystem::path p = e.value;
    if (p.is_relative() && !cfg.path().empty()) p = cfg.path().parent_path() / p;
    return p;
  };
  with("data", "source", [&](const KvEntry& e) {
    if (e.value == "synthetic") ec.source = DataSource::synthetic;
    else if (e.value == "csv") ec.source = DataSource::csv;
    else throw ConfigError(src, e.line, "data.source must be synthetic or csv");
  });
  with("data", "train_path", [&](const KvEntry& e) { ec.train_path = resolve(e); });
  with("data", "test_path", [&](const KvEntry& e) { ec.test_path = resolve(e); });
  with("data", "train_size", [&](const KvEntry& e) { ec.train_size = as_size(e); });
  with("data", "test_size", [&](const KvEntry& e) { ec.test_size = as_size(e); });
  with("data", "seed", [&](const KvEntry& e) { ec.data_seed = parse_value<std::uint64_t>(e, src); });
  with("data", "positive_rate", [&](const KvEntry& e) {
    ec.positive_rate = parse_value<double>(e, src);
    if (!(ec.positive_rate >= 0 && ec.positive_rate <= 1)) throw ConfigError(src, e.line, "data.positive_rate must lie in [0, 1]");
  });
  if (ec.source == DataSource::csv && (ec.train_path.empty() || ec.test_path.empty())) {
    throw ConfigError(src, 0, "data.source = csv requires data.train_path and data.test_path");
  }
  with("traffic", "devices", [&](const KvEntry& e) { ec.traffic_devices = detail::parse_size_list(e, src); });
  with("traffic", "batch_size", [&](const KvEntry& e) { ec.traffic_batch = positive(e); });
  with("output", "dir", [&](const KvEntry& e) { ec.out_dir = e.value; });

  ec.resolved_text = render_config(cfg);
  return ec;
}

inline std::string fmt_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_number(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct DatasetPair {
  SegmentDataset train;
  SegmentDataset test;
};

inline DatasetPair load_datasets(const ExperimentConfig& ec) {
  if (ec.source == DataSource::csv) return {load_segments(ec.train_path), load_segments(ec.test_path)};
  return {synth_generate(ec.train_size, derive_seed(ec.data_seed, 10), ec.positive_rate),
          synth_generate(ec.test_size, derive_seed(ec.data_seed, 11), ec.positive_rate)};
}

inline std::string metrics_header(std::size_t devices) {
  std::string h = "round,loss,pooled_acc";
  for (std::size_t j = 0; j < devices; ++j) h += ",acc_client_" + std::to_string(j);
  return h + ",bytes_values_only,bytes_on_wire";
}

inline std::string metrics_row(const RoundMetrics& m, std::size_t devices) {
  std::string row = std::to_string(m.round) + "," + fmt_number(m.loss) + ",";
  if (m.pooled_accuracy) row += fmt_number(*m.pooled_accuracy);
  for (std::size_t j = 0; j < devices; ++j) {
    row += ",";
    if (m.pooled_accuracy && j < m.client_accuracy.size()) row += fmt_number(m.client_accuracy[j]);
  }
  return row + "," + std::to_string(m.bytes.values_only) + "," + std::to_string(m.bytes.on_wire);
}

inline void write_traffic_csv(const std::vector<TrafficRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "devices,scheme,bytes_values_only,bytes_on_wire,mib_values_only,mib_on_wire\n";
  for (const auto& r : rows) {
    out << r.devices << ',' << to_string(r.scheme) << ',' << r.values_only << ',' << r.on_wire << ','
        << fmt_number(static_cast<double>(r.values_only) / (1024.0 * 1024.0)) << ','
        << fmt_number(static_cast<double>(r.on_wire) / (1024.0 * 1024.0)) << '\n';
  }
}

struct ExperimentResult {
  std::vector<RoundMetrics> series;
  EvalResult final_eval;
  ByteCount total_bytes;
};

// Runs R rounds, evaluating every eval_every rounds and after the last one.
// Writes metrics.csv, traffic_table.csv, summary.cfg and config.cfg when an
// output directory is set.
inline ExperimentResult run_experiment(const ExperimentConfig& ec, const DatasetPair& data,
                                       const std::function<void(const RoundMetrics&)>& on_round = {}) {
  Federation fed(ec.arch, data.train, ec.federation);
  const std::size_t devices = ec.federation.devices;
  ExperimentResult result;

  std::ofstream csv;
  if (!ec.out_dir.empty()) {
    std::filesystem::create_directories(ec.out_dir);
    csv.open(ec.out_dir / "metrics.csv", std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + (ec.out_dir / "metrics.csv").string());
    csv << metrics_header(devices) << '\n';
  }
  for (std::size_t r = 0; r < ec.rounds; ++r) {
    RoundMetrics m = fed.run_round();
    const bool last = r + 1 == ec.rounds;
    if (last || (ec.eval_every > 0 && (r + 1) % ec.eval_every == 0)) {
      auto ev = fed.evaluate(data.test);
      m.pooled_accuracy = ev.pooled;
      m.client_accuracy = ev.per_client;
      if (last) result.final_eval = ev;
    }
    result.total_bytes += m.bytes;
    if (csv.is_open()) csv << metrics_row(m, devices) << '\n';
    if (on_round) on_round(m);
    result.series.push_back(std::move(m));
  }
  if (ec.rounds == 0 && !data.test.empty()) result.final_eval = fed.evaluate(data.test);

  if (!ec.out_dir.empty()) {
    const auto model = ec.arch.build<float>(0);
    write_traffic_csv(traffic_table(model, ec.traffic_devices, ec.traffic_batch, ec.federation.scheme.fraction,
                                    ec.federation.cut_index, ec.federation.scheme.scope),
                      ec.out_dir / "traffic_table.csv");
    std::ofstream summary(ec.out_dir / "summary.cfg", std::ios::binary);
    summary << "[summary]\n"
            << "scheme = " << to_string(ec.federation.scheme.kind) << '\n'
            << "devices = " << devices << '\n'
            << "k = " << fmt_number(ec.federation.scheme.fraction) << '\n'
            << "rounds = " << ec.rounds << '\n'
            << "final_pooled_acc = " << fmt_number(result.final_eval.pooled) << '\n'
            << "final_loss = " << (result.series.empty() ? std::string("") : fmt_number(result.series.back().loss))
            << '\n'
            << "bytes_values_only = " << result.total_bytes.values_only << '\n'
            << "bytes_on_wire = " << result.total_bytes.on_wire << '\n';
    std::ofstream prov(ec.out_dir / "config.cfg", std::ios::binary);
    prov << ec.resolved_text;
  }
  return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& ec,
                                       const std::function<void(const RoundMetrics&)>& on_round = {}) {
  return run_experiment(ec, load_datasets(ec), on_round);
}

// Serializes the effective configuration, grouped by section in first-seen
// order with later values overriding earlier ones.
inline std::string render_config(const KvConfig& cfg) {
  std::vector<std::string> sections;
  for (const auto& e : cfg.entries()) {
    if (std::find(sections.begin(), sections.end(), e.section) == sections.end()) sections.push_back(e.section);
  }
  std::ostringstream out;
  for (const auto& s : sections) {
    if (!s.empty()) out << '[' << s << "]\n";
    std::vector<std::string> seen;
    for (const auto& e : cfg.entries()) {
      if (e.section != s) continue;
      if (e.key == "layer") {
        out << e.key << " = " << e.value << '\n';
        continue;
      }
      if (std::find(seen.begin(), seen.end(), e.key) != seen.end()) continue;
      seen.push_back(e.key);
      std::string value = cfg.get(s, e.key)->value;
      const bool is_path = (s == "model" && e.key == "architecture") ||
                           (s == "data" && (e.key == "train_path" || e.key == "test_path"));
      if (is_path && std::filesystem::path(value).is_relative() && !cfg.path().empty()) {
        value = std::filesystem::absolute(cfg.path().parent_path() / value).lexically_normal().string();
      }
      out << e.key << " = " << value << '\n';
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace splitfed
