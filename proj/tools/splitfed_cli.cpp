#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "splitfed/splitfed.hpp"

namespace fs = std::filesystem;
using namespace splitfed;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> scheme;
  std::optional<std::size_t> devices;
  std::optional<double> k;
  std::optional<std::size_t> rounds;
  std::optional<std::string> topk_scope;
  bool error_feedback = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* opt = cmd->add_option("--config", f.config, "Configuration file");
  if (config_required) opt->required();
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--scheme", f.scheme, "centralized | fedavg | splitnn | split-sparse");
  cmd->add_option("--devices", f.devices, "Number of simulated clients");
  cmd->add_option("--k", f.k, "Top-K fraction in (0, 1]");
  cmd->add_option("--rounds", f.rounds, "Training rounds");
  cmd->add_option("--topk-scope", f.topk_scope, "batch | sample");
  cmd->add_flag("--error-feedback", f.error_feedback, "Accumulate unsent mass into residual buffers");
  cmd->add_option("--set", f.overrides, "Override as section.key=value (repeatable)");
}

// Flags become ordinary overrides so the config file stays the record.
KvConfig load_with_flags(const CommonFlags& f) {
  KvConfig cfg = f.config.empty() ? KvConfig{} : KvConfig::load(f.config);
  std::vector<std::string> ov = f.overrides;
  if (f.seed) ov.push_back("experiment.seed=" + std::to_string(*f.seed));
  if (f.scheme) ov.push_back("experiment.scheme=" + *f.scheme);
  if (f.devices) ov.push_back("experiment.devices=" + std::to_string(*f.devices));
  if (f.k) ov.push_back("experiment.k=" + fmt_number(*f.k));
  if (f.rounds) ov.push_back("experiment.rounds=" + std::to_string(*f.rounds));
  if (f.topk_scope) ov.push_back("experiment.topk_scope=" + *f.topk_scope);
  if (f.error_feedback) ov.push_back("experiment.error_feedback=true");
  if (!f.out.empty()) ov.push_back("output.dir=" + f.out);
  apply_overrides(cfg, ov);
  return cfg;
}

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("SPLITFED_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

std::string mib(std::uint64_t bytes) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(bytes) / (1024.0 * 1024.0));
  return buf;
}

int cmd_traffic(const CommonFlags& f) {
  KvConfig cfg = load_with_flags(f);
  Architecture arch = load_architecture(cfg);
  auto get = [&](const char* s, const char* k) { return cfg.get(s, k); };

  double fraction = 0.1;
  if (auto e = get("experiment", "k")) fraction = parse_value<double>(*e, cfg.source());
  check_fraction(fraction);
  std::size_t batch = 32;
  if (auto e = get("experiment", "batch_size")) batch = parse_value<std::size_t>(*e, cfg.source());
  if (auto e = get("traffic", "batch_size")) batch = parse_value<std::size_t>(*e, cfg.source());
  std::vector<std::size_t> devices{16, 32, 64};
  if (auto e = get("traffic", "devices")) devices = detail::parse_size_list(*e, cfg.source());
  if (f.devices) devices = {*f.devices};
  TopKScope scope = TopKScope::batch;
  if (auto e = get("experiment", "topk_scope"); e && e->value == "sample") scope = TopKScope::sample;

  const auto model = arch.build<float>(0);
  const auto rows = traffic_table(model, devices, batch, fraction, arch.cut_index, scope);
  fs::path out = ".";
  if (auto e = get("output", "dir")) out = e->value;
  fs::create_directories(out);
  write_traffic_csv(rows, out / "traffic_table.csv");

  const std::size_t cut = arch.cut_index ? arch.cut_index : default_cut_index(model);
  std::cout << "architecture " << (arch.name.empty() ? f.config : arch.name) << ": " << model.param_count()
            << " trainable parameters, " << model.buffer_count() << " batch-norm statistics, cut after layer "
            << cut << " (" << cut_activation_size(model, cut) << " activations per sample)\n";
  std::cout << "batch " << batch << " per device, K = " << fmt_number(fraction) << "\n\n";
  std::printf("%8s  %-13s %16s %14s %16s %14s\n", "devices", "scheme", "values bytes", "values MiB", "wire bytes",
              "wire MiB");
  for (const auto& r : rows) {
    std::printf("%8zu  %-13s %16llu %14s %16llu %14s\n", r.devices, to_string(r.scheme),
                static_cast<unsigned long long>(r.values_only), mib(r.values_only).c_str(),
                static_cast<unsigned long long>(r.on_wire), mib(r.on_wire).c_str());
  }
  spdlog::info("wrote {}", (out / "traffic_table.csv").string());
  return kExitOk;
}

int cmd_train(const CommonFlags& f) {
  KvConfig cfg = load_with_flags(f);
  ExperimentConfig ec = load_experiment_config(cfg);
  if (ec.out_dir.empty()) ec.out_dir = "out";
  spdlog::info("{} with {} devices, {} rounds, output {}", to_string(ec.federation.scheme.kind),
               ec.federation.devices, ec.rounds, ec.out_dir.string());
  const auto result = run_experiment(ec, [](const RoundMetrics& m) {
    if (m.pooled_accuracy) {
      spdlog::info("round {:5d}  loss {:.5f}  pooled acc {:.4f}  bytes {}", m.round, m.loss, *m.pooled_accuracy,
                   m.bytes.values_only);
    } else {
      spdlog::debug("round {:5d}  loss {:.5f}", m.round, m.loss);
    }
  });
  spdlog::info("final pooled accuracy {:.4f}; traffic {} bytes values-only, {} bytes on wire",
               result.final_eval.pooled, result.total_bytes.values_only, result.total_bytes.on_wire);
  return kExitOk;
}

int cmd_gradcheck(std::size_t cases, const std::string& inject, std::uint64_t seed) {
  GradcheckOptions opts;
  opts.cases_per_kind = cases;
  opts.corrupt_kind = inject;
  opts.seed = seed;
  const auto report = run_gradcheck(opts);
  for (const auto& c : report.checks) {
    std::printf("%-24s %4zu cases  max rel error %.3e  %s\n", c.kind.c_str(), c.cases, c.max_error,
                c.passed() ? "PASS" : "FAIL");
    if (!c.passed()) spdlog::error("gradient check failed for layer {}", c.kind);
  }
  return report.passed() ? kExitOk : kExitRuntime;
}

int cmd_synth(const CommonFlags& f, std::optional<std::size_t> n_train, std::optional<std::size_t> n_test) {
  KvConfig cfg = load_with_flags(f);
  std::size_t train = 4096, test = 1024;
  double rate = 0.5;
  std::uint64_t seed = 7;
  if (auto e = cfg.get("data", "train_size")) train = parse_value<std::size_t>(*e, cfg.source());
  if (auto e = cfg.get("data", "test_size")) test = parse_value<std::size_t>(*e, cfg.source());
  if (auto e = cfg.get("data", "positive_rate")) rate = parse_value<double>(*e, cfg.source());
  if (auto e = cfg.get("experiment", "seed")) seed = parse_value<std::uint64_t>(*e, cfg.source());
  if (auto e = cfg.get("data", "seed")) seed = parse_value<std::uint64_t>(*e, cfg.source());
  if (n_train) train = *n_train;
  if (n_test) test = *n_test;
  fs::path out = f.out.empty() ? fs::path("data") : fs::path(f.out);
  fs::create_directories(out);
  write_segments(synth_generate(train, derive_seed(seed, 10), rate), out / "train.csv");
  write_segments(synth_generate(test, derive_seed(seed, 11), rate), out / "test.csv");
  spdlog::info("wrote {} training and {} test segments to {}", train, test, out.string());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Split-federated learning simulator with top-K sparsified cut-layer traffic"};
  app.require_subcommand(1);

  CommonFlags traffic_flags, train_flags, synth_flags;
  auto* traffic = app.add_subcommand("traffic", "Per-iteration traffic table for FedAvg, SplitNN and top-K split");
  add_common(traffic, traffic_flags, true);
  auto* train = app.add_subcommand("train", "Run a training experiment and write metrics.csv");
  add_common(train, train_flags, true);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of every layer and the split pipeline");
  std::size_t cases = 50;
  std::string inject;
  std::uint64_t grad_seed = 2024;
  grad->add_option("--cases", cases, "Randomized cases per layer kind");
  grad->add_option("--inject-fault", inject, "Negate the analytic gradient of one check (testing aid)");
  grad->add_option("--seed", grad_seed, "Random seed");
  grad->add_option("--config", "Ignored; accepted for symmetry with other subcommands");
  auto* synth = app.add_subcommand("synth-data", "Write synthetic train/test segment CSV files");
  add_common(synth, synth_flags, false);
  std::optional<std::size_t> n_train, n_test;
  synth->add_option("--n-train,-n", n_train, "Training segments");
  synth->add_option("--n-test", n_test, "Test segments");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*traffic) return cmd_traffic(traffic_flags);
    if (*train) return cmd_train(train_flags);
    if (*grad) return cmd_gradcheck(cases, inject, grad_seed);
    if (*synth) return cmd_synth(synth_flags, n_train, n_test);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
