#pragma once

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "splitfed/kv_config.hpp"
#include "splitfed/layers.hpp"
#include "splitfed/model.hpp"

namespace splitfed {

// A model description read from the [model] and [layers] sections.
struct Architecture {
  std::string name;
  Shape input_shape;  // (channels, length)
  std::size_t num_classes = 2;
  std::vector<LayerSpec> layers;
  std::size_t cut_index = 0;  // 0 selects the default cut

  template <typename T = float>
  ModelGraph<T> build(std::uint64_t seed) const {
    return make_model<T>(input_shape, layers, seed);
  }
};

namespace detail {

inline LayerSpec parse_layer(const KvEntry& e, const std::string& source) {
  std::istringstream in(e.value);
  std::string kind;
  in >> kind;
  std::vector<KvEntry> args;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(source, e.line, "layer argument '" + tok + "' is not name=value");
    }
    args.push_back({"layer", tok.substr(0, eq), tok.substr(eq + 1), e.line});
  }
  auto arg = [&](const std::string& name) -> const KvEntry* {
    for (const auto& a : args) {
      if (a.key == name) return &a;
    }
    return nullptr;
  };
  auto req = [&](const std::string& name) -> std::size_t {
    const KvEntry* a = arg(name);
    if (!a) throw ConfigError(source, e.line, kind + " requires '" + name + "'");
    const auto v = parse_value<std::size_t>(*a, source);
    if (v == 0) throw ConfigError(source, e.line, kind + " '" + name + "' must be positive");
    return v;
  };
  auto opt_size = [&](const std::string& name, std::size_t def) {
    return arg(name) ? req(name) : def;
  };
  auto opt_real = [&](const std::string& name, double def) {
    const KvEntry* a = arg(name);
    return a ? parse_value<double>(*a, source) : def;
  };
  auto only = [&](const std::vector<std::string>& allowed) {
    for (const auto& a : args) {
      if (std::find(allowed.begin(), allowed.end(), a.key) == allowed.end()) {
        throw ConfigError(source, e.line, "unknown " + kind + " argument '" + a.key + "'");
      }
    }
  };

  if (kind == "conv1d") {
    only({"in", "out", "kernel", "stride", "padding"});
    if (const KvEntry* pad = arg("padding"); pad && pad->value != "same") {
      throw ConfigError(source, e.line, "conv1d supports only padding=same");
    }
    return Conv1D{req("in"), req("out"), req("kernel"), opt_size("stride", 1)};
  }
  if (kind == "batchnorm1d") {
    only({"channels", "eps", "momentum"});
    const double eps = opt_real("eps", 1e-5), mom = opt_real("momentum", 0.9);
    if (!(eps > 0)) throw ConfigError(source, e.line, "batchnorm1d eps must be positive");
    if (!(mom >= 0 && mom < 1)) throw ConfigError(source, e.line, "batchnorm1d momentum must lie in [0, 1)");
    return BatchNorm1D{req("channels"), eps, mom};
  }
  if (kind == "relu") {
    only({});
    return ReLU{};
  }
  if (kind == "maxpool1d") {
    only({"window", "stride"});
    const std::size_t window = req("window");
    return MaxPool1D{window, opt_size("stride", window)};
  }
  if (kind == "globalavgpool1d") {
    only({});
    return GlobalAveragePool1D{};
  }
  if (kind == "dense") {
    only({"in", "out"});
    return Dense{req("in"), req("out")};
  }
  if (kind == "residual_start") {
    only({});
    return ResidualStart{};
  }
  if (kind == "residual_end") {
    only({});
    return ResidualEnd{};
  }
  throw ConfigError(source, e.line, "unknown layer kind '" + kind + "'");
}

}  // namespace detail

inline Architecture load_architecture(const KvConfig& cfg);

inline Architecture load_architecture(const std::filesystem::path& path) {
  return load_architecture(KvConfig::load(path));
}

// Reads an inline [layers] section, or follows model.architecture to
// another file (resolved relative to this one).
inline Architecture load_architecture(const KvConfig& cfg) {
  const std::string& src = cfg.source();
  if (!cfg.has_section("layers")) {
    const auto ref = cfg.get("model", "architecture");
    if (!ref) throw ConfigError(src, 0, "no [layers] section and no model.architecture reference");
    std::filesystem::path target = ref->value;
    if (target.is_relative() && !cfg.path().empty()) target = cfg.path().parent_path() / target;
    if (!std::filesystem::exists(target)) {
      throw ConfigError(src, ref->line, "architecture file not found: " + target.string());
    }
    Architecture arch = load_architecture(target);
    if (auto cut = cfg.get("model", "cut_index")) arch.cut_index = parse_value<std::size_t>(*cut, src);
    return arch;
  }
  cfg.require_known("model", {"name", "input_channels", "input_length", "num_classes", "cut_index", "architecture"});
  cfg.require_known("layers", {"layer"});

  Architecture arch;
  auto get_size = [&](const std::string& key, std::size_t def) {
    auto e = cfg.get("model", key);
    return e ? parse_value<std::size_t>(*e, src) : def;
  };
  if (auto n = cfg.get("model", "name")) arch.name = n->value;
  arch.input_shape = {get_size("input_channels", 1), get_size("input_length", 256)};
  arch.num_classes = get_size("num_classes", 2);
  arch.cut_index = get_size("cut_index", 0);
  const auto entries = cfg.all("layers", "layer");
  for (const auto& e : entries) arch.layers.push_back(detail::parse_layer(e, src));

  ModelGraph<float> probe{arch.input_shape, arch.layers, {}, {}};
  Shape out;
  try {
    out = probe.output_shape();
  } catch (const ShapeError& err) {
    throw ConfigError(src, entries.empty() ? 0 : entries.front().line, err.what());
  }
  if (out != Shape{arch.num_classes}) {
    throw ConfigError(src, entries.empty() ? 0 : entries.back().line,
                      "model output " + shape_str(out) + " does not match num_classes " +
                          std::to_string(arch.num_classes));
  }
  return arch;
}

}  // namespace splitfed
