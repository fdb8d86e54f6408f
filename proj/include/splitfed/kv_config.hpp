#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace splitfed {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, int line, const std::string& what)
      : std::runtime_error(format(source, line, what)), line_(line) {}

  int line() const { return line_; }

 private:
  static std::string format(const std::string& source, int line, const std::string& what) {
    std::string out = source.empty() ? std::string("config") : source;
    if (line > 0) out += ":" + std::to_string(line);
    return out + ": " + what;
  }
  int line_;
};

/*
    Plain hierarchical key-value text:

        # comment
        [section]
        key = value
        key = value   # repeated keys keep their order

    Keys before the first section header belong to section "".
*/
struct KvEntry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(const std::string& text, const std::string& source = "") {
    KvConfig cfg;
    cfg.source_ = source;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      const auto hash = raw.find('#');
      std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(source, line_no, "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError(source, line_no, "empty section name");
        cfg.sections_.push_back(section);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(source, line_no, "expected 'key = value'");
      std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(source, line_no, "missing key");
      cfg.entries_.push_back({section, key, trim(line.substr(eq + 1)), line_no});
    }
    return cfg;
  }

  static KvConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), 0, "cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    KvConfig cfg = parse(ss.str(), path.string());
    cfg.path_ = path;
    return cfg;
  }

  const std::string& source() const { return source_; }
  const std::filesystem::path& path() const { return path_; }
  const std::vector<KvEntry>& entries() const { return entries_; }

  bool has_section(const std::string& section) const {
    return std::find(sections_.begin(), sections_.end(), section) != sections_.end() ||
           std::any_of(entries_.begin(), entries_.end(), [&](const KvEntry& e) { return e.section == section; });
  }

  // Last occurrence wins, so appended overrides take precedence.
  std::optional<KvEntry> get(const std::string& section, const std::string& key) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->section == section && it->key == key) return *it;
    }
    return std::nullopt;
  }

  std::vector<KvEntry> all(const std::string& section, const std::string& key) const {
    std::vector<KvEntry> out;
    for (const auto& e : entries_) {
      if (e.section == section && e.key == key) out.push_back(e);
    }
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    entries_.push_back({section, key, value, 0});
  }

  // Rejects any key in `section` that is not listed in `allowed`.
  void require_known(const std::string& section, const std::vector<std::string>& allowed) const {
    for (const auto& e : entries_) {
      if (e.section != section) continue;
      if (std::find(allowed.begin(), allowed.end(), e.key) == allowed.end()) {
        throw ConfigError(source_, e.line, "unknown key '" + qualified(e) + "'");
      }
    }
  }

  void require_sections(const std::vector<std::string>& allowed) const {
    for (const auto& e : entries_) {
      if (std::find(allowed.begin(), allowed.end(), e.section) == allowed.end()) {
        throw ConfigError(source_, e.line, "unknown section '" + e.section + "'");
      }
    }
  }

  static std::string qualified(const KvEntry& e) {
    return e.section.empty() ? e.key : e.section + "." + e.key;
  }

 private:
  std::string source_;
  std::filesystem::path path_;
  std::vector<std::string> sections_;
  std::vector<KvEntry> entries_;
};

// Typed value conversion with line-identified errors.
template <typename T>
T parse_value(const KvEntry& e, const std::string& source) {
  const std::string& v = e.value;
  auto bad = [&](const char* expected) {
    return ConfigError(source, e.line,
                       "value '" + v + "' for '" + KvConfig::qualified(e) + "' is not " + expected);
  };
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw bad("a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw bad("an integer");
    return out;
  } else {
    static_assert(std::is_floating_point_v<T>);
    std::size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      throw bad("a number");
    }
    if (used != v.size()) throw bad("a number");
    return static_cast<T>(out);
  }
}

}  // namespace splitfed
