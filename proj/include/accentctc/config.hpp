#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "accentctc/tensor.hpp"

namespace accentctc {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Flat `key = value` settings with dotted keys (`model.d_model = 64`).
/// Lines starting with '#' are comments. Keys iterate in sorted order.
class Config {
 public:
  static Config parse(std::string_view text) {
    Config cfg;
    std::size_t line_no = 0;
    for (const std::string& raw : split(text, '\n')) {
      ++line_no;
      std::string_view line = trim(raw);
      if (line.empty() || line.front() == '#') continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ParseError("config: expected 'key = value'", line_no);
      }
      std::string_view key = trim(line.substr(0, eq));
      if (key.empty()) throw ParseError("config: empty key", line_no);
      cfg.values_[std::string(key)] = std::string(trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
  }

  std::string to_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
    return out.str();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << to_text();
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  template <typename V>
    requires std::is_arithmetic_v<V>
  void set(const std::string& key, V value) {
    if constexpr (std::is_same_v<V, bool>) {
      values_[key] = value ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<V>) {
      // Shortest text that parses back to the same value.
      char buf[64];
      auto res = std::to_chars(buf, buf + sizeof buf, static_cast<double>(value));
      values_[key] = std::string(buf, res.ptr);
    } else {
      values_[key] = std::to_string(value);
    }
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  /// Copies every entry of `other` over this one.
  void merge(const Config& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  /// Adds entries from `defaults` whose keys are absent here.
  void merge_defaults(const Config& defaults) {
    for (const auto& [k, v] : defaults.values_) values_.emplace(k, v);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::int64_t get_int(const std::string& key) const {
    const std::string& v = get(key);
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError("config key " + key + ": not an integer: '" + v + "'");
    return out;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError("config key " + key + ": not an unsigned integer: '" + v + "'");
    return out;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not a number: '" + v + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + ": not a boolean: '" + v + "'");
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  friend bool operator==(const Config&, const Config&) = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace accentctc
