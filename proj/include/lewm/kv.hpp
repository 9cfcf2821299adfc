#pragma once

// Flat "section.key = value" text used for run configs and for the config
// blocks embedded in checkpoints and datasets. Doubles are written in the
// shortest form that round-trips, so parse -> serialize is byte-stable.

#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "lewm/error.hpp"

namespace lewm {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw FormatError("cannot format double");
  return std::string(buf, end);
}

inline double parse_double(std::string_view s, std::string_view key = {}) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw FormatError("invalid number '" + std::string(s) + "' for key '" + std::string(key) + "'");
  }
  return v;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view key = {}) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw FormatError("invalid unsigned integer '" + std::string(s) + "' for key '" + std::string(key) + "'");
  }
  return v;
}

inline std::string format_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<std::size_t> parse_sizes(std::string_view s, std::string_view key = {}) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string_view part = s.substr(start, comma == std::string_view::npos ? s.npos : comma - start);
    out.push_back(static_cast<std::size_t>(parse_u64(part, key)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Ordered key-value store with consumption tracking for strict parsing.
class KeyValues {
 public:
  void set(const std::string& key, std::string value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(value);
  }
  void set(const std::string& key, double v) { set(key, format_double(v)); }
  void set(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }
  void set(const std::string& key, int v) = delete;
  void set_size(const std::string& key, std::size_t v) { set(key, std::to_string(v)); }
  void set(const std::string& key, bool v) { set(key, std::string(v ? "true" : "false")); }
  void set(const std::string& key, const char* v) { set(key, std::string(v)); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string* find(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    consumed_.insert(key);
    return &it->second;
  }

  void read(const std::string& key, double& out) const {
    if (auto* v = find(key)) out = parse_double(*v, key);
  }
  void read(const std::string& key, std::uint64_t& out) const {
    if (auto* v = find(key)) out = parse_u64(*v, key);
  }
  void read_size(const std::string& key, std::size_t& out) const {
    if (auto* v = find(key)) out = static_cast<std::size_t>(parse_u64(*v, key));
  }
  void read(const std::string& key, std::vector<std::size_t>& out) const {
    if (auto* v = find(key)) out = parse_sizes(*v, key);
  }
  void read(const std::string& key, std::string& out) const {
    if (auto* v = find(key)) out = *v;
  }
  void read(const std::string& key, bool& out) const {
    if (auto* v = find(key)) {
      if (*v == "true") out = true;
      else if (*v == "false") out = false;
      else throw FormatError("invalid boolean '" + *v + "' for key '" + key + "'");
    }
  }

  /// Throws if any key was never read.
  void require_all_consumed() const {
    for (const auto& k : order_) {
      if (!consumed_.count(k)) throw FormatError("unknown config key '" + k + "'");
    }
  }

  std::string serialize() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
    return out;
  }

  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      std::string_view line = trim(text.substr(pos, nl - pos));
      pos = nl + 1;
      ++line_no;
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw FormatError("config line " + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key(trim(line.substr(0, eq)));
      const std::string value(trim(line.substr(eq + 1)));
      if (key.empty()) throw FormatError("config line " + std::to_string(line_no) + ": empty key");
      if (kv.has(key)) throw FormatError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
      kv.set(key, value);
    }
    return kv;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace lewm
