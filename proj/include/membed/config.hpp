#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedding_store.hpp"

namespace membed {

/// Flat "key = value" file. Keys may carry dotted section prefixes
/// ("train.lr"); '#' starts a comment line.
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& is) {
    Config c;
    std::string line;
    std::size_t lineno = 0;
    while (detail::read_line(is, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(lineno, "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key.empty()) throw ParseError(lineno, "empty key");
      if (c.values_.count(key)) throw ParseError(lineno, "duplicate key '" + key + "'");
      c.values_[key] = value;
    }
    return c;
  }

  static Config parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  double real(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    auto v = detail::parse_real(it->second);
    if (!v) throw std::invalid_argument("config: '" + key + "' is not a finite number: " + it->second);
    return *v;
  }

  std::uint64_t integer(const std::string& key, std::uint64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: '" + key + "' is not a non-negative integer: " + it->second);
    }
  }

  bool boolean(const std::string& key, bool def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw std::invalid_argument("config: '" + key + "' is not a boolean: " + it->second);
  }

  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& def) const {
    auto it = values_.find(key);
    if (it == values_.end()) return def;
    std::vector<std::string> out;
    std::istringstream is(it->second);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      tok = trim(tok);
      if (!tok.empty()) out.push_back(tok);
    }
    return out;
  }

  std::vector<double> reals(const std::string& key, const std::vector<double>& def) const {
    if (!has(key)) return def;
    std::vector<double> out;
    for (const auto& s : list(key, {})) {
      auto v = detail::parse_real(s);
      if (!v) throw std::invalid_argument("config: '" + key + "' has a bad number: " + s);
      out.push_back(*v);
    }
    return out;
  }

  std::vector<std::uint64_t> integers(const std::string& key, const std::vector<std::uint64_t>& def) const {
    if (!has(key)) return def;
    std::vector<std::uint64_t> out;
    for (const auto& s : list(key, {})) {
      try {
        out.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw std::invalid_argument("config: '" + key + "' has a bad integer: " + s);
      }
    }
    return out;
  }

  /// Throws on any key outside `known`.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw std::invalid_argument("config: unknown key '" + k + "'");
  }

  /// Canonical "key=value" lines in key order.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace membed
