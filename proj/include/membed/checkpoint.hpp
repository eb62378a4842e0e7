#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace membed {

/// Named arrays plus string metadata. On disk: a text manifest
///
///   membed-checkpoint 1
///   meta <key> <value>
///   tensor <name> <d0>x<d1>... <byte_offset> <count>
///   end
///
/// followed by the payload of little-endian float64 values; offsets are
/// relative to the first payload byte.
struct Checkpoint {
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  std::map<std::string, std::string> meta;
  std::vector<Entry> tensors;

  const Tensor& get(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return e.tensor;
    throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::out_of_range("checkpoint has no meta field '" + key + "'");
    return it->second;
  }
};

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

inline void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos)
    throw std::invalid_argument(std::string("checkpoint ") + what + " must be a non-empty token without whitespace: '" +
                                s + "'");
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os << "membed-checkpoint 1\n";
  for (const auto& [k, v] : ck.meta) {
    detail::check_token(k, "meta key");
    if (v.find('\n') != std::string::npos) throw std::invalid_argument("checkpoint meta value contains newline");
    os << "meta " << k << ' ' << v << '\n';
  }
  std::uint64_t offset = 0;
  for (const auto& e : ck.tensors) {
    detail::check_token(e.name, "tensor name");
    os << "tensor " << e.name << ' ';
    for (std::size_t i = 0; i < e.tensor.shape.size(); ++i) os << (i ? "x" : "") << e.tensor.shape[i];
    os << ' ' << offset << ' ' << e.tensor.size() << '\n';
    offset += 8 * e.tensor.size();
  }
  os << "end\n";
  for (const auto& e : ck.tensors)
    for (double d : e.tensor.values) {
      const std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(d));
      os.write(reinterpret_cast<const char*>(&bits), 8);
    }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "membed-checkpoint 1")
    throw std::runtime_error("checkpoint: bad magic line");
  Checkpoint ck;
  struct Pending {
    std::string name;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t count;
  };
  std::vector<Pending> pending;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ck.meta[key] = value;
    } else if (kind == "tensor") {
      Pending p;
      std::string dims;
      if (!(ls >> p.name >> dims >> p.offset >> p.count)) throw std::runtime_error("checkpoint: bad tensor line: " + line);
      std::istringstream ds(dims);
      std::string tok;
      while (std::getline(ds, tok, 'x')) p.shape.push_back(std::stoull(tok));
      if (shape_size(p.shape) != p.count) throw std::runtime_error("checkpoint: count/shape mismatch for " + p.name);
      pending.push_back(std::move(p));
    } else {
      throw std::runtime_error("checkpoint: unknown manifest line: " + line);
    }
  }
  if (!ended) throw std::runtime_error("checkpoint: manifest not terminated");
  std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  for (auto& p : pending) {
    if (p.offset + 8 * p.count > payload.size()) throw std::runtime_error("checkpoint: payload truncated at " + p.name);
    std::vector<double> values(p.count);
    for (std::uint64_t i = 0; i < p.count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, payload.data() + p.offset + 8 * i, 8);
      values[i] = std::bit_cast<double>(detail::to_little_endian(bits));
    }
    ck.tensors.push_back({p.name, Tensor(p.shape, std::move(values))});
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace membed
