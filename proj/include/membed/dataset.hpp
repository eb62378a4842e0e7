#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedding_store.hpp"
#include "tensor.hpp"

namespace membed {

/// Flat feature matrix with integer labels and a declared input range.
/// Labels index the owning experiment's label list; OOD examples carry the
/// index of their (held-out) source class.
struct Dataset {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<std::size_t> labels;
  double lo = -1.0;
  double hi = 1.0;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  void push(std::span<const double> x, std::size_t y) {
    if (x.size() != dim) throw std::invalid_argument("dataset: feature length mismatch");
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(y);
  }

  /// Rows `idx` as a (n x dim) tensor.
  Tensor batch(std::span<const std::size_t> idx) const {
    Tensor t({idx.size(), dim}, 0.0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(idx[r] * dim), dim, t.values.begin() + r * dim);
    return t;
  }

  Tensor all() const { return Tensor({size(), dim}, features); }
};

/// CSV "example_id,label,x0,...,x{p-1}" preceded by a "# range lo hi" line.
inline void write_dataset_csv(std::ostream& os, const Dataset& d) {
  char buf[64];
  auto num = [&](double v) {
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  os << "# range " << num(d.lo) << ' ' << num(d.hi) << '\n';
  os << "example_id,label";
  for (std::size_t j = 0; j < d.dim; ++j) os << ",x" << j;
  os << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << i << ',' << d.labels[i];
    for (double v : d.row(i)) os << ',' << num(v);
    os << '\n';
  }
}

inline Dataset read_dataset_csv(std::istream& is) {
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  auto field_list = [](const std::string& s) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i)
      if (i == s.size() || s[i] == ',') {
        f.push_back(s.substr(start, i - start));
        start = i + 1;
      }
    return f;
  };
  bool have_header = false;
  while (detail::read_line(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# range ", 0) == 0) {
      auto toks = detail::split_spaces(std::string_view(line).substr(8));
      if (toks.size() != 2) throw ParseError(lineno, "bad range line");
      auto lo = detail::parse_real(toks[0]), hi = detail::parse_real(toks[1]);
      if (!lo || !hi || *lo > *hi) throw ParseError(lineno, "bad range values");
      d.lo = *lo;
      d.hi = *hi;
      continue;
    }
    auto f = field_list(line);
    if (!have_header) {
      if (f.size() < 3 || f[0] != "example_id" || f[1] != "label") throw ParseError(lineno, "bad dataset header");
      d.dim = f.size() - 2;
      have_header = true;
      continue;
    }
    if (f.size() != d.dim + 2) throw ParseError(lineno, "wrong number of columns");
    std::size_t y = 0;
    if (std::from_chars(f[1].data(), f[1].data() + f[1].size(), y).ec != std::errc())
      throw ParseError(lineno, "bad label");
    std::vector<double> x;
    for (std::size_t j = 2; j < f.size(); ++j) {
      auto v = detail::parse_real(f[j]);
      if (!v) throw ParseError(lineno, "bad feature value");
      x.push_back(*v);
    }
    d.push(x, y);
  }
  if (!have_header) throw ParseError(lineno, "empty dataset file");
  return d;
}

}  // namespace membed
