#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace membed {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class EmbeddingFormat { headered, headerless };

/// Word vectors of one pretrained model. Insertion order is preserved so a
/// parsed file serializes back in the same order.
class EmbeddingSpace {
 public:
  EmbeddingSpace(std::string name, std::size_t dim) : name_(std::move(name)), dim_(dim) {
    if (dim_ == 0) throw std::invalid_argument("embedding space '" + name_ + "': dim must be >= 1");
  }

  const std::string& name() const { return name_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  void add(std::string word, std::vector<double> vec) {
    if (vec.size() != dim_)
      throw std::invalid_argument("embedding space '" + name_ + "': vector for '" + word + "' has length " +
                                  std::to_string(vec.size()) + ", expected " + std::to_string(dim_));
    if (index_.count(word)) throw std::invalid_argument("embedding space '" + name_ + "': duplicate word '" + word + "'");
    index_.emplace(word, words_.size());
    words_.push_back(std::move(word));
    values_.insert(values_.end(), vec.begin(), vec.end());
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  std::span<const double> vector(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw std::out_of_range("embedding space '" + name_ + "' has no word '" + std::string(word) + "'");
    return {values_.data() + it->second * dim_, dim_};
  }

  bool operator==(const EmbeddingSpace& o) const {
    return name_ == o.name_ && dim_ == o.dim_ && words_ == o.words_ && values_ == o.values_;
  }

 private:
  std::string name_;
  std::size_t dim_;
  std::vector<std::string> words_;
  std::vector<double> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::optional<double> parse_real(std::string_view tok) {
  double v = 0.0;
  const char* first = tok.data();
  if (!tok.empty() && tok.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline bool read_line(std::istream& is, std::string& line) {
  if (!std::getline(is, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

}  // namespace detail

/// Reads word2vec-text (headered) or GloVe-text (headerless) vectors.
inline EmbeddingSpace parse_embedding_file(std::istream& is, EmbeddingFormat format, std::string name = "space") {
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::size_t> declared_count;
  std::optional<EmbeddingSpace> space;

  if (format == EmbeddingFormat::headered) {
    while (detail::read_line(is, line)) {
      ++lineno;
      if (!line.empty()) break;
    }
    if (line.empty()) throw ParseError(lineno, "empty embedding file");
    auto toks = detail::split_spaces(line);
    std::size_t count = 0, dim = 0;
    if (toks.size() != 2 || std::from_chars(toks[0].data(), toks[0].data() + toks[0].size(), count).ec != std::errc() ||
        std::from_chars(toks[1].data(), toks[1].data() + toks[1].size(), dim).ec != std::errc() || dim == 0)
      throw ParseError(lineno, "expected header '<count> <dim>'");
    declared_count = count;
    space.emplace(name, dim);
  }

  while (detail::read_line(is, line)) {
    ++lineno;
    auto toks = detail::split_spaces(line);
    if (toks.empty()) continue;
    if (toks.size() < 2) throw ParseError(lineno, "record has no vector components");
    if (!space) space.emplace(name, toks.size() - 1);
    if (toks.size() - 1 != space->dim())
      throw ParseError(lineno, "dimension mismatch: got " + std::to_string(toks.size() - 1) + " components, expected " +
                                   std::to_string(space->dim()));
    std::vector<double> vec;
    vec.reserve(space->dim());
    for (std::size_t i = 1; i < toks.size(); ++i) {
      auto v = detail::parse_real(toks[i]);
      if (!v) throw ParseError(lineno, "invalid or non-finite number '" + std::string(toks[i]) + "'");
      vec.push_back(*v);
    }
    std::string word(toks[0]);
    if (space->contains(word)) throw ParseError(lineno, "duplicate word '" + word + "'");
    space->add(std::move(word), std::move(vec));
  }

  if (!space || space->size() == 0) throw ParseError(lineno, "empty embedding file");
  if (declared_count && *declared_count != space->size())
    throw ParseError(lineno, "header declares " + std::to_string(*declared_count) + " records, found " +
                                 std::to_string(space->size()));
  return std::move(*space);
}

/// Shortest round-trip decimal representation of every component.
inline void write_embedding_file(std::ostream& os, const EmbeddingSpace& space, EmbeddingFormat format) {
  if (format == EmbeddingFormat::headered) os << space.size() << ' ' << space.dim() << '\n';
  char buf[64];
  for (const auto& w : space.words()) {
    os << w;
    for (double v : space.vector(w)) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      os << ' ' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    os << '\n';
  }
}

/// Two-column "class_name embedding_word" file.
inline std::map<std::string, std::string> parse_alias_table(std::istream& is) {
  std::map<std::string, std::string> table;
  std::string line;
  std::size_t lineno = 0;
  while (detail::read_line(is, line)) {
    ++lineno;
    auto toks = detail::split_spaces(line);
    if (toks.empty()) continue;
    if (toks.size() != 2) throw ParseError(lineno, "alias line must have exactly two columns");
    if (!table.emplace(std::string(toks[0]), std::string(toks[1])).second)
      throw ParseError(lineno, "duplicate alias for '" + std::string(toks[0]) + "'");
  }
  return table;
}

/// 0.5 * (1 - cos(u, v)), in [0, 1].
inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw std::invalid_argument("cosine_distance: length mismatch " + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()));
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw std::domain_error("cosine_distance: zero-norm vector");
  const double c = std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
  return 0.5 * (1.0 - c);
}

/// Per-label unit-normalized targets for K embedding spaces.
class LabelCodebook {
 public:
  LabelCodebook(std::vector<std::string> labels, std::vector<Tensor> targets, std::vector<std::string> space_names)
      : labels_(std::move(labels)), targets_(std::move(targets)), space_names_(std::move(space_names)) {
    if (targets_.empty()) throw std::invalid_argument("codebook needs at least one embedding space");
    // A single label is accepted; decoding is then trivial.
    if (labels_.empty()) throw std::invalid_argument("codebook needs at least one label");
    if (space_names_.size() != targets_.size()) throw std::invalid_argument("codebook: space name count mismatch");
    for (const auto& t : targets_)
      if (t.rank() != 2 || t.shape[0] != labels_.size())
        throw std::invalid_argument("codebook: target matrix shape " + shape_string(t.shape) + " does not match " +
                                    std::to_string(labels_.size()) + " labels");
  }

  std::size_t num_labels() const { return labels_.size(); }
  std::size_t num_spaces() const { return targets_.size(); }
  std::size_t dim(std::size_t k) const { return targets_.at(k).shape[1]; }
  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    for (std::size_t k = 0; k < num_spaces(); ++k) d.push_back(dim(k));
    return d;
  }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::string& space_name(std::size_t k) const { return space_names_.at(k); }
  const Tensor& targets(std::size_t k) const { return targets_.at(k); }
  std::span<const double> target(std::size_t k, std::size_t label) const { return targets_.at(k).row_view(label); }

  /// Codebook restricted to the given spaces, in the given order.
  LabelCodebook select_spaces(std::span<const std::size_t> which) const {
    std::vector<Tensor> t;
    std::vector<std::string> n;
    for (auto k : which) {
      t.push_back(targets_.at(k));
      n.push_back(space_names_.at(k));
    }
    return LabelCodebook(labels_, std::move(t), std::move(n));
  }

 private:
  std::vector<std::string> labels_;
  std::vector<Tensor> targets_;
  std::vector<std::string> space_names_;
};

class MissingLabelsError : public std::runtime_error {
 public:
  explicit MissingLabelsError(std::vector<std::pair<std::string, std::string>> missing)
      : std::runtime_error(describe(missing)), missing_(std::move(missing)) {}
  const std::vector<std::pair<std::string, std::string>>& missing() const { return missing_; }

 private:
  static std::string describe(const std::vector<std::pair<std::string, std::string>>& m) {
    std::string s = "labels missing from embedding spaces:";
    for (const auto& [label, space] : m) s += " (" + label + ", " + space + ")";
    return s;
  }
  std::vector<std::pair<std::string, std::string>> missing_;
};

inline LabelCodebook build_codebook(std::span<const EmbeddingSpace> spaces, std::span<const std::string> labels,
                                    const std::map<std::string, std::string>& aliases = {}) {
  if (spaces.empty()) throw std::invalid_argument("build_codebook: no embedding spaces");
  {
    std::map<std::string, int> seen;
    for (const auto& l : labels)
      if (seen[l]++) throw std::invalid_argument("build_codebook: duplicate label '" + l + "'");
  }
  std::vector<std::pair<std::string, std::string>> missing;
  for (const auto& label : labels) {
    auto it = aliases.find(label);
    const std::string& word = it == aliases.end() ? label : it->second;
    for (const auto& sp : spaces)
      if (!sp.contains(word)) missing.emplace_back(label, sp.name());
  }
  if (!missing.empty()) throw MissingLabelsError(std::move(missing));

  std::vector<Tensor> targets;
  std::vector<std::string> names;
  for (const auto& sp : spaces) {
    Tensor t({labels.size(), sp.dim()}, 0.0);
    for (std::size_t y = 0; y < labels.size(); ++y) {
      auto it = aliases.find(labels[y]);
      auto vec = sp.vector(it == aliases.end() ? labels[y] : it->second);
      double n2 = 0.0;
      for (double v : vec) n2 += v * v;
      if (n2 == 0.0)
        throw std::domain_error("build_codebook: zero vector for label '" + labels[y] + "' in space '" + sp.name() + "'");
      const double inv = 1.0 / std::sqrt(n2);
      for (std::size_t c = 0; c < sp.dim(); ++c) t.at(y, c) = vec[c] * inv;
    }
    targets.push_back(std::move(t));
    names.push_back(sp.name());
  }
  return LabelCodebook(std::vector<std::string>(labels.begin(), labels.end()), std::move(targets), std::move(names));
}

}  // namespace membed
