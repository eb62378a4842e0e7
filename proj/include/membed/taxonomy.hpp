#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "embedding_store.hpp"

namespace membed {

class TaxonomyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rooted is-a DAG. Depth counts nodes along the shortest chain to the root,
/// so depth(root) == 1.
class Taxonomy {
 public:
  Taxonomy() = default;

  std::size_t size() const { return ids_.size(); }
  std::size_t max_depth() const { return max_depth_; }
  const std::string& root() const { return ids_[root_]; }
  const std::string& id(std::size_t n) const { return ids_.at(n); }
  const std::vector<std::size_t>& parents(std::size_t n) const { return parents_.at(n); }

  std::optional<std::size_t> node(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t depth(std::size_t n) const { return depth_.at(n); }

  std::size_t node_of_label(const std::string& label) const {
    auto it = label_map_.find(label);
    if (it != label_map_.end()) return it->second;
    throw TaxonomyError("label '" + label + "' is not mapped to a taxonomy node");
  }

  /// Labels without an explicit mapping fall back to the node of the same id.
  void set_label_map(const std::map<std::string, std::string>& m) {
    for (const auto& [label, id] : m) {
      auto n = node(id);
      if (!n) throw TaxonomyError("label map: node '" + id + "' for label '" + label + "' is not in the taxonomy");
      label_map_[label] = *n;
    }
  }

  /// Upward edge distances from `n` to each of its ancestors (itself at 0).
  std::map<std::size_t, std::size_t> ancestor_distances(std::size_t n) const {
    std::map<std::size_t, std::size_t> dist{{n, 0}};
    std::deque<std::size_t> q{n};
    while (!q.empty()) {
      auto c = q.front();
      q.pop_front();
      for (auto p : parents_[c])
        if (dist.emplace(p, dist[c] + 1).second) q.push_back(p);
    }
    return dist;
  }

  friend Taxonomy load_taxonomy(std::istream& is);

 private:
  std::size_t intern(const std::string& id) {
    auto [it, added] = index_.emplace(id, ids_.size());
    if (added) {
      ids_.push_back(id);
      parents_.emplace_back();
      children_.emplace_back();
      label_map_.emplace(id, it->second);
    }
    return it->second;
  }

  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> parents_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::size_t> depth_;
  std::map<std::string, std::size_t> label_map_;
  std::size_t root_ = 0;
  std::size_t max_depth_ = 0;
};

/// Edge list "child parent", one per line, plus an optional "!root <id>"
/// directive. Without the directive the unique parentless node is the root.
inline Taxonomy load_taxonomy(std::istream& is) {
  Taxonomy t;
  std::optional<std::string> declared_root;
  std::string line;
  std::size_t lineno = 0;
  while (detail::read_line(is, line)) {
    ++lineno;
    auto toks = detail::split_spaces(line);
    if (toks.empty() || toks[0].front() == '#') continue;
    if (toks[0] == "!root") {
      if (toks.size() != 2) throw ParseError(lineno, "expected '!root <id>'");
      if (declared_root && *declared_root != toks[1]) throw TaxonomyError("multiple roots declared");
      declared_root = std::string(toks[1]);
      t.intern(*declared_root);
      continue;
    }
    if (toks.size() != 2) throw ParseError(lineno, "expected 'child parent'");
    if (toks[0] == toks[1]) throw TaxonomyError("cycle: node '" + std::string(toks[0]) + "' is its own parent");
    const auto c = t.intern(std::string(toks[0]));
    const auto p = t.intern(std::string(toks[1]));
    if (std::find(t.parents_[c].begin(), t.parents_[c].end(), p) == t.parents_[c].end()) {
      t.parents_[c].push_back(p);
      t.children_[p].push_back(c);
    }
  }
  if (t.ids_.empty()) throw TaxonomyError("empty taxonomy");

  // Cycle check: iterative DFS over parent edges with three colors.
  {
    std::vector<int> color(t.size(), 0);
    for (std::size_t s = 0; s < t.size(); ++s) {
      if (color[s]) continue;
      std::vector<std::pair<std::size_t, std::size_t>> stack{{s, 0}};
      color[s] = 1;
      while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < t.parents_[n].size()) {
          const auto p = t.parents_[n][i++];
          if (color[p] == 1) throw TaxonomyError("cycle through node '" + t.ids_[p] + "'");
          if (color[p] == 0) {
            color[p] = 1;
            stack.emplace_back(p, 0);
          }
        } else {
          color[n] = 2;
          stack.pop_back();
        }
      }
    }
  }

  std::vector<std::size_t> parentless;
  for (std::size_t n = 0; n < t.size(); ++n)
    if (t.parents_[n].empty()) parentless.push_back(n);
  if (declared_root) {
    t.root_ = t.index_.at(*declared_root);
    if (!t.parents_[t.root_].empty()) throw TaxonomyError("root '" + *declared_root + "' has a parent");
    for (auto n : parentless)
      if (n != t.root_) throw TaxonomyError("orphan node '" + t.ids_[n] + "' does not reach the root");
  } else {
    if (parentless.size() != 1) throw TaxonomyError("multiple roots: " + std::to_string(parentless.size()) + " parentless nodes");
    t.root_ = parentless[0];
  }

  t.depth_.assign(t.size(), 0);
  t.depth_[t.root_] = 1;
  std::deque<std::size_t> q{t.root_};
  while (!q.empty()) {
    auto n = q.front();
    q.pop_front();
    for (auto c : t.children_[n])
      if (!t.depth_[c]) {
        t.depth_[c] = t.depth_[n] + 1;
        q.push_back(c);
      }
  }
  for (std::size_t n = 0; n < t.size(); ++n)
    if (!t.depth_[n]) throw TaxonomyError("orphan node '" + t.ids_[n] + "' does not reach the root");
  t.max_depth_ = *std::max_element(t.depth_.begin(), t.depth_.end());
  return t;
}

/// "label node_id" lines.
inline std::map<std::string, std::string> parse_label_map(std::istream& is) { return parse_alias_table(is); }

struct SemanticScores {
  double path = 0.0;
  double wup = 0.0;
  double lch = 0.0;
};

/// Path = 1 / len, WUP = 2 depth(lcs) / (depth(a) + depth(b)),
/// LCH = -ln(len / (2 max_depth)), where len counts the nodes of the shortest
/// path joining a and b through a common ancestor and lcs is the deepest
/// common ancestor (ties go to the one nearest a and b).
///
/// In WUP, depth(a) and depth(b) are measured along the chain through lcs,
/// i.e. depth(lcs) plus the upward distance to lcs. On a tree this is the
/// plain depth. Under multiple inheritance the shortest root chain of a node
/// can be shorter than the depth of its deepest ancestor, and the plain
/// depths would push WUP above 1.
inline SemanticScores relatedness(const Taxonomy& tax, const std::string& a, const std::string& b) {
  const auto na = tax.node_of_label(a), nb = tax.node_of_label(b);
  const auto da = tax.ancestor_distances(na), db = tax.ancestor_distances(nb);
  std::optional<std::size_t> best_len, lcs;
  for (const auto& [c, d1] : da) {
    auto it = db.find(c);
    if (it == db.end()) continue;
    const std::size_t len = d1 + it->second + 1;
    if (!best_len || len < *best_len) best_len = len;
    // Among equally deep candidates, the one closest to a and b.
    if (!lcs || tax.depth(c) > tax.depth(*lcs) ||
        (tax.depth(c) == tax.depth(*lcs) && len < da.at(*lcs) + db.at(*lcs) + 1))
      lcs = c;
  }
  if (!best_len) throw std::logic_error("relatedness: no common ancestor in a rooted taxonomy");
  const double len = static_cast<double>(*best_len);
  SemanticScores s;
  s.path = 1.0 / len;
  const double dl = static_cast<double>(tax.depth(*lcs));
  s.wup = 2.0 * dl / (2.0 * dl + static_cast<double>(da.at(*lcs) + db.at(*lcs)));
  s.lch = -std::log(len / (2.0 * static_cast<double>(tax.max_depth())));
  return s;
}

inline SemanticScores avg_semantic_scores(const Taxonomy& tax,
                                          std::span<const std::pair<std::string, std::string>> pairs) {
  if (pairs.empty()) throw std::invalid_argument("avg_semantic_scores: no misclassified pairs");
  SemanticScores acc;
  for (const auto& [t, p] : pairs) {
    const auto s = relatedness(tax, t, p);
    acc.path += s.path;
    acc.wup += s.wup;
    acc.lch += s.lch;
  }
  const double n = static_cast<double>(pairs.size());
  return {acc.path / n, acc.wup / n, acc.lch / n};
}

}  // namespace membed
