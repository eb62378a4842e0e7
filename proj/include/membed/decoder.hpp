#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedding_store.hpp"

namespace membed {

/// One predicted vector per embedding head.
using HeadOutputs = std::vector<std::vector<double>>;

struct Prediction {
  std::size_t label = 0;
  std::vector<std::size_t> per_head_nearest;
  /// Rank of `label` within each head's distance ordering, 1 = nearest.
  std::vector<std::size_t> per_head_rank;
  double distance_sum = 0.0;
  double ood_score = 0.0;
};

namespace detail {

inline void check_outputs(std::span<const std::vector<double>> outputs, const LabelCodebook& cb) {
  if (outputs.size() != cb.num_spaces())
    throw std::invalid_argument("decoder: got " + std::to_string(outputs.size()) + " head outputs for a codebook with " +
                                std::to_string(cb.num_spaces()) + " spaces");
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    if (outputs[k].size() != cb.dim(k))
      throw std::invalid_argument("decoder: head " + std::to_string(k) + " output has length " +
                                  std::to_string(outputs[k].size()) + ", expected " + std::to_string(cb.dim(k)));
    bool nonzero = false;
    for (double v : outputs[k]) nonzero = nonzero || v != 0.0;
    if (!nonzero) throw std::domain_error("decoder: head " + std::to_string(k) + " output has zero norm");
  }
}

/// dist[k][y] = cosine distance between head k's output and label y's target.
inline std::vector<std::vector<double>> distance_table(std::span<const std::vector<double>> outputs,
                                                       const LabelCodebook& cb) {
  check_outputs(outputs, cb);
  std::vector<std::vector<double>> d(outputs.size(), std::vector<double>(cb.num_labels()));
  for (std::size_t k = 0; k < outputs.size(); ++k)
    for (std::size_t y = 0; y < cb.num_labels(); ++y) d[k][y] = cosine_distance(cb.target(k, y), outputs[k]);
  return d;
}

inline std::size_t argmin_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[best]) best = i;
  return best;
}

/// Position of `y` in the order (distance, index): 1 + number of labels before it.
inline std::size_t rank_of(std::span<const double> dist, std::size_t y) {
  std::size_t r = 1;
  for (std::size_t j = 0; j < dist.size(); ++j)
    if (dist[j] < dist[y] || (dist[j] == dist[y] && j < y)) ++r;
  return r;
}

}  // namespace detail

inline double ood_score(std::span<const std::vector<double>> outputs) {
  double s = 0.0;
  for (const auto& o : outputs)
    for (double v : o) s += v * v;
  return s;
}

inline Prediction soft_decode(std::span<const std::vector<double>> outputs, const LabelCodebook& cb) {
  const auto dist = detail::distance_table(outputs, cb);
  std::vector<double> total(cb.num_labels(), 0.0);
  for (const auto& row : dist)
    for (std::size_t y = 0; y < total.size(); ++y) total[y] += row[y];

  Prediction p;
  p.label = detail::argmin_lowest(total);
  p.distance_sum = total[p.label];
  for (const auto& row : dist) {
    p.per_head_nearest.push_back(detail::argmin_lowest(row));
    p.per_head_rank.push_back(detail::rank_of(row, p.label));
  }
  p.ood_score = ood_score(outputs);
  return p;
}

/// Per-head nearest label, then plurality vote. Ties among the most-voted
/// labels go to the smaller summed distance, then to the lower index.
inline std::size_t hard_decode(std::span<const std::vector<double>> outputs, const LabelCodebook& cb) {
  const auto dist = detail::distance_table(outputs, cb);
  std::vector<std::size_t> votes(cb.num_labels(), 0);
  for (const auto& row : dist) ++votes[detail::argmin_lowest(row)];
  const std::size_t top = *std::max_element(votes.begin(), votes.end());
  std::size_t best = cb.num_labels();
  double best_sum = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < votes.size(); ++y) {
    if (votes[y] != top) continue;
    double s = 0.0;
    for (const auto& row : dist) s += row[y];
    if (s < best_sum) {
      best_sum = s;
      best = y;
    }
  }
  return best;
}

/// Soft-decoded label, or nullopt when the example is rejected as
/// out-of-distribution (score below alpha).
inline std::optional<std::size_t> classify_with_rejection(std::span<const std::vector<double>> outputs,
                                                          const LabelCodebook& cb, double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("classify_with_rejection: alpha must be >= 0");
  if (ood_score(outputs) < alpha) return std::nullopt;
  return soft_decode(outputs, cb).label;
}

/// Largest threshold t such that at least `tpr` of `scores` satisfy s >= t.
inline double threshold_at_tpr(std::span<const double> scores, double tpr = 0.95) {
  if (scores.empty()) throw std::invalid_argument("threshold_at_tpr: empty score list");
  if (!(tpr > 0.0 && tpr <= 1.0)) throw std::invalid_argument("threshold_at_tpr: tpr must be in (0, 1]");
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end(), std::greater<>());
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s[j] == s[i]) ++j;
    if (static_cast<double>(j) / n >= tpr) return s[i];
    i = j;
  }
  return s.back();
}

}  // namespace membed
