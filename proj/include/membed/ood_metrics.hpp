#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "model.hpp"

namespace membed {

/// Detector scores for in- and out-of-distribution examples. Higher means
/// "more in-distribution"; in-distribution is the positive class.
struct ScoreSet {
  std::vector<double> in_scores;
  std::vector<double> out_scores;

  void validate() const {
    if (in_scores.empty() || out_scores.empty()) throw std::invalid_argument("ScoreSet: both sides must be nonempty");
    for (double s : in_scores)
      if (!std::isfinite(s)) throw std::invalid_argument("ScoreSet: non-finite in-distribution score");
    for (double s : out_scores)
      if (!std::isfinite(s)) throw std::invalid_argument("ScoreSet: non-finite out-of-distribution score");
  }
};

struct DetectionReport {
  double fpr_at_95_tpr = 0.0;
  double detection_error = 0.0;
  double auroc = 0.0;
  double aupr_in = 0.0;
  double aupr_out = 0.0;
};

inline constexpr double kTargetTpr = 0.95;

namespace detail {

struct SweepPoint {
  double threshold;
  double tpr;
  double fpr;
  double precision;
};

/// Cumulative counts at every distinct threshold, from the highest score
/// down. A score s is accepted at threshold t iff s >= t.
inline std::vector<SweepPoint> sweep(std::span<const double> pos, std::span<const double> neg) {
  std::vector<std::pair<double, bool>> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.emplace_back(s, true);
  for (double s : neg) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  std::vector<SweepPoint> pts;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double t = all[i].first;
    while (i < all.size() && all[i].first == t) {
      (all[i].second ? tp : fp)++;
      ++i;
    }
    pts.push_back({t, static_cast<double>(tp) / np, static_cast<double>(fp) / nn,
                   static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  return pts;
}

inline double roc_area(const std::vector<SweepPoint>& pts) {
  double area = 0.0, px = 0.0, py = 0.0;
  for (const auto& p : pts) {
    area += (p.fpr - px) * (p.tpr + py) / 2.0;
    px = p.fpr;
    py = p.tpr;
  }
  return area;
}

/// Trapezoidal area under precision(recall), anchored at (0, 1).
inline double pr_area(const std::vector<SweepPoint>& pts) {
  double area = 0.0, pr = 0.0, pp = 1.0;
  for (const auto& p : pts) {
    area += (p.tpr - pr) * (p.precision + pp) / 2.0;
    pr = p.tpr;
    pp = p.precision;
  }
  return area;
}

}  // namespace detail

/// FPR at the largest threshold reaching 95% TPR, the detection error at that
/// operating point, AUROC and AUPR with either side as the positive class.
/// The detection error uses the nominal 95% TPR:
/// 0.5 * (1 - 0.95) + 0.5 * FPR.
inline DetectionReport evaluate_detection(const ScoreSet& scores) {
  scores.validate();
  const auto pts = detail::sweep(scores.in_scores, scores.out_scores);
  DetectionReport r;
  for (const auto& p : pts)
    if (p.tpr >= kTargetTpr) {
      r.fpr_at_95_tpr = p.fpr;
      break;
    }
  r.detection_error = 0.5 * (1.0 - kTargetTpr) + 0.5 * r.fpr_at_95_tpr;
  r.auroc = detail::roc_area(pts);
  r.aupr_in = detail::pr_area(pts);

  std::vector<double> neg_out, neg_in;
  for (double s : scores.out_scores) neg_out.push_back(-s);
  for (double s : scores.in_scores) neg_in.push_back(-s);
  r.aupr_out = detail::pr_area(detail::sweep(neg_out, neg_in));
  return r;
}

/// Largest softmax probability, computed with the max-shift.
inline double max_softmax_score(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("max_softmax_score: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return 1.0 / z;
}

/// Temperature-scaled max-softmax after a gradient-sign input step that
/// increases the top class's log-probability. One score per row of `x`.
inline std::vector<double> odin_scores(const MultiHeadModel& model, const Tensor& x, double temperature,
                                       double epsilon) {
  if (model.config().variant != Variant::softmax) throw std::invalid_argument("odin: model must be a softmax classifier");
  if (!(temperature > 0.0)) throw std::invalid_argument("odin: temperature must be > 0");
  if (epsilon < 0.0) throw std::invalid_argument("odin: epsilon must be >= 0");

  Tensor input = x;
  if (epsilon > 0.0) {
    const Tensor logits = model.infer(x)[0];
    std::vector<std::size_t> top;
    for (std::size_t r = 0; r < logits.rows(); ++r) top.push_back(argmax(logits.row_view(r)));
    // d/dx of -log S_top(x; T); stepping against it raises S_top.
    const Tensor g = ad::grad_wrt_input(
        [&](Tape& tape, Var xv) {
          auto p = model.bind(tape, false);
          auto out = model.forward(xv, p)[0];
          return ad::sum(ad::cross_entropy(ad::scale(out, 1.0 / temperature), top));
        },
        x);
    for (std::size_t i = 0; i < input.size(); ++i)
      input[i] -= epsilon * static_cast<double>((g[i] > 0.0) - (g[i] < 0.0));
  }
  const Tensor logits = model.infer(input)[0];
  std::vector<double> out;
  std::vector<double> scaled(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row_view(r);
    for (std::size_t c = 0; c < row.size(); ++c) scaled[c] = row[c] / temperature;
    out.push_back(max_softmax_score(scaled));
  }
  return out;
}

inline double odin_score(const MultiHeadModel& model, std::span<const double> x, double temperature, double epsilon) {
  return odin_scores(model, Tensor::vector(std::vector<double>(x.begin(), x.end())), temperature, epsilon)[0];
}

struct OdinChoice {
  double temperature = 1.0;
  double epsilon = 0.0;
  double fpr_at_95_tpr = 1.0;
};

inline const std::vector<double>& default_odin_temperatures() {
  static const std::vector<double> g{1, 10, 100, 1000};
  return g;
}

inline const std::vector<double>& default_odin_epsilons() {
  static const std::vector<double> g{0, 0.0005, 0.001, 0.002, 0.004};
  return g;
}

/// Grid cell with the lowest validation FPR at 95% TPR; ties go to the
/// smaller epsilon, then the smaller temperature.
inline OdinChoice odin_grid_search(const MultiHeadModel& model, const Tensor& val_in, const Tensor& val_out,
                                   std::span<const double> temperatures, std::span<const double> epsilons) {
  if (temperatures.empty() || epsilons.empty()) throw std::invalid_argument("odin_grid_search: empty grid");
  std::vector<double> ts(temperatures.begin(), temperatures.end()), es(epsilons.begin(), epsilons.end());
  std::sort(ts.begin(), ts.end());
  std::sort(es.begin(), es.end());
  std::optional<OdinChoice> best;
  for (double e : es)
    for (double t : ts) {
      ScoreSet s{odin_scores(model, val_in, t, e), odin_scores(model, val_out, t, e)};
      const double fpr = evaluate_detection(s).fpr_at_95_tpr;
      if (!best || fpr < best->fpr_at_95_tpr) best = OdinChoice{t, e, fpr};
    }
  return *best;
}

}  // namespace membed
