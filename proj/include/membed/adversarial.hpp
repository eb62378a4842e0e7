#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "decoder.hpp"
#include "model.hpp"

namespace membed {

/// Single gradient-sign step on a softmax surrogate, clipped to [lo, hi].
/// One row of `x` per example.
inline Tensor fgsm(const MultiHeadModel& surrogate, const Tensor& x, std::span<const std::size_t> labels,
                   double epsilon, double lo, double hi) {
  if (surrogate.config().variant != Variant::softmax) throw std::invalid_argument("fgsm: surrogate must be a softmax model");
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  if (lo > hi) throw std::invalid_argument("fgsm: empty input range");
  const std::size_t classes = surrogate.config().head_dims[0];
  for (auto y : labels)
    if (y >= classes) throw std::out_of_range("fgsm: label " + std::to_string(y) + " out of range");
  Tensor adv = x;
  if (epsilon == 0.0) return adv;
  const Tensor g = ad::grad_wrt_input(
      [&](Tape& tape, Var xv) {
        auto p = surrogate.bind(tape, false);
        return ad::sum(ad::cross_entropy(surrogate.forward(xv, p)[0], labels));
      },
      x);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double s = static_cast<double>((g[i] > 0.0) - (g[i] < 0.0));
    adv[i] = std::clamp(adv[i] + epsilon * s, lo, hi);
  }
  return adv;
}

inline std::vector<double> fgsm(const MultiHeadModel& surrogate, std::span<const double> x, std::size_t y,
                                double epsilon, double lo, double hi) {
  const std::size_t label[] = {y};
  return fgsm(surrogate, Tensor::vector(std::vector<double>(x.begin(), x.end())), label, epsilon, lo, hi).values;
}

enum class Verdict { clean, adversarial };

/// Size of the largest group of heads that share a nearest label.
inline std::size_t agreement_count(std::span<const std::size_t> votes) {
  std::map<std::size_t, std::size_t> c;
  std::size_t best = 0;
  for (auto v : votes) best = std::max(best, ++c[v]);
  return best;
}

/// Clean iff every head's nearest label is the same.
inline Verdict agreement_detector(std::span<const std::vector<double>> outputs, const LabelCodebook& cb) {
  if (outputs.size() < 2) throw std::invalid_argument("agreement_detector: needs at least two heads");
  const auto p = soft_decode(outputs, cb);
  return agreement_count(p.per_head_nearest) == outputs.size() ? Verdict::clean : Verdict::adversarial;
}

/// Max minus min, over heads, of the soft-decoded label's rank.
inline std::size_t ranking_spread(std::span<const std::vector<double>> outputs, const LabelCodebook& cb) {
  const auto p = soft_decode(outputs, cb);
  const auto [lo, hi] = std::minmax_element(p.per_head_rank.begin(), p.per_head_rank.end());
  return *hi - *lo;
}

struct DetectionRates {
  double detection_rate = 0.0;
  double false_rejection_rate = 0.0;
};

inline double flagged_fraction(const std::vector<bool>& flags) {
  if (flags.empty()) throw std::invalid_argument("detection_rates: empty flag list");
  return static_cast<double>(std::count(flags.begin(), flags.end(), true)) / static_cast<double>(flags.size());
}

inline DetectionRates detection_rates(const std::vector<bool>& flags_on_adversarial,
                                      const std::vector<bool>& flags_on_clean) {
  return {flagged_fraction(flags_on_adversarial), flagged_fraction(flags_on_clean)};
}

/// One strictness level of a detector: its flags on clean validation
/// inputs and on adversarial inputs.
struct LadderSetting {
  std::string name;
  std::vector<bool> clean_flags;
  std::vector<bool> adversarial_flags;
};

struct MatchedDetection {
  std::size_t setting = 0;
  double detection_rate = 0.0;
  double false_rejection_rate = 0.0;
  /// False when no setting met the target and the least-FRR one was used.
  bool target_met = true;
};

/// Strictest setting (ladder ordered from least to most strict) whose clean
/// false-rejection rate does not exceed `target_frr`.
inline MatchedDetection matched_frr_detection(std::span<const LadderSetting> ladder, double target_frr) {
  if (ladder.empty()) throw std::invalid_argument("matched_frr_detection: empty ladder");
  std::optional<MatchedDetection> best, least;
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    const auto r = detection_rates(ladder[i].adversarial_flags, ladder[i].clean_flags);
    MatchedDetection m{i, r.detection_rate, r.false_rejection_rate, true};
    if (r.false_rejection_rate <= target_frr) best = m;
    if (!least || r.false_rejection_rate <= least->false_rejection_rate) least = m;
  }
  if (best) return *best;
  least->target_met = false;
  return *least;
}

/// Settings "flag unless at least m voters agree", for m = 2..voters.
inline std::vector<LadderSetting> agreement_ladder(std::span<const std::size_t> clean_agreement,
                                                   std::span<const std::size_t> adversarial_agreement,
                                                   std::size_t voters) {
  if (voters < 2) throw std::invalid_argument("agreement_ladder: needs at least two voters");
  std::vector<LadderSetting> ladder;
  for (std::size_t m = 2; m <= voters; ++m) {
    LadderSetting s{"agree>=" + std::to_string(m), {}, {}};
    for (auto a : clean_agreement) s.clean_flags.push_back(a < m);
    for (auto a : adversarial_agreement) s.adversarial_flags.push_back(a < m);
    ladder.push_back(std::move(s));
  }
  return ladder;
}

struct SpreadBin {
  std::size_t spread = 0;
  std::size_t count_clean = 0;
  std::size_t count_adversarial = 0;
};

inline std::vector<SpreadBin> spread_histogram(std::span<const std::size_t> clean, std::span<const std::size_t> adv) {
  std::size_t top = 0;
  for (auto v : clean) top = std::max(top, v);
  for (auto v : adv) top = std::max(top, v);
  std::vector<SpreadBin> h(top + 1);
  for (std::size_t i = 0; i <= top; ++i) h[i].spread = i;
  for (auto v : clean) ++h[v].count_clean;
  for (auto v : adv) ++h[v].count_adversarial;
  return h;
}

}  // namespace membed
