#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "membed/ood_metrics.hpp"
#include "membed/random.hpp"
#include "oracles.hpp"

using namespace membed;

namespace {

void expect_same(const DetectionReport& r, const oracle::Report& o, double tol) {
  EXPECT_NEAR(r.fpr_at_95_tpr, o.fpr95, tol);
  EXPECT_NEAR(r.detection_error, o.det_err, tol);
  EXPECT_NEAR(r.auroc, o.auroc, tol);
  EXPECT_NEAR(r.aupr_in, o.aupr_in, tol);
  EXPECT_NEAR(r.aupr_out, o.aupr_out, tol);
}

void expect_same(const DetectionReport& a, const DetectionReport& b) {
  EXPECT_EQ(a.fpr_at_95_tpr, b.fpr_at_95_tpr);
  EXPECT_EQ(a.detection_error, b.detection_error);
  EXPECT_EQ(a.auroc, b.auroc);
  EXPECT_EQ(a.aupr_in, b.aupr_in);
  EXPECT_EQ(a.aupr_out, b.aupr_out);
}

/// Scores drawn from a small grid so that ties are common.
ScoreSet random_scores(Rng& rng) {
  ScoreSet s;
  const std::size_t ni = 1 + rng.below(100), no = 1 + rng.below(100);
  const double shift = rng.uniform(0, 3);
  for (std::size_t i = 0; i < ni; ++i) s.in_scores.push_back(std::round(rng.normal() * 4 + shift * 4) / 4);
  for (std::size_t i = 0; i < no; ++i) s.out_scores.push_back(std::round(rng.normal() * 4) / 4);
  return s;
}

/// Softmax model whose logits are `bias` for every input.
MultiHeadModel constant_logits(std::vector<double> bias) {
  MultiHeadModel m(ModelConfig::softmax(2, {}, 3, bias.size()), 1);
  for (auto& p : m.params()) p.values.assign(p.size(), 0.0);
  m.params().back().values = std::move(bias);
  return m;
}

}  // namespace

TEST(EvaluateDetection, PerfectSeparation) {
  const auto r = evaluate_detection({{2, 3, 4}, {-1, 0, 1}});
  EXPECT_EQ(r.fpr_at_95_tpr, 0.0);
  EXPECT_NEAR(r.detection_error, 0.025, 1e-15);
  EXPECT_EQ(r.auroc, 1.0);
  EXPECT_EQ(r.aupr_in, 1.0);
  EXPECT_EQ(r.aupr_out, 1.0);
}

TEST(EvaluateDetection, IdenticalScoresAreChance) {
  const auto r = evaluate_detection({{1, 1, 1, 1}, {1, 1}});
  EXPECT_EQ(r.auroc, 0.5);
  EXPECT_EQ(r.fpr_at_95_tpr, 1.0);
}

TEST(EvaluateDetection, CraftedOperatingPoint) {
  ScoreSet s;
  for (int i = 1; i <= 20; ++i) s.in_scores.push_back(i);
  s.out_scores = {0.5, 1.5, 2.5, 3.5};
  const auto r = evaluate_detection(s);
  EXPECT_EQ(r.fpr_at_95_tpr, 0.5);
  EXPECT_NEAR(r.detection_error, 0.275, 1e-15);
  expect_same(r, oracle::brute_report(s.in_scores, s.out_scores), 1e-12);
}

TEST(EvaluateDetection, Errors) {
  EXPECT_THROW(evaluate_detection({{}, {1}}), std::invalid_argument);
  EXPECT_THROW(evaluate_detection({{1}, {}}), std::invalid_argument);
  EXPECT_THROW(evaluate_detection({{std::nan("")}, {1}}), std::invalid_argument);
  EXPECT_THROW(evaluate_detection({{1}, {std::numeric_limits<double>::infinity()}}), std::invalid_argument);
}

TEST(EvaluateDetection, MatchesBruteForceOracle) {
  Rng rng(101);
  for (int t = 0; t < 200; ++t) {
    const auto s = random_scores(rng);
    const auto r = evaluate_detection(s);
    expect_same(r, oracle::brute_report(s.in_scores, s.out_scores), 1e-12);
    for (double v : {r.fpr_at_95_tpr, r.detection_error, r.auroc, r.aupr_in, r.aupr_out}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(EvaluateDetection, AurocIsMannWhitney) {
  Rng rng(102);
  for (int t = 0; t < 100; ++t) {
    const auto s = random_scores(rng);
    EXPECT_NEAR(evaluate_detection(s).auroc, oracle::mann_whitney(s.in_scores, s.out_scores), 1e-12);
  }
}

TEST(EvaluateDetection, MonotoneTransformInvariance) {
  Rng rng(103);
  for (int t = 0; t < 100; ++t) {
    auto s = random_scores(rng);
    const auto before = evaluate_detection(s);
    auto f = [](double v) { return std::atan(v) * 3.0 + 1.0; };
    for (double& v : s.in_scores) v = f(v);
    for (double& v : s.out_scores) v = f(v);
    expect_same(evaluate_detection(s), before);
  }
}

TEST(EvaluateDetection, SwapAndNegate) {
  Rng rng(104);
  for (int t = 0; t < 100; ++t) {
    const auto s = random_scores(rng);
    ScoreSet w;
    for (double v : s.out_scores) w.in_scores.push_back(-v);
    for (double v : s.in_scores) w.out_scores.push_back(-v);
    const auto a = evaluate_detection(s), b = evaluate_detection(w);
    EXPECT_NEAR(a.auroc, b.auroc, 1e-12);
    EXPECT_NEAR(a.aupr_in, b.aupr_out, 1e-12);
    EXPECT_NEAR(a.aupr_out, b.aupr_in, 1e-12);
  }
}

TEST(MaxSoftmax, Examples) {
  EXPECT_EQ(max_softmax_score(std::vector<double>{0, 0}), 0.5);
  EXPECT_NEAR(max_softmax_score(std::vector<double>{1000, 0}), 1.0, 1e-15);
  EXPECT_NEAR(max_softmax_score(std::vector<double>{2, 0}), std::exp(2.0) / (std::exp(2.0) + 1.0), 1e-15);
  EXPECT_NEAR(max_softmax_score(std::vector<double>{2, 0}), 0.8808, 1e-4);
}

TEST(Odin, TemperatureOneNoStepIsMsp) {
  MultiHeadModel m(ModelConfig::softmax(3, {5}, 4, 3), 9);
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x{rng.normal(), rng.normal(), rng.normal()};
    EXPECT_NEAR(odin_score(m, x, 1.0, 0.0), max_softmax_score(m.outputs(x)[0]), 1e-15);
  }
}

TEST(Odin, TemperatureTwo) {
  const auto m = constant_logits({2, 0});
  const std::vector<double> x{0.3, -0.1};
  EXPECT_NEAR(odin_score(m, x, 2.0, 0.0), std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-12);
  EXPECT_NEAR(odin_score(m, x, 2.0, 0.0), 0.7311, 1e-4);
}

TEST(Odin, StepRaisesTopProbability) {
  MultiHeadModel m(ModelConfig::softmax(3, {6}, 5, 3), 11);
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x{rng.normal(), rng.normal(), rng.normal()};
    EXPECT_GE(odin_score(m, x, 10.0, 1e-4), odin_score(m, x, 10.0, 0.0) - 1e-12);
  }
}

TEST(Odin, Errors) {
  const auto m = constant_logits({1, 0});
  const std::vector<double> x{0, 0};
  EXPECT_THROW(odin_score(m, x, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(odin_score(m, x, -1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(odin_score(m, x, 1.0, -0.1), std::invalid_argument);
  MultiHeadModel embed(ModelConfig::multi_embed(2, {}, 3, {2}), 1);
  EXPECT_THROW(odin_score(embed, x, 1.0, 0.0), std::invalid_argument);
}

namespace {

struct GridFixture {
  MultiHeadModel model{ModelConfig::softmax(2, {8}, 6, 3), 21};
  Tensor in, out;
  GridFixture() {
    Rng rng(22);
    std::vector<double> a, b;
    for (int i = 0; i < 60; ++i) {
      a.push_back(rng.normal() * 2);
      b.push_back(rng.normal() * 0.5);
    }
    in = Tensor({30, 2}, a);
    out = Tensor({30, 2}, b);
  }
};

}  // namespace

TEST(OdinGridSearch, SingleCell) {
  GridFixture f;
  const double t[] = {10}, e[] = {0.001};
  const auto c = odin_grid_search(f.model, f.in, f.out, t, e);
  EXPECT_EQ(c.temperature, 10.0);
  EXPECT_EQ(c.epsilon, 0.001);
}

TEST(OdinGridSearch, MatchesExhaustiveEvaluation) {
  GridFixture f;
  const auto& ts = default_odin_temperatures();
  const auto& es = default_odin_epsilons();
  const auto c = odin_grid_search(f.model, f.in, f.out, ts, es);
  EXPECT_NE(std::find(ts.begin(), ts.end(), c.temperature), ts.end());
  EXPECT_NE(std::find(es.begin(), es.end(), c.epsilon), es.end());
  // Exhaustive: lexicographic minimum of (fpr, epsilon, temperature).
  std::tuple<double, double, double> best{2.0, 0.0, 0.0};
  for (double t : ts)
    for (double e : es) {
      const double fpr =
          evaluate_detection({odin_scores(f.model, f.in, t, e), odin_scores(f.model, f.out, t, e)}).fpr_at_95_tpr;
      best = std::min(best, std::tuple{fpr, e, t});
    }
  EXPECT_EQ(c.fpr_at_95_tpr, std::get<0>(best));
  EXPECT_EQ(c.epsilon, std::get<1>(best));
  EXPECT_EQ(c.temperature, std::get<2>(best));
}

TEST(OdinGridSearch, TiesPreferSmallerEpsilonThenTemperature) {
  // Constant logits give the same scores in every cell.
  const auto m = constant_logits({1, 0});
  const Tensor x({4, 2}, 0.5);
  const double t[] = {100, 1, 10}, e[] = {0.004, 0.001};
  const auto c = odin_grid_search(m, x, x, t, e);
  EXPECT_EQ(c.temperature, 1.0);
  EXPECT_EQ(c.epsilon, 0.001);
}

TEST(OdinGridSearch, EmptyGrid) {
  GridFixture f;
  const std::vector<double> none, one{1};
  EXPECT_THROW(odin_grid_search(f.model, f.in, f.out, none, one), std::invalid_argument);
  EXPECT_THROW(odin_grid_search(f.model, f.in, f.out, one, none), std::invalid_argument);
}
