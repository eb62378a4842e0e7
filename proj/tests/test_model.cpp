#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "membed/model.hpp"
#include "membed/random.hpp"
#include "membed/synthetic.hpp"
#include "oracles.hpp"

using namespace membed;

namespace {

LabelCodebook random_codebook(Rng& rng, std::size_t n, const std::vector<std::size_t>& dims) {
  std::vector<std::string> labels;
  for (std::size_t y = 0; y < n; ++y) labels.push_back("l" + std::to_string(y));
  std::vector<EmbeddingSpace> spaces;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    EmbeddingSpace sp("s" + std::to_string(k), dims[k]);
    for (const auto& l : labels) {
      std::vector<double> v(dims[k]);
      for (double& x : v) x = rng.normal();
      sp.add(l, v);
    }
    spaces.push_back(sp);
  }
  return build_codebook(spaces, labels);
}

LabelCodebook axis_codebook() {
  EmbeddingSpace sp("axes", 2);
  sp.add("a", {1, 0});
  sp.add("b", {0, 1});
  const std::vector<EmbeddingSpace> spaces{sp};
  return build_codebook(spaces, std::vector<std::string>{"a", "b"});
}

/// Two well separated Gaussian blobs in the plane.
Dataset separable_toy(std::uint64_t seed, std::size_t per_class = 100) {
  Rng rng(seed);
  Dataset d;
  d.dim = 2;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t y = 0; y < 2; ++y) {
      const double cx = y == 0 ? -2.0 : 2.0;
      const std::vector<double> x{cx + 0.5 * rng.normal(), 0.5 * rng.normal()};
      d.push(x, y);
    }
  return d;
}

std::vector<double> random_input(Rng& rng, std::size_t n) {
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  return x;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TrainParams quick_params(std::size_t epochs, std::uint64_t seed = 3) {
  TrainParams hp;
  hp.epochs = epochs;
  hp.batch = 32;
  hp.rule = SgdMomentum{0.05, 0.9, 5e-4};
  hp.seed = seed;
  return hp;
}

}  // namespace

TEST(Forward, ZeroParametersGiveZeroOutputs) {
  MultiHeadModel m(ModelConfig::multi_embed(3, {4, 4}, 5, {2, 3}), 1);
  for (auto& p : m.params()) p.values.assign(p.size(), 0.0);
  for (const auto& o : m.outputs(std::vector<double>{1, -2, 3}))
    for (double v : o) EXPECT_EQ(v, 0.0);
}

TEST(Forward, HeadCountAndLengths) {
  MultiHeadModel m(ModelConfig::multi_embed(3, {4}, 5, {2, 7}), 1);
  const auto o = m.outputs(std::vector<double>{1, 2, 3});
  ASSERT_EQ(o.size(), 2u);
  EXPECT_EQ(o[0].size(), 2u);
  EXPECT_EQ(o[1].size(), 7u);
  EXPECT_EQ(m.params().size(), 2u + 2u * 6u);
}

TEST(Forward, DeterministicForSeed) {
  const auto cfg = ModelConfig::multi_embed(3, {4}, 5, {2, 3});
  MultiHeadModel a(cfg, 42), b(cfg, 42), c(cfg, 43);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  const std::vector<double> x{0.1, 0.2, 0.3};
  EXPECT_EQ(a.outputs(x), b.outputs(x));
}

TEST(Forward, HeadArchitecture) {
  // Hand evaluation of one head with a ReLU between the first two layers only.
  MultiHeadModel m(ModelConfig::multi_embed(1, {}, 1, {1}), 1);
  auto& p = m.params();
  p[0].values = {2.0};   // fc1.w
  p[1].values = {-1.0};  // fc1.b
  p[2].values = {-3.0};  // fc2.w
  p[3].values = {0.5};   // fc2.b
  p[4].values = {2.0};   // fc3.w
  p[5].values = {1.0};   // fc3.b
  // x = 1: fc1 = 1, relu 1, fc2 = -2.5, no relu, fc3 = -4.
  EXPECT_EQ(m.outputs(std::vector<double>{1.0})[0][0], -4.0);
  // x = 0: fc1 = -1, relu 0, fc2 = 0.5, fc3 = 2.
  EXPECT_EQ(m.outputs(std::vector<double>{0.0})[0][0], 2.0);
}

TEST(Forward, Errors) {
  MultiHeadModel m(ModelConfig::multi_embed(3, {4}, 5, {2}), 1);
  EXPECT_THROW(m.outputs(std::vector<double>{1, 2}), ShapeError);
  EXPECT_THROW(MultiHeadModel(ModelConfig::multi_embed(3, {0}, 5, {2}), 1), std::invalid_argument);
  EXPECT_THROW(MultiHeadModel(ModelConfig::multi_embed(3, {4}, 5, {}), 1), std::invalid_argument);
  EXPECT_THROW(MultiHeadModel(ModelConfig::softmax(3, {4}, 5, 1), 1), std::invalid_argument);
}

TEST(MultiEmbeddingLoss, Examples) {
  Rng rng(1);
  const auto cb1 = random_codebook(rng, 4, {3});
  const auto t = cb1.target(0, 2);
  const std::vector<std::vector<double>> exact{{t.begin(), t.end()}};
  EXPECT_NEAR(multi_embedding_loss(exact, cb1, 2), 0.0, 1e-15);

  const auto cb3 = random_codebook(rng, 4, {3, 4, 5});
  std::vector<std::vector<double>> neg;
  for (std::size_t k = 0; k < 3; ++k) {
    auto r = cb3.target(k, 1);
    std::vector<double> v(r.begin(), r.end());
    for (double& x : v) x = -x;
    neg.push_back(v);
  }
  EXPECT_NEAR(multi_embedding_loss(neg, cb3, 1), 3.0, 1e-14);

  EmbeddingSpace a("a", 2), b("b", 2);
  a.add("x", {1, 0});
  b.add("x", {0, 1});
  const std::vector<EmbeddingSpace> ab{a, b};
  const auto cb2 = build_codebook(ab, std::vector<std::string>{"x"});
  const std::vector<std::vector<double>> ortho{{0, 5}, {-2, 0}};
  EXPECT_DOUBLE_EQ(multi_embedding_loss(ortho, cb2, 0), 1.0);
}

TEST(MultiEmbeddingLoss, ZeroOutputNamesHead) {
  Rng rng(2);
  const auto cb = random_codebook(rng, 3, {2, 2});
  const std::vector<std::vector<double>> outs{{1, 0}, {0, 0}};
  try {
    multi_embedding_loss(outs, cb, 0);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("head 1"), std::string::npos);
  }
}

TEST(MultiEmbeddingLoss, Bounded) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t K = 1 + rng.below(5);
    std::vector<std::size_t> dims;
    for (std::size_t k = 0; k < K; ++k) dims.push_back(2 + rng.below(5));
    const auto cb = random_codebook(rng, 5, dims);
    MultiHeadModel m(ModelConfig::multi_embed(3, {4}, 4, dims), rng.next());
    const auto outs = m.outputs(random_input(rng, 3));
    const double l = multi_embedding_loss(outs, cb, rng.below(5));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, static_cast<double>(K));
  }
}

TEST(EmbeddingLoss, BatchMeanMatchesPerExampleSum) {
  Rng rng(4);
  const auto cb = random_codebook(rng, 4, {3, 2});
  MultiHeadModel m(ModelConfig::multi_embed(3, {5}, 4, {3, 2}), 5);
  std::vector<double> xs;
  for (int i = 0; i < 12; ++i) xs.push_back(rng.normal());
  const std::vector<std::size_t> ys{0, 3, 1, 1};
  Tape tape;
  auto p = m.bind(tape, false);
  const auto outs = m.forward(tape.constant(Tensor({4, 3}, xs)), p);
  const double batch = embedding_loss(outs, cb, ys).value()[0];
  double sum = 0.0;
  for (std::size_t r = 0; r < 4; ++r)
    sum += multi_embedding_loss(m.outputs(std::span(xs).subspan(3 * r, 3)), cb, ys[r]);
  EXPECT_NEAR(batch, sum / 4.0, 1e-14);
}

TEST(EmbeddingLoss, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const auto cb = random_codebook(rng, 4, {3, 2, 4});
    MultiHeadModel m(ModelConfig::multi_embed(3, {4}, 4, {3, 2, 4}), rng.next());
    std::vector<double> xs;
    for (int i = 0; i < 9; ++i) xs.push_back(rng.normal());
    const Tensor x({3, 3}, xs);
    const std::vector<std::size_t> ys{rng.below(4), rng.below(4), rng.below(4)};
    const double err = oracle::gradcheck(
        [&](Tape& tape, const std::vector<Var>& p) { return embedding_loss(m.forward(tape.constant(x), p), cb, ys); },
        m.params());
    EXPECT_LT(err, 1e-4);
  }
}

TEST(EmbeddingLoss, HeadGradientsAreExclusive) {
  Rng rng(6);
  const std::vector<std::size_t> dims{3, 2, 4};
  const auto cb = random_codebook(rng, 4, dims);
  MultiHeadModel m(ModelConfig::multi_embed(3, {4}, 4, dims), 7);
  std::vector<double> xs;
  for (int i = 0; i < 6; ++i) xs.push_back(rng.normal());
  const Tensor x({2, 3}, xs);
  const std::vector<std::size_t> ys{1, 3};

  // Gradients of the sum of the head terms selected by `mask`.
  auto grads = [&](const std::vector<bool>& mask) {
    Tape tape;
    auto p = m.bind(tape, true);
    auto outs = m.forward(tape.constant(x), p);
    std::optional<Var> total;
    for (std::size_t k = 0; k < dims.size(); ++k) {
      if (!mask[k]) continue;
      Tensor tgt(outs[k].value().shape, 0.0);
      for (std::size_t r = 0; r < ys.size(); ++r) {
        auto row = cb.target(k, ys[r]);
        std::copy(row.begin(), row.end(), tgt.values.begin() + static_cast<std::ptrdiff_t>(r * dims[k]));
      }
      Var d = ad::sum(ad::cosine_distance(outs[k], tape.constant(tgt)));
      total = total ? ad::add(*total, d) : d;
    }
    auto g = tape.backward(*total);
    std::vector<Tensor> r;
    for (auto v : p) r.push_back(g.of(v));
    return r;
  };
  const auto all = grads({true, true, true});
  const auto without1 = grads({true, false, true});
  const auto only1 = grads({false, true, false});
  const std::size_t trunk = 2;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const bool head1 = i >= trunk + 6 && i < trunk + 12;
    const bool shared = i < trunk;
    for (std::size_t j = 0; j < all[i].size(); ++j) {
      if (head1) {
        EXPECT_EQ(without1[i][j], 0.0);
        EXPECT_EQ(only1[i][j], all[i][j]);
      } else if (shared) {
        EXPECT_NEAR(all[i][j], without1[i][j] + only1[i][j], 1e-12);
      } else {
        EXPECT_EQ(only1[i][j], 0.0);
        EXPECT_NEAR(without1[i][j], all[i][j], 1e-12);
      }
    }
  }
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  const auto cb = axis_codebook();
  MultiHeadModel m(ModelConfig::multi_embed(2, {8}, 8, {2}), 1);
  const auto r = train(m, separable_toy(1), &cb, quick_params(0));
  EXPECT_TRUE(r.model == m);
  EXPECT_TRUE(r.log.empty());
}

TEST(Train, SeparableToyConverges) {
  const auto cb = axis_codebook();
  const auto r = train(MultiHeadModel(ModelConfig::multi_embed(2, {8}, 8, {2}), 1), separable_toy(1), &cb,
                       quick_params(200));
  ASSERT_EQ(r.log.size(), 200u);
  EXPECT_EQ(r.log.back().accuracy, 1.0);
  EXPECT_LT(r.log.back().mean_loss, 0.05);
  EXPECT_EQ(r.model.epochs_trained(), 200u);
}

TEST(Train, SameSeedSameParameters) {
  const auto cb = axis_codebook();
  const auto data = separable_toy(2);
  const MultiHeadModel m(ModelConfig::multi_embed(2, {8}, 8, {2}), 1);
  const auto a = train(m, data, &cb, quick_params(5));
  const auto b = train(m, data, &cb, quick_params(5));
  const auto c = train(m, data, &cb, quick_params(5, 4));
  EXPECT_TRUE(a.model == b.model);
  EXPECT_FALSE(a.model == c.model);
}

TEST(Train, Errors) {
  const auto cb = axis_codebook();
  MultiHeadModel m(ModelConfig::multi_embed(2, {8}, 8, {2}), 1);
  Dataset empty;
  empty.dim = 2;
  EXPECT_THROW(train(m, empty, &cb, quick_params(1)), std::invalid_argument);
  EXPECT_THROW(train(m, separable_toy(1), nullptr, quick_params(1)), std::invalid_argument);
  Dataset bad = separable_toy(1, 2);
  bad.labels[0] = 5;
  EXPECT_THROW(train(m, bad, &cb, quick_params(1)), std::invalid_argument);
  MultiHeadModel wide(ModelConfig::multi_embed(2, {8}, 8, {3}), 1);
  EXPECT_THROW(train(wide, separable_toy(1), &cb, quick_params(1)), std::invalid_argument);
}

TEST(Train, WrongPredictionsHaveSmallerNorms) {
  // Overlapping classes so that a fraction of the training set stays wrong.
  auto spec = SyntheticSpec::with_counts(4, 1);
  spec.dim = 4;
  spec.samples_per_class = 150;
  spec.separation = 1.0;
  spec.noise = 1.0;
  spec.seed = 9;
  const auto data = gen_synthetic_dataset(spec);
  const auto spaces = gen_synthetic_codebooks(data.labels, {8}, 10, 1.0);
  const auto cb = build_codebook(spaces, data.labels);
  auto hp = quick_params(40);
  const auto r = train(MultiHeadModel(ModelConfig::multi_embed(4, {16}, 16, {8}), 11), data.train, &cb, hp);
  std::vector<double> ok, bad;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const auto p = soft_decode(r.model.outputs(data.train.row(i)), cb);
    (p.label == data.train.labels[i] ? ok : bad).push_back(p.ood_score);
  }
  ASSERT_GT(bad.size(), 10u);
  ASSERT_GT(ok.size(), 10u);
  EXPECT_LT(median(bad), median(ok));
  EXPECT_LT(r.log.back().mean_score_wrong, r.log.back().mean_score_correct);
}

TEST(TrainEnsemble, SingleMemberEqualsBaseline) {
  const auto data = separable_toy(3);
  const auto cfg = ModelConfig::softmax(2, {8}, 8, 2);
  const std::uint64_t seeds[] = {17};
  auto hp = quick_params(5);
  const auto e = train_ensemble(cfg, seeds, data, hp);
  hp.seed = 17;
  const auto b = train(MultiHeadModel(cfg, 17), data, nullptr, hp);
  ASSERT_EQ(e.size(), 1u);
  EXPECT_TRUE(e[0].model == b.model);
}

TEST(TrainEnsemble, MembersDifferAndAverageHelps) {
  auto spec = SyntheticSpec::with_counts(4, 1);
  spec.dim = 4;
  spec.samples_per_class = 100;
  spec.separation = 1.5;
  spec.seed = 5;
  const auto data = gen_synthetic_dataset(spec);
  const auto cfg = ModelConfig::softmax(4, {16}, 16, 4);
  const std::uint64_t seeds[] = {1, 2, 3, 4, 5};
  const auto members = train_ensemble(cfg, seeds, data.train, quick_params(10));
  ASSERT_EQ(members.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) EXPECT_FALSE(members[i].model == members[j].model);

  std::vector<MultiHeadModel> models;
  for (const auto& m : members) models.push_back(m.model);
  auto accuracy = [&](auto predict) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < data.test_in.size(); ++i) ok += predict(data.test_in.row(i)) == data.test_in.labels[i];
    return static_cast<double>(ok) / static_cast<double>(data.test_in.size());
  };
  const double mean_acc = accuracy([&](auto x) { return argmax(ensemble_probabilities(models, x)); });
  double worst = 1.0;
  for (const auto& m : models) worst = std::min(worst, accuracy([&](auto x) { return argmax(m.outputs(x)[0]); }));
  EXPECT_GE(mean_acc, worst);
}

TEST(TrainEnsemble, Errors) {
  const auto data = separable_toy(3, 4);
  const auto cfg = ModelConfig::softmax(2, {4}, 4, 2);
  const std::uint64_t dup[] = {1, 2, 1};
  EXPECT_THROW(train_ensemble(cfg, dup, data, quick_params(1)), std::invalid_argument);
  EXPECT_THROW(train_ensemble(cfg, std::span<const std::uint64_t>{}, data, quick_params(1)), std::invalid_argument);
  const std::uint64_t one[] = {1};
  EXPECT_THROW(train_ensemble(ModelConfig::multi_embed(2, {4}, 4, {2}), one, data, quick_params(1)),
               std::invalid_argument);
}

TEST(Checkpoint, RoundTrip) {
  MultiHeadModel m(ModelConfig::multi_embed(3, {4, 5}, 6, {2, 3}), 99);
  m.set_epochs_trained(7);
  std::stringstream ss;
  write_checkpoint(ss, m.to_checkpoint());
  const auto back = MultiHeadModel::from_checkpoint(read_checkpoint(ss));
  EXPECT_TRUE(back == m);
  EXPECT_EQ(back.epochs_trained(), 7u);
  EXPECT_EQ(back.seed(), 99u);
  EXPECT_EQ(m.to_checkpoint().meta.at("init"), "uniform_fan_in");
}
