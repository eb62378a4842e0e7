#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "membed/experiment.hpp"
#include "oracles.hpp"

using namespace membed;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("membed-test-" + tag + "-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const char* kSmall = R"(
seed = 3
dataset.in_classes = 4
dataset.out_classes = 2
dataset.dim = 4
dataset.samples_per_class = 40
codebook.k = 3
codebook.dim = 4
model.trunk = 8
model.head_hidden = 8
train.epochs = 2
train.batch = 16
eval.models = baseline, odin, ensemble, embed1, embed3
eval.ensemble_size = 2
eval.odin_temperatures = 1, 10
eval.odin_epsilons = 0, 0.001
eval.histogram_bins = 5
adv.embed_model = embed3
adv.surrogate_trunk = 8
adv.surrogate_head_hidden = 8
)";

/// The small config with `overrides` replacing or adding keys.
ExperimentConfig small_config(const std::string& overrides = "") {
  auto c = Config::parse_string(kSmall);
  const auto extra = Config::parse_string(overrides);
  for (const auto& [k, v] : extra.values()) c.set(k, v);
  return make_experiment_config(c);
}

std::map<std::string, std::string> csv_column(const std::string& text, std::size_t col) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    out[f[0]] = f.at(col);
  }
  return out;
}

}  // namespace

TEST(Config, ParsesAndRejects) {
  const auto c = Config::parse_string("# comment\na = 1\n b.c =  x, y \n");
  EXPECT_EQ(c.integer("a", 0), 1u);
  EXPECT_EQ(c.list("b.c", {}), (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(c.str("missing", "d"), "d");
  EXPECT_THROW(Config::parse_string("a\n"), ParseError);
  EXPECT_THROW(Config::parse_string("a = 1\na = 2\n"), ParseError);
  EXPECT_THROW(Config::parse_string(" = 1\n"), ParseError);
  EXPECT_THROW(Config::parse_string("a = x\n").integer("a", 0), std::invalid_argument);
  EXPECT_THROW(Config::parse_string("a = maybe\n").boolean("a", false), std::invalid_argument);
}

TEST(ExperimentConfig, DefaultsAndValidation) {
  const auto d = make_experiment_config(Config{});
  EXPECT_EQ(d.data.in_components.size(), 8u);
  EXPECT_EQ(d.data.out_components.size(), 4u);
  EXPECT_EQ(d.data.samples_per_class, 500u);
  EXPECT_EQ(d.codebook_dims.size(), 5u);
  EXPECT_EQ(d.ensemble_seeds.size(), 5u);
  EXPECT_EQ(d.data.seed, derive_seed(1, 1));
  EXPECT_EQ(d.hash(), make_experiment_config(Config{}).hash());
  EXPECT_NE(d.hash(), make_experiment_config(Config::parse_string("seed = 2")).hash());

  EXPECT_THROW(make_experiment_config(Config::parse_string("bogus.key = 1")), std::invalid_argument);
  EXPECT_THROW(make_experiment_config(Config::parse_string("eval.models = embed6")), std::invalid_argument);
  EXPECT_THROW(make_experiment_config(Config::parse_string("eval.models = svm")), std::invalid_argument);
  EXPECT_THROW(make_experiment_config(Config::parse_string("dataset.in_classes = 1")), std::invalid_argument);
  EXPECT_THROW(make_experiment_config(Config::parse_string("dataset.out_classes = 0")), std::invalid_argument);
  EXPECT_THROW(make_experiment_config(Config::parse_string("train.optimizer = rmsprop")), std::invalid_argument);
  EXPECT_THROW(make_experiment_config(Config::parse_string("eval.models = baseline, embed1")), std::invalid_argument);
  EXPECT_NO_THROW(make_experiment_config(Config::parse_string("eval.models = baseline\nadv.enabled = false")));
}

TEST(GenData, DisjointLabelsAndDeterministicFiles) {
  TempDir a("gen-a"), b("gen-b");
  const auto cfg = small_config();
  Workspace wa(a.path), wb(b.path);
  stage_gen_data(cfg, wa);
  stage_gen_data(cfg, wb);
  for (const auto& rel : wa.written()) EXPECT_EQ(slurp(a.path / rel), slurp(b.path / rel)) << rel;
  const auto d = load_data(wa);
  EXPECT_EQ(d.labels.size(), 4u);
  EXPECT_EQ(d.ood_labels.size(), 2u);
  for (const auto& l : d.ood_labels) EXPECT_EQ(std::count(d.labels.begin(), d.labels.end(), l), 0);
}

TEST(GenData, StandardCountsAreDisjoint) {
  const auto data = gen_synthetic_dataset(SyntheticSpec::with_counts(8, 4));
  std::set<std::string> in(data.labels.begin(), data.labels.end());
  for (const auto& l : data.ood_labels) EXPECT_FALSE(in.count(l));
  EXPECT_EQ(in.size(), 8u);
  EXPECT_EQ(data.ood_labels.size(), 4u);
}

TEST(GenData, OverlappingSplitIsRejected) {
  SyntheticSpec s = SyntheticSpec::with_counts(3, 1);
  s.out_components = {2};
  EXPECT_THROW(gen_synthetic_dataset(s), std::invalid_argument);
}

TEST(GenData, ZeroSeparationGivesChanceAuroc) {
  auto spec = SyntheticSpec::with_counts(2, 2);
  spec.separation = 0.0;
  spec.dim = 4;
  spec.samples_per_class = 1000;
  spec.seed = 77;
  const auto data = gen_synthetic_dataset(spec);
  TrainParams hp;
  hp.epochs = 2;
  hp.batch = 64;
  hp.seed = 5;
  const auto r = train(MultiHeadModel(ModelConfig::softmax(4, {8}, 8, 2), 6), data.train, nullptr, hp);
  ScoreSet s;
  for (std::size_t i = 0; i < 500; ++i) s.in_scores.push_back(max_softmax_score(r.model.outputs(data.test_in.row(i))[0]));
  for (std::size_t i = 0; i < 500; ++i) s.out_scores.push_back(max_softmax_score(r.model.outputs(data.test_out.row(i))[0]));
  EXPECT_NEAR(evaluate_detection(s).auroc, 0.5, 0.05);
}

TEST(GenCodebooks, ZeroDiversityPreservesCosines) {
  std::vector<std::string> labels;
  for (int i = 0; i < 10; ++i) labels.push_back("c" + std::to_string(i));
  const auto spaces = gen_synthetic_codebooks(labels, {6, 6, 9}, 4, 0.0);
  for (std::size_t k = 1; k < spaces.size(); ++k)
    for (const auto& a : labels)
      for (const auto& b : labels)
        EXPECT_NEAR(cosine_distance(spaces[k].vector(a), spaces[k].vector(b)),
                    cosine_distance(spaces[0].vector(a), spaces[0].vector(b)), 1e-12);
}

TEST(GenCodebooks, UnitRowsAndErrors) {
  std::vector<std::string> labels;
  for (int i = 0; i < 10; ++i) labels.push_back("c" + std::to_string(i));
  const auto spaces = gen_synthetic_codebooks(labels, {4, 4, 4, 4, 4}, 4, 0.5);
  ASSERT_EQ(spaces.size(), 5u);
  for (const auto& sp : spaces) {
    EXPECT_EQ(sp.size(), 10u);
    for (const auto& l : labels) {
      double n2 = 0.0;
      for (double v : sp.vector(l)) n2 += v * v;
      EXPECT_NEAR(n2, 1.0, 1e-12);
    }
  }
  EXPECT_THROW(gen_synthetic_codebooks(labels, {4, 1}, 4, 0.5), std::invalid_argument);
  EXPECT_THROW(gen_synthetic_codebooks(labels, {4}, 4, 1.5), std::invalid_argument);
}

TEST(GenEmbeddings, WritesOneFilePerSpace) {
  TempDir t("emb");
  Workspace ws(t.path);
  const auto cfg = small_config();
  stage_gen_data(cfg, ws);
  stage_gen_embeddings(cfg, ws);
  for (int k = 0; k < 3; ++k) {
    std::ifstream is(t.path / ("embeddings/space" + std::to_string(k) + ".txt"));
    const auto sp = parse_embedding_file(is, EmbeddingFormat::headered);
    EXPECT_EQ(sp.size(), 4u);
    EXPECT_EQ(sp.dim(), 4u);
  }
}

TEST(EmbedSubset, SortedDistinctAndFull) {
  const auto cfg = small_config();
  const auto s = embed_subset(cfg, 5, 3);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 3u);
  EXPECT_EQ(embed_subset(cfg, 5, 5), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(embed_count("embed3"), 3u);
}

TEST(RunExperiment, BaselineOnlyWritesOneReport) {
  TempDir t("baseline");
  const auto cfg = small_config("eval.models = baseline\nadv.enabled = false\n");
  const auto m = run_experiment(cfg, t.path);
  const auto report = slurp(t.path / "ood/report.csv");
  EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 2);
  EXPECT_EQ(report.rfind("model,fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out\nbaseline,", 0), 0u);
  EXPECT_FALSE(fs::exists(t.path / "adv"));
  EXPECT_EQ(m.config_hash, cfg.hash());
}

TEST(RunExperiment, FullSmallRunIsDeterministicAndComplete) {
  TempDir a("full-a"), b("full-b");
  const auto cfg = small_config();
  const auto ma = run_experiment(cfg, a.path);
  const auto mb = run_experiment(cfg, b.path);
  EXPECT_EQ(ma.artifacts, mb.artifacts);
  for (const auto& rel : ma.artifacts) {
    ASSERT_TRUE(fs::exists(a.path / rel)) << rel;
    EXPECT_GT(fs::file_size(a.path / rel), 0u) << rel;
    EXPECT_EQ(slurp(a.path / rel), slurp(b.path / rel)) << rel;
  }
  for (const char* rel : {"ood/report.csv", "ood/histogram_embed3.csv", "ood/norms_embed3.csv",
                          "ood/predictions_embed3.csv", "adv/matched.csv", "adv/spread_histogram.csv",
                          "semantic/table.csv", "manifest.txt"})
    EXPECT_TRUE(fs::exists(a.path / rel)) << rel;
  const auto rows = csv_column(slurp(a.path / "ood/report.csv"), 3);
  for (const char* m : {"baseline", "odin", "ensemble", "embed1", "embed3"}) EXPECT_TRUE(rows.count(m)) << m;
  EXPECT_EQ(slurp(a.path / "ood/histogram_embed3.csv").rfind("bin_left,bin_right,count_in,count_out\n", 0), 0u);
  EXPECT_EQ(slurp(a.path / "ood/predictions_embed3.csv")
                .rfind("example_id,true_label,predicted_label,distance_sum,ood_score,per_head_nearest,per_head_rank", 0),
            0u);
}

TEST(RunExperiment, HistogramCountsMatchScores) {
  TempDir t("hist");
  const auto cfg = small_config("eval.models = embed1\nadv.enabled = false\n");
  run_experiment(cfg, t.path);
  std::istringstream scores(slurp(t.path / "ood/scores_embed1.csv"));
  std::string line;
  std::getline(scores, line);
  std::size_t n_in = 0, n_out = 0;
  while (std::getline(scores, line)) (line.back() == '1' ? n_in : n_out)++;
  std::istringstream hist(slurp(t.path / "ood/histogram_embed1.csv"));
  std::getline(hist, line);
  std::size_t h_in = 0, h_out = 0, bins = 0;
  while (std::getline(hist, line)) {
    std::stringstream ls(line);
    std::string l, r, ci, co;
    std::getline(ls, l, ',');
    std::getline(ls, r, ',');
    std::getline(ls, ci, ',');
    std::getline(ls, co, ',');
    h_in += std::stoul(ci);
    h_out += std::stoul(co);
    ++bins;
  }
  EXPECT_EQ(bins, 5u);
  EXPECT_EQ(h_in, n_in);
  EXPECT_EQ(h_out, n_out);
}

TEST(Stages, RunSeparatelyAndRequireInputs) {
  TempDir t("stages");
  const auto cfg = small_config("eval.models = baseline, embed1\nadv.enabled = false\n");
  Workspace ws(t.path);
  EXPECT_THROW(stage_train(cfg, ws), std::runtime_error);
  bind_config(cfg, ws);
  stage_gen_data(cfg, ws);
  stage_gen_embeddings(cfg, ws);
  stage_train(cfg, ws);
  stage_eval_ood(cfg, ws);
  stage_eval_semantic(cfg, ws);
  EXPECT_TRUE(fs::exists(t.path / "semantic/table.csv"));
  EXPECT_THROW(stage_eval_adv(cfg, ws), std::invalid_argument);
  Workspace again(t.path);
  EXPECT_NO_THROW(bind_config(cfg, again));
  const auto other = small_config("eval.models = baseline\nadv.enabled = false\ntrain.epochs = 3\n");
  EXPECT_THROW(bind_config(other, again), std::runtime_error);
}

TEST(Histogram, EqualWidthClosedLastBin) {
  const auto h = score_histogram({{0, 1, 2, 4}, {4, 0}}, 2);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].count_in, 2u);
  EXPECT_EQ(h[1].count_in, 2u);
  EXPECT_EQ(h[1].count_out, 1u);
  EXPECT_EQ(h[0].count_out, 1u);
}
