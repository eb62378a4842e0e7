#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adversarial.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "decoder.hpp"
#include "embedding_store.hpp"
#include "model.hpp"
#include "ood_metrics.hpp"
#include "random.hpp"
#include "synthetic.hpp"
#include "taxonomy.hpp"

namespace membed {

inline constexpr const char* kVersion = "0.1.0";

/// Seed for a stochastic component, derived from the master seed unless the
/// config pins it.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) { return Rng(master).fork(salt).next(); }

struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::string generator = "gaussian_mixture";
  SyntheticSpec data;

  std::string codebook_source = "synthetic";  // synthetic | files
  std::vector<std::size_t> codebook_dims{16, 16, 16, 16, 16};
  double codebook_diversity = 1.0;
  std::uint64_t codebook_seed = 0;
  std::uint64_t subset_seed = 0;
  std::vector<std::string> codebook_files;
  EmbeddingFormat codebook_format = EmbeddingFormat::headered;
  std::string alias_file;

  std::vector<std::size_t> trunk{32, 32};
  std::size_t head_hidden = 32;
  TrainParams train;

  std::vector<std::string> models{"baseline", "odin", "ensemble", "embed1", "embed3", "embed5"};
  std::vector<std::uint64_t> ensemble_seeds;
  std::vector<double> odin_temperatures = default_odin_temperatures();
  std::vector<double> odin_epsilons = default_odin_epsilons();
  std::size_t histogram_bins = 20;

  bool adv_enabled = true;
  double adv_epsilon = 0.5;
  std::vector<std::size_t> surrogate_trunk{48, 48};
  std::size_t surrogate_head_hidden = 48;
  std::uint64_t surrogate_seed = 0;
  double adv_target_frr = 0.03;
  std::string adv_embed_model = "embed5";

  std::string taxonomy_file;
  std::string label_map_file;

  /// Canonical resolved form; its hash identifies the run.
  Config resolved;

  std::uint64_t hash() const { return fnv1a(resolved.canonical()); }

  bool wants(const std::string& m) const { return std::find(models.begin(), models.end(), m) != models.end(); }

  std::vector<std::string> embed_models() const {
    std::vector<std::string> out;
    for (const auto& m : models)
      if (m.rfind("embed", 0) == 0) out.push_back(m);
    return out;
  }

  bool needs_baseline() const { return wants("baseline") || wants("odin"); }
  bool needs_ensemble() const { return wants("ensemble") || adv_enabled; }
};

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> k{
      "seed",
      "dataset.generator", "dataset.in_classes", "dataset.out_classes", "dataset.dim",
      "dataset.samples_per_class", "dataset.classes_per_group", "dataset.separation", "dataset.within",
      "dataset.noise", "dataset.range", "dataset.test_fraction", "dataset.val_fraction",
      "dataset.ood_val_fraction", "dataset.seed",
      "codebook.source", "codebook.k", "codebook.dim", "codebook.dims", "codebook.diversity", "codebook.seed",
      "codebook.subset_seed", "codebook.files", "codebook.format", "codebook.aliases",
      "model.trunk", "model.head_hidden",
      "train.epochs", "train.batch", "train.optimizer", "train.lr", "train.momentum", "train.weight_decay",
      "train.beta1", "train.beta2", "train.adam_eps", "train.milestones", "train.gamma", "train.seed",
      "eval.models", "eval.ensemble_size", "eval.ensemble_seeds", "eval.odin_temperatures",
      "eval.odin_epsilons", "eval.histogram_bins",
      "adv.enabled", "adv.epsilon", "adv.surrogate_trunk", "adv.surrogate_head_hidden", "adv.surrogate_seed",
      "adv.target_frr", "adv.embed_model",
      "semantic.taxonomy", "semantic.label_map"};
  return k;
}

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string fixed(double v, int decimals) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::string percent(double v) { return fixed(100.0 * v, 2); }

template <class T>
std::string join(const std::vector<T>& v, char sep = ',') {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << sep;
    if constexpr (std::is_floating_point_v<T>)
      os << num(v[i]);
    else
      os << v[i];
  }
  return os.str();
}

inline std::vector<std::size_t> sizes(const std::vector<std::uint64_t>& v) { return {v.begin(), v.end()}; }

}  // namespace detail

/// Reads an ExperimentConfig from a flat config; unset seeds derive from
/// `seed`. Throws on unknown keys and on inconsistent settings.
inline ExperimentConfig make_experiment_config(const Config& c) {
  c.require_known(config_keys());
  ExperimentConfig e;
  e.seed = c.integer("seed", 1);

  e.generator = c.str("dataset.generator", "gaussian_mixture");
  if (e.generator != "gaussian_mixture") throw std::invalid_argument("config: unknown dataset.generator '" + e.generator + "'");
  const auto n_in = c.integer("dataset.in_classes", 8), n_out = c.integer("dataset.out_classes", 4);
  e.data = SyntheticSpec::with_counts(n_in, n_out);
  e.data.dim = c.integer("dataset.dim", 16);
  e.data.samples_per_class = c.integer("dataset.samples_per_class", 500);
  e.data.classes_per_group = c.integer("dataset.classes_per_group", 2);
  e.data.separation = c.real("dataset.separation", 1.5);
  e.data.within = c.real("dataset.within", 0.3);
  e.data.noise = c.real("dataset.noise", 1.0);
  e.data.range = c.real("dataset.range", 10.0);
  e.data.test_fraction = c.real("dataset.test_fraction", 0.25);
  e.data.val_fraction = c.real("dataset.val_fraction", 0.2);
  e.data.ood_val_fraction = c.real("dataset.ood_val_fraction", 0.2);
  e.data.seed = c.integer("dataset.seed", derive_seed(e.seed, 1));
  e.data.validate();

  e.codebook_source = c.str("codebook.source", "synthetic");
  if (e.codebook_source != "synthetic" && e.codebook_source != "files")
    throw std::invalid_argument("config: codebook.source must be 'synthetic' or 'files'");
  if (c.has("codebook.dims")) {
    e.codebook_dims = detail::sizes(c.integers("codebook.dims", {}));
  } else {
    e.codebook_dims.assign(c.integer("codebook.k", 5), c.integer("codebook.dim", 16));
  }
  e.codebook_diversity = c.real("codebook.diversity", 1.0);
  e.codebook_seed = c.integer("codebook.seed", derive_seed(e.seed, 2));
  e.subset_seed = c.integer("codebook.subset_seed", derive_seed(e.seed, 3));
  e.codebook_files = c.list("codebook.files", {});
  const auto fmt = c.str("codebook.format", "headered");
  if (fmt != "headered" && fmt != "headerless") throw std::invalid_argument("config: codebook.format must be headered or headerless");
  e.codebook_format = fmt == "headered" ? EmbeddingFormat::headered : EmbeddingFormat::headerless;
  e.alias_file = c.str("codebook.aliases", "");
  if (e.codebook_source == "files") {
    if (e.codebook_files.empty()) throw std::invalid_argument("config: codebook.source = files needs codebook.files");
    e.codebook_dims.clear();
  } else if (e.codebook_dims.empty()) {
    throw std::invalid_argument("config: need at least one codebook");
  }

  e.trunk = detail::sizes(c.integers("model.trunk", {32, 32}));
  e.head_hidden = c.integer("model.head_hidden", 32);

  e.train.epochs = c.integer("train.epochs", 20);
  e.train.batch = c.integer("train.batch", 64);
  const auto opt = c.str("train.optimizer", "sgd");
  const double lr = c.real("train.lr", 0.05), wd = c.real("train.weight_decay", 5e-4);
  if (opt == "sgd")
    e.train.rule = SgdMomentum{lr, c.real("train.momentum", 0.9), wd};
  else if (opt == "adam")
    e.train.rule = Adam{lr, c.real("train.beta1", 0.9), c.real("train.beta2", 0.999), c.real("train.adam_eps", 1e-8), wd};
  else
    throw std::invalid_argument("config: train.optimizer must be sgd or adam");
  e.train.milestones = detail::sizes(c.integers("train.milestones", {}));
  e.train.gamma = c.real("train.gamma", 0.2);
  e.train.seed = c.integer("train.seed", derive_seed(e.seed, 4));

  e.models = c.list("eval.models", e.models);
  if (e.models.empty()) throw std::invalid_argument("config: eval.models is empty");
  const std::size_t k_total = e.codebook_source == "files" ? e.codebook_files.size() : e.codebook_dims.size();
  for (const auto& m : e.models) {
    if (m == "baseline" || m == "odin" || m == "ensemble") continue;
    if (m.rfind("embed", 0) == 0) {
      std::size_t k = 0;
      const auto tail = std::string_view(m).substr(5);
      if (std::from_chars(tail.data(), tail.data() + tail.size(), k).ptr != tail.data() + tail.size() || k == 0 || k > k_total)
        throw std::invalid_argument("config: model '" + m + "' needs 1.." + std::to_string(k_total) + " embeddings");
      continue;
    }
    throw std::invalid_argument("config: unknown model '" + m + "'");
  }
  const auto ens_n = c.integer("eval.ensemble_size", 5);
  std::vector<std::uint64_t> ens_default;
  for (std::uint64_t i = 0; i < ens_n; ++i) ens_default.push_back(derive_seed(e.seed, 100 + i));
  e.ensemble_seeds = c.integers("eval.ensemble_seeds", ens_default);
  e.odin_temperatures = c.reals("eval.odin_temperatures", e.odin_temperatures);
  e.odin_epsilons = c.reals("eval.odin_epsilons", e.odin_epsilons);
  e.histogram_bins = c.integer("eval.histogram_bins", 20);
  if (e.histogram_bins == 0) throw std::invalid_argument("config: eval.histogram_bins must be >= 1");

  e.adv_enabled = c.boolean("adv.enabled", true);
  e.adv_epsilon = c.real("adv.epsilon", 0.5);
  e.surrogate_trunk = detail::sizes(c.integers("adv.surrogate_trunk", {48, 48}));
  e.surrogate_head_hidden = c.integer("adv.surrogate_head_hidden", 48);
  e.surrogate_seed = c.integer("adv.surrogate_seed", derive_seed(e.seed, 5));
  e.adv_target_frr = c.real("adv.target_frr", 0.03);
  e.adv_embed_model = c.str("adv.embed_model", "embed5");
  if (e.adv_enabled) {
    if (!e.wants(e.adv_embed_model)) throw std::invalid_argument("config: adv.embed_model '" + e.adv_embed_model + "' is not in eval.models");
    if (e.adv_epsilon < 0.0) throw std::invalid_argument("config: adv.epsilon must be >= 0");
    if (e.ensemble_seeds.size() < 2) throw std::invalid_argument("config: the adversarial comparison needs at least 2 ensemble members");
  }

  e.taxonomy_file = c.str("semantic.taxonomy", "");
  e.label_map_file = c.str("semantic.label_map", "");

  Config r;
  r.set("seed", std::to_string(e.seed));
  r.set("dataset.generator", e.generator);
  r.set("dataset.in_classes", std::to_string(n_in));
  r.set("dataset.out_classes", std::to_string(n_out));
  r.set("dataset.dim", std::to_string(e.data.dim));
  r.set("dataset.samples_per_class", std::to_string(e.data.samples_per_class));
  r.set("dataset.classes_per_group", std::to_string(e.data.classes_per_group));
  r.set("dataset.separation", detail::num(e.data.separation));
  r.set("dataset.within", detail::num(e.data.within));
  r.set("dataset.noise", detail::num(e.data.noise));
  r.set("dataset.range", detail::num(e.data.range));
  r.set("dataset.test_fraction", detail::num(e.data.test_fraction));
  r.set("dataset.val_fraction", detail::num(e.data.val_fraction));
  r.set("dataset.ood_val_fraction", detail::num(e.data.ood_val_fraction));
  r.set("dataset.seed", std::to_string(e.data.seed));
  r.set("codebook.source", e.codebook_source);
  if (e.codebook_source == "synthetic") {
    r.set("codebook.dims", detail::join(e.codebook_dims));
    r.set("codebook.diversity", detail::num(e.codebook_diversity));
    r.set("codebook.seed", std::to_string(e.codebook_seed));
  } else {
    r.set("codebook.files", detail::join(e.codebook_files));
    r.set("codebook.format", fmt);
    r.set("codebook.aliases", e.alias_file);
  }
  r.set("codebook.subset_seed", std::to_string(e.subset_seed));
  r.set("model.trunk", detail::join(e.trunk));
  r.set("model.head_hidden", std::to_string(e.head_hidden));
  r.set("train.epochs", std::to_string(e.train.epochs));
  r.set("train.batch", std::to_string(e.train.batch));
  r.set("train.optimizer", opt);
  r.set("train.lr", detail::num(lr));
  r.set("train.weight_decay", detail::num(wd));
  if (opt == "sgd") {
    r.set("train.momentum", detail::num(std::get<SgdMomentum>(e.train.rule).momentum));
  } else {
    const auto& a = std::get<Adam>(e.train.rule);
    r.set("train.beta1", detail::num(a.beta1));
    r.set("train.beta2", detail::num(a.beta2));
    r.set("train.adam_eps", detail::num(a.eps));
  }
  r.set("train.milestones", detail::join(e.train.milestones));
  r.set("train.gamma", detail::num(e.train.gamma));
  r.set("train.seed", std::to_string(e.train.seed));
  r.set("eval.models", detail::join(e.models));
  r.set("eval.ensemble_seeds", detail::join(e.ensemble_seeds));
  r.set("eval.odin_temperatures", detail::join(e.odin_temperatures));
  r.set("eval.odin_epsilons", detail::join(e.odin_epsilons));
  r.set("eval.histogram_bins", std::to_string(e.histogram_bins));
  r.set("adv.enabled", e.adv_enabled ? "true" : "false");
  if (e.adv_enabled) {
    r.set("adv.epsilon", detail::num(e.adv_epsilon));
    r.set("adv.surrogate_trunk", detail::join(e.surrogate_trunk));
    r.set("adv.surrogate_head_hidden", std::to_string(e.surrogate_head_hidden));
    r.set("adv.surrogate_seed", std::to_string(e.surrogate_seed));
    r.set("adv.target_frr", detail::num(e.adv_target_frr));
    r.set("adv.embed_model", e.adv_embed_model);
  }
  r.set("semantic.taxonomy", e.taxonomy_file);
  r.set("semantic.label_map", e.label_map_file);
  e.resolved = r;
  return e;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path + "'");
  return make_experiment_config(Config::parse(is));
}

/// Files under one output directory. Each stage reads what earlier stages
/// wrote, so the CLI subcommands can run separately.
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }

  std::ofstream create(const std::string& rel) {
    const auto p = path(rel);
    std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
    written_.push_back(rel);
    return os;
  }

  std::ifstream open(const std::string& rel, const char* produced_by) const {
    const auto p = path(rel);
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("missing '" + p.string() + "'; run '" + produced_by + "' first");
    return is;
  }

  const std::vector<std::string>& written() const { return written_; }

 private:
  std::filesystem::path root_;
  std::vector<std::string> written_;
};

struct ExperimentData {
  Dataset train, val, test_in, ood_val, test_out;
  std::vector<std::string> labels, ood_labels;
};

namespace detail {

inline std::vector<std::string> read_lines(std::istream& is) {
  std::vector<std::string> out;
  std::string line;
  while (read_line(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

inline const char* kSplits[] = {"train", "val", "test_in", "ood_val", "test_out"};

inline Dataset* split(ExperimentData& d, std::string_view name) {
  if (name == "train") return &d.train;
  if (name == "val") return &d.val;
  if (name == "test_in") return &d.test_in;
  if (name == "ood_val") return &d.ood_val;
  return &d.test_out;
}

}  // namespace detail

// ---------------------------------------------------------------- gen-data

inline void stage_gen_data(const ExperimentConfig& cfg, Workspace& ws) {
  auto s = gen_synthetic_dataset(cfg.data);
  ExperimentData d{s.train, s.val, s.test_in, s.ood_val, s.test_out, s.labels, s.ood_labels};
  for (const char* name : detail::kSplits) {
    auto os = ws.create(std::string("data/") + name + ".csv");
    write_dataset_csv(os, *detail::split(d, name));
  }
  {
    auto os = ws.create("data/labels.txt");
    for (const auto& l : s.labels) os << l << '\n';
  }
  {
    auto os = ws.create("data/ood_labels.txt");
    for (const auto& l : s.ood_labels) os << l << '\n';
  }
  auto os = ws.create("data/taxonomy.txt");
  os << s.taxonomy;
}

inline ExperimentData load_data(const Workspace& ws) {
  ExperimentData d;
  for (const char* name : detail::kSplits) {
    auto is = ws.open(std::string("data/") + name + ".csv", "gen-data");
    *detail::split(d, name) = read_dataset_csv(is);
  }
  auto li = ws.open("data/labels.txt", "gen-data");
  d.labels = detail::read_lines(li);
  auto lo = ws.open("data/ood_labels.txt", "gen-data");
  d.ood_labels = detail::read_lines(lo);
  return d;
}

// ---------------------------------------------------------- gen-embeddings

inline void stage_gen_embeddings(const ExperimentConfig& cfg, Workspace& ws) {
  if (cfg.codebook_source != "synthetic") return;
  auto li = ws.open("data/labels.txt", "gen-data");
  const auto labels = detail::read_lines(li);
  const auto spaces = gen_synthetic_codebooks(labels, cfg.codebook_dims, cfg.codebook_seed, cfg.codebook_diversity);
  for (std::size_t k = 0; k < spaces.size(); ++k) {
    auto os = ws.create("embeddings/space" + std::to_string(k) + ".txt");
    write_embedding_file(os, spaces[k], EmbeddingFormat::headered);
  }
}

/// Codebook over all configured spaces, in configuration order.
inline LabelCodebook load_codebook(const ExperimentConfig& cfg, const Workspace& ws,
                                   const std::vector<std::string>& labels) {
  std::vector<EmbeddingSpace> spaces;
  std::map<std::string, std::string> aliases;
  if (cfg.codebook_source == "synthetic") {
    for (std::size_t k = 0; k < cfg.codebook_dims.size(); ++k) {
      auto is = ws.open("embeddings/space" + std::to_string(k) + ".txt", "gen-embeddings");
      spaces.push_back(parse_embedding_file(is, EmbeddingFormat::headered, "space" + std::to_string(k)));
    }
  } else {
    for (const auto& f : cfg.codebook_files) {
      std::ifstream is(f, std::ios::binary);
      if (!is) throw std::runtime_error("cannot open embedding file '" + f + "'");
      spaces.push_back(parse_embedding_file(is, cfg.codebook_format, f));
    }
    if (!cfg.alias_file.empty()) {
      std::ifstream is(cfg.alias_file);
      if (!is) throw std::runtime_error("cannot open alias file '" + cfg.alias_file + "'");
      aliases = parse_alias_table(is);
    }
  }
  return build_codebook(spaces, labels, aliases);
}

/// Spaces used by "embed<k>": all of them when k covers the codebook,
/// otherwise a seeded random choice.
inline std::vector<std::size_t> embed_subset(const ExperimentConfig& cfg, std::size_t total, std::size_t k) {
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  if (k >= total) return idx;
  Rng rng = Rng(cfg.subset_seed).fork(k);
  rng.shuffle(std::span(idx));
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::size_t embed_count(const std::string& model) { return std::stoul(model.substr(5)); }

// ------------------------------------------------------------------- train

namespace detail {

inline void write_train_log(std::ostream& os, const TrainLog& log) {
  os << "epoch,mean_loss,accuracy,mean_score_correct,mean_score_wrong\n";
  for (std::size_t e = 0; e < log.size(); ++e)
    os << e + 1 << ',' << num(log[e].mean_loss) << ',' << num(log[e].accuracy) << ','
       << num(log[e].mean_score_correct) << ',' << num(log[e].mean_score_wrong) << '\n';
}

inline void save_model(Workspace& ws, const std::string& name, const TrainResult& r,
                       const std::map<std::string, std::string>& extra = {}) {
  Checkpoint ck = r.model.to_checkpoint();
  for (const auto& [k, v] : extra) ck.meta[k] = v;
  {
    auto os = ws.create("models/" + name + ".ckpt");
    write_checkpoint(os, ck);
  }
  auto os = ws.create("models/" + name + "_log.csv");
  write_train_log(os, r.log);
}

}  // namespace detail

inline MultiHeadModel load_model(const Workspace& ws, const std::string& name) {
  auto is = ws.open("models/" + name + ".ckpt", "train");
  return MultiHeadModel::from_checkpoint(read_checkpoint(is));
}

inline void stage_train(const ExperimentConfig& cfg, Workspace& ws) {
  const auto d = load_data(ws);
  const std::size_t n = d.labels.size(), p = d.train.dim;
  const auto softmax_cfg = ModelConfig::softmax(p, cfg.trunk, cfg.head_hidden, n);

  if (cfg.needs_baseline()) {
    auto hp = cfg.train;
    detail::save_model(ws, "baseline", train(MultiHeadModel(softmax_cfg, cfg.train.seed), d.train, nullptr, hp));
  }
  if (cfg.needs_ensemble()) {
    const auto members = train_ensemble(softmax_cfg, cfg.ensemble_seeds, d.train, cfg.train);
    for (std::size_t i = 0; i < members.size(); ++i) detail::save_model(ws, "ensemble" + std::to_string(i), members[i]);
  }
  const auto embeds = cfg.embed_models();
  if (!embeds.empty()) {
    const auto full = load_codebook(cfg, ws, d.labels);
    for (const auto& m : embeds) {
      const auto subset = embed_subset(cfg, full.num_spaces(), embed_count(m));
      const auto cb = full.select_spaces(subset);
      const auto mc = ModelConfig::multi_embed(p, cfg.trunk, cfg.head_hidden, cb.dims());
      detail::save_model(ws, m, train(MultiHeadModel(mc, cfg.train.seed), d.train, &cb, cfg.train),
                         {{"spaces", detail::join(subset)}});
    }
  }
  if (cfg.adv_enabled) {
    auto hp = cfg.train;
    hp.seed = cfg.surrogate_seed;
    const auto sc = ModelConfig::softmax(p, cfg.surrogate_trunk, cfg.surrogate_head_hidden, n);
    detail::save_model(ws, "surrogate", train(MultiHeadModel(sc, cfg.surrogate_seed), d.train, nullptr, hp));
  }
}

/// Embedding model together with the codebook restricted to its spaces.
struct EmbedModel {
  MultiHeadModel model;
  LabelCodebook codebook;
  std::vector<std::size_t> spaces;
};

inline EmbedModel load_embed_model(const Workspace& ws, const std::string& name, const LabelCodebook& full) {
  auto is = ws.open("models/" + name + ".ckpt", "train");
  const auto ck = read_checkpoint(is);
  std::vector<std::size_t> spaces;
  std::istringstream ss(ck.meta_at("spaces"));
  std::string tok;
  while (std::getline(ss, tok, ',')) spaces.push_back(std::stoul(tok));
  return {MultiHeadModel::from_checkpoint(ck), full.select_spaces(spaces), spaces};
}

// ---------------------------------------------------------------- scoring

namespace detail {

inline std::vector<std::vector<double>> softmax_rows(const Tensor& logits) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row_view(r);
    std::vector<double> q(row.begin(), row.end());
    const double mx = *std::max_element(q.begin(), q.end());
    double z = 0.0;
    for (double& v : q) z += (v = std::exp(v - mx));
    for (double& v : q) v /= z;
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace detail

/// Per-example predicted label and in-distribution score.
struct Scored {
  std::vector<std::size_t> predicted;
  std::vector<double> score;
};

inline std::vector<Prediction> embed_predictions(const EmbedModel& m, const Dataset& d) {
  const auto outs = m.model.infer(d.all());
  std::vector<Prediction> preds;
  for (std::size_t i = 0; i < d.size(); ++i) {
    HeadOutputs o;
    for (const auto& t : outs) {
      auto row = t.row_view(i);
      o.emplace_back(row.begin(), row.end());
    }
    preds.push_back(soft_decode(o, m.codebook));
  }
  return preds;
}

inline Scored score_embed(const EmbedModel& m, const Dataset& d) {
  Scored s;
  for (const auto& p : embed_predictions(m, d)) {
    s.predicted.push_back(p.label);
    s.score.push_back(p.ood_score);
  }
  return s;
}

inline Scored score_softmax(const MultiHeadModel& m, const Dataset& d) {
  Scored s;
  for (const auto& q : detail::softmax_rows(m.infer(d.all())[0])) {
    s.predicted.push_back(argmax(q));
    s.score.push_back(*std::max_element(q.begin(), q.end()));
  }
  return s;
}

/// Mean-probability prediction and its top probability.
inline Scored score_ensemble(std::span<const MultiHeadModel> members, const Dataset& d) {
  const Tensor x = d.all();
  std::vector<std::vector<double>> mean(d.size());
  for (const auto& m : members) {
    const auto q = detail::softmax_rows(m.infer(x)[0]);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (mean[i].empty()) mean[i].assign(q[i].size(), 0.0);
      for (std::size_t j = 0; j < q[i].size(); ++j) mean[i][j] += q[i][j] / static_cast<double>(members.size());
    }
  }
  Scored s;
  for (const auto& q : mean) {
    s.predicted.push_back(argmax(q));
    s.score.push_back(*std::max_element(q.begin(), q.end()));
  }
  return s;
}

inline std::vector<MultiHeadModel> load_ensemble(const ExperimentConfig& cfg, const Workspace& ws) {
  std::vector<MultiHeadModel> members;
  for (std::size_t i = 0; i < cfg.ensemble_seeds.size(); ++i) members.push_back(load_model(ws, "ensemble" + std::to_string(i)));
  return members;
}

struct HistogramBin {
  double left = 0.0, right = 0.0;
  std::size_t count_in = 0, count_out = 0;
};

/// Equal-width bins over the pooled score range; the last bin is closed.
inline std::vector<HistogramBin> score_histogram(const ScoreSet& s, std::size_t bins) {
  s.validate();
  if (bins == 0) throw std::invalid_argument("score_histogram: need at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&s.in_scores, &s.out_scores})
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (hi == lo) hi = lo + 1.0;
  const double w = (hi - lo) / static_cast<double>(bins);
  std::vector<HistogramBin> h(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    h[b].left = lo + w * static_cast<double>(b);
    h[b].right = b + 1 == bins ? hi : lo + w * static_cast<double>(b + 1);
  }
  auto bin_of = [&](double x) { return std::min(bins - 1, static_cast<std::size_t>((x - lo) / w)); };
  for (double x : s.in_scores) ++h[bin_of(x)].count_in;
  for (double x : s.out_scores) ++h[bin_of(x)].count_out;
  return h;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ----------------------------------------------------------------- eval-ood

namespace detail {

inline void write_scores(Workspace& ws, const std::string& rel, const ScoreSet& s) {
  auto os = ws.create(rel);
  os << "example_id,score,is_in_distribution\n";
  for (std::size_t i = 0; i < s.in_scores.size(); ++i) os << "test_in-" << i << ',' << num(s.in_scores[i]) << ",1\n";
  for (std::size_t i = 0; i < s.out_scores.size(); ++i) os << "test_out-" << i << ',' << num(s.out_scores[i]) << ",0\n";
}

inline void write_histogram(Workspace& ws, const std::string& rel, const std::vector<HistogramBin>& h) {
  auto os = ws.create(rel);
  os << "bin_left,bin_right,count_in,count_out\n";
  for (const auto& b : h) os << num(b.left) << ',' << num(b.right) << ',' << b.count_in << ',' << b.count_out << '\n';
}

inline void write_predictions(Workspace& ws, const std::string& rel, const ExperimentData& d,
                              const std::vector<Prediction>& in, const std::vector<Prediction>& out,
                              const std::vector<std::size_t>& hard_in, const std::vector<std::size_t>& hard_out,
                              double alpha) {
  auto os = ws.create(rel);
  os << "example_id,true_label,predicted_label,distance_sum,ood_score,per_head_nearest,per_head_rank,hard_label,"
        "accepted\n";
  auto row = [&](const std::string& id, const std::string& truth, const Prediction& p, std::size_t hard) {
    os << id << ',' << truth << ',' << d.labels[p.label] << ',' << num(p.distance_sum) << ',' << num(p.ood_score) << ','
       << join(p.per_head_nearest, ';') << ',' << join(p.per_head_rank, ';') << ',' << d.labels[hard] << ','
       << (p.ood_score >= alpha ? 1 : 0) << '\n';
  };
  for (std::size_t i = 0; i < in.size(); ++i) row("test_in-" + std::to_string(i), d.labels[d.test_in.labels[i]], in[i], hard_in[i]);
  for (std::size_t i = 0; i < out.size(); ++i)
    row("test_out-" + std::to_string(i), d.ood_labels[d.test_out.labels[i]], out[i], hard_out[i]);
}

inline std::vector<std::size_t> hard_labels(const EmbedModel& m, const Dataset& d) {
  const auto outs = m.model.infer(d.all());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    HeadOutputs o;
    for (const auto& t : outs) {
      auto row = t.row_view(i);
      o.emplace_back(row.begin(), row.end());
    }
    out.push_back(hard_decode(o, m.codebook));
  }
  return out;
}

}  // namespace detail

inline void stage_eval_ood(const ExperimentConfig& cfg, Workspace& ws) {
  const auto d = load_data(ws);
  std::vector<std::pair<std::string, DetectionReport>> rows;
  auto record = [&](const std::string& name, const ScoreSet& s) {
    detail::write_scores(ws, "ood/scores_" + name + ".csv", s);
    detail::write_histogram(ws, "ood/histogram_" + name + ".csv", score_histogram(s, cfg.histogram_bins));
    rows.emplace_back(name, evaluate_detection(s));
  };

  std::optional<MultiHeadModel> baseline;
  if (cfg.needs_baseline()) baseline = load_model(ws, "baseline");
  if (cfg.wants("baseline"))
    record("baseline", {score_softmax(*baseline, d.test_in).score, score_softmax(*baseline, d.test_out).score});
  if (cfg.wants("odin")) {
    const auto choice = odin_grid_search(*baseline, d.val.all(), d.ood_val.all(), cfg.odin_temperatures, cfg.odin_epsilons);
    {
      auto os = ws.create("ood/odin_calibration.csv");
      os << "temperature,epsilon,val_fpr_at_95_tpr\n"
         << detail::num(choice.temperature) << ',' << detail::num(choice.epsilon) << ','
         << detail::percent(choice.fpr_at_95_tpr) << '\n';
    }
    record("odin", {odin_scores(*baseline, d.test_in.all(), choice.temperature, choice.epsilon),
                    odin_scores(*baseline, d.test_out.all(), choice.temperature, choice.epsilon)});
  }
  if (cfg.wants("ensemble")) {
    const auto members = load_ensemble(cfg, ws);
    record("ensemble", {score_ensemble(members, d.test_in).score, score_ensemble(members, d.test_out).score});
  }
  const auto embeds = cfg.embed_models();
  if (!embeds.empty()) {
    const auto full = load_codebook(cfg, ws, d.labels);
    auto rej = ws.create("ood/rejection.csv");
    rej << "model,spaces,alpha,test_in_rejected,test_out_rejected\n";
    for (const auto& name : embeds) {
      const auto m = load_embed_model(ws, name, full);
      const auto val_scores = score_embed(m, d.val).score;
      const double alpha = threshold_at_tpr(val_scores, kTargetTpr);
      const auto pin = embed_predictions(m, d.test_in), pout = embed_predictions(m, d.test_out);
      ScoreSet s;
      for (const auto& p : pin) s.in_scores.push_back(p.ood_score);
      for (const auto& p : pout) s.out_scores.push_back(p.ood_score);
      record(name, s);
      detail::write_predictions(ws, "ood/predictions_" + name + ".csv", d, pin, pout, detail::hard_labels(m, d.test_in),
                                detail::hard_labels(m, d.test_out), alpha);
      auto frac_below = [&](const std::vector<double>& v) {
        return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double x) { return x < alpha; })) /
               static_cast<double>(v.size());
      };
      rej << name << ',' << detail::join(m.spaces, ';') << ',' << detail::num(alpha) << ','
          << detail::percent(frac_below(s.in_scores)) << ',' << detail::percent(frac_below(s.out_scores)) << '\n';

      // Score norms by correctness on the in-distribution test set, and of OOD inputs.
      std::vector<double> ok, bad;
      for (std::size_t i = 0; i < pin.size(); ++i) (pin[i].label == d.test_in.labels[i] ? ok : bad).push_back(pin[i].ood_score);
      auto os = ws.create("ood/norms_" + name + ".csv");
      os << "group,count,median_score,mean_score\n";
      auto line = [&](const char* g, const std::vector<double>& v) {
        double mean = std::numeric_limits<double>::quiet_NaN();
        if (!v.empty()) {
          mean = 0.0;
          for (double x : v) mean += x;
          mean /= static_cast<double>(v.size());
        }
        os << g << ',' << v.size() << ',' << detail::num(median(v)) << ',' << detail::num(mean) << '\n';
      };
      line("ood", s.out_scores);
      line("wrong", bad);
      line("correct", ok);
    }
  }
  auto os = ws.create("ood/report.csv");
  os << "model,fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out\n";
  for (const auto& [name, r] : rows)
    os << name << ',' << detail::percent(r.fpr_at_95_tpr) << ',' << detail::percent(r.detection_error) << ','
       << detail::percent(r.auroc) << ',' << detail::percent(r.aupr_in) << ',' << detail::percent(r.aupr_out) << '\n';
}

// ----------------------------------------------------------------- eval-adv

struct AdversarialSummary {
  MatchedDetection embed, ensemble;
  std::vector<LadderSetting> embed_ladder, ensemble_ladder;
};

inline AdversarialSummary stage_eval_adv(const ExperimentConfig& cfg, Workspace& ws) {
  if (!cfg.adv_enabled) throw std::invalid_argument("eval-adv: adv.enabled is false");
  const auto d = load_data(ws);
  const auto full = load_codebook(cfg, ws, d.labels);
  const auto em = load_embed_model(ws, cfg.adv_embed_model, full);
  const auto members = load_ensemble(cfg, ws);
  const auto surrogate = load_model(ws, "surrogate");

  const Tensor x = d.test_in.all();
  const Tensor adv = fgsm(surrogate, x, d.test_in.labels, cfg.adv_epsilon, d.test_in.lo, d.test_in.hi);
  {
    auto os = ws.create("adv/adversarial_batch.csv");
    os << "example_id,label";
    for (std::size_t j = 0; j < d.test_in.dim; ++j) os << ",x" << j;
    for (std::size_t j = 0; j < d.test_in.dim; ++j) os << ",adv_x" << j;
    os << ",epsilon,surrogate_id\n";
    for (std::size_t i = 0; i < x.rows(); ++i) {
      os << "test_in-" << i << ',' << d.labels[d.test_in.labels[i]];
      for (double v : x.row_view(i)) os << ',' << detail::num(v);
      for (double v : adv.row_view(i)) os << ',' << detail::num(v);
      os << ',' << detail::num(cfg.adv_epsilon) << ",models/surrogate.ckpt\n";
    }
  }
  Dataset adv_set = d.test_in;
  adv_set.features = adv.values;

  struct Diag {
    std::vector<std::size_t> agreement, spread;
  };
  auto embed_diag = [&](const Dataset& ds) {
    Diag g;
    const auto outs = em.model.infer(ds.all());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      HeadOutputs o;
      for (const auto& t : outs) {
        auto row = t.row_view(i);
        o.emplace_back(row.begin(), row.end());
      }
      const auto p = soft_decode(o, em.codebook);
      g.agreement.push_back(agreement_count(p.per_head_nearest));
      const auto [lo, hi] = std::minmax_element(p.per_head_rank.begin(), p.per_head_rank.end());
      g.spread.push_back(*hi - *lo);
    }
    return g;
  };
  auto ensemble_agreement = [&](const Dataset& ds) {
    std::vector<std::vector<std::size_t>> votes(ds.size());
    const Tensor t = ds.all();
    for (const auto& m : members) {
      const auto logits = m.infer(t)[0];
      for (std::size_t i = 0; i < ds.size(); ++i) votes[i].push_back(argmax(logits.row_view(i)));
    }
    std::vector<std::size_t> a;
    for (const auto& v : votes) a.push_back(agreement_count(v));
    return a;
  };

  // False rejection is calibrated on clean validation inputs.
  const auto e_val = embed_diag(d.val), e_adv = embed_diag(adv_set), e_test = embed_diag(d.test_in);
  AdversarialSummary sum;
  sum.embed_ladder = agreement_ladder(e_val.agreement, e_adv.agreement, em.codebook.num_spaces());
  sum.ensemble_ladder = agreement_ladder(ensemble_agreement(d.val), ensemble_agreement(adv_set), members.size());
  sum.embed = matched_frr_detection(sum.embed_ladder, cfg.adv_target_frr);
  sum.ensemble = matched_frr_detection(sum.ensemble_ladder, cfg.adv_target_frr);

  {
    auto os = ws.create("adv/ladder.csv");
    os << "detector,setting,detection_rate,false_rejection_rate\n";
    auto dump = [&](const char* det, const std::vector<LadderSetting>& l) {
      for (const auto& s : l) {
        const auto r = detection_rates(s.adversarial_flags, s.clean_flags);
        os << det << ',' << s.name << ',' << detail::percent(r.detection_rate) << ','
           << detail::percent(r.false_rejection_rate) << '\n';
      }
    };
    dump(cfg.adv_embed_model.c_str(), sum.embed_ladder);
    dump("ensemble", sum.ensemble_ladder);
  }
  {
    auto os = ws.create("adv/matched.csv");
    os << "detector,setting,detection_rate,false_rejection_rate,target_frr,target_met\n";
    auto line = [&](const std::string& det, const MatchedDetection& m, const std::vector<LadderSetting>& l) {
      os << det << ',' << l[m.setting].name << ',' << detail::percent(m.detection_rate) << ','
         << detail::percent(m.false_rejection_rate) << ',' << detail::percent(cfg.adv_target_frr) << ','
         << (m.target_met ? 1 : 0) << '\n';
    };
    line(cfg.adv_embed_model, sum.embed, sum.embed_ladder);
    line("ensemble", sum.ensemble, sum.ensemble_ladder);
  }
  {
    auto os = ws.create("adv/spread_histogram.csv");
    os << "spread_value,count_clean,count_adversarial\n";
    for (const auto& b : spread_histogram(e_test.spread, e_adv.spread))
      os << b.spread << ',' << b.count_clean << ',' << b.count_adversarial << '\n';
  }
  {
    // The norm score as an alternative adversarial detector: clean test is
    // the positive class.
    const ScoreSet s{score_embed(em, d.test_in).score, score_embed(em, adv_set).score};
    const auto r = evaluate_detection(s);
    auto os = ws.create("adv/norm_detection.csv");
    os << "model,fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out\n"
       << cfg.adv_embed_model << ',' << detail::percent(r.fpr_at_95_tpr) << ',' << detail::percent(r.detection_error)
       << ',' << detail::percent(r.auroc) << ',' << detail::percent(r.aupr_in) << ',' << detail::percent(r.aupr_out)
       << '\n';
  }
  return sum;
}

// ------------------------------------------------------------ eval-semantic

inline Taxonomy load_experiment_taxonomy(const ExperimentConfig& cfg, const Workspace& ws) {
  Taxonomy tax;
  if (cfg.taxonomy_file.empty()) {
    auto is = ws.open("data/taxonomy.txt", "gen-data");
    tax = load_taxonomy(is);
  } else {
    std::ifstream is(cfg.taxonomy_file);
    if (!is) throw std::runtime_error("cannot open taxonomy '" + cfg.taxonomy_file + "'");
    tax = load_taxonomy(is);
  }
  if (!cfg.label_map_file.empty()) {
    std::ifstream is(cfg.label_map_file);
    if (!is) throw std::runtime_error("cannot open label map '" + cfg.label_map_file + "'");
    tax.set_label_map(parse_label_map(is));
  }
  return tax;
}

inline void stage_eval_semantic(const ExperimentConfig& cfg, Workspace& ws) {
  const auto d = load_data(ws);
  const auto tax = load_experiment_taxonomy(cfg, ws);
  auto os = ws.create("semantic/table.csv");
  os << "model,accuracy,misclassified,avg_wup,avg_lch,avg_path\n";
  auto line = [&](const std::string& name, const std::vector<std::size_t>& pred) {
    std::vector<std::pair<std::string, std::string>> wrong;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] != d.test_in.labels[i]) wrong.emplace_back(d.labels[d.test_in.labels[i]], d.labels[pred[i]]);
    const double acc = 1.0 - static_cast<double>(wrong.size()) / static_cast<double>(pred.size());
    os << name << ',' << detail::percent(acc) << ',' << wrong.size();
    if (wrong.empty()) {
      os << ",nan,nan,nan\n";
    } else {
      const auto s = avg_semantic_scores(tax, wrong);
      os << ',' << detail::fixed(s.wup, 4) << ',' << detail::fixed(s.lch, 4) << ',' << detail::fixed(s.path, 4) << '\n';
    }
  };
  if (cfg.needs_baseline()) line("baseline", score_softmax(load_model(ws, "baseline"), d.test_in).predicted);
  if (cfg.wants("ensemble")) line("ensemble", score_ensemble(load_ensemble(cfg, ws), d.test_in).predicted);
  const auto embeds = cfg.embed_models();
  if (!embeds.empty()) {
    const auto full = load_codebook(cfg, ws, d.labels);
    for (const auto& name : embeds) line(name, score_embed(load_embed_model(ws, name, full), d.test_in).predicted);
  }
}

// ------------------------------------------------------------------ report

struct RunManifest {
  std::uint64_t config_hash = 0;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> artifacts;
  double wall_clock_seconds = 0.0;
  std::string version = kVersion;
};

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::map<std::string, std::uint64_t> experiment_seeds(const ExperimentConfig& cfg) {
  std::map<std::string, std::uint64_t> s{{"seed", cfg.seed},
                                         {"dataset.seed", cfg.data.seed},
                                         {"codebook.subset_seed", cfg.subset_seed},
                                         {"train.seed", cfg.train.seed}};
  if (cfg.codebook_source == "synthetic") s["codebook.seed"] = cfg.codebook_seed;
  if (cfg.adv_enabled) s["adv.surrogate_seed"] = cfg.surrogate_seed;
  for (std::size_t i = 0; i < cfg.ensemble_seeds.size(); ++i) s["ensemble." + std::to_string(i)] = cfg.ensemble_seeds[i];
  return s;
}

inline void write_manifest(Workspace& ws, const RunManifest& m) {
  auto os = ws.create("manifest.txt");
  os << "config_hash = " << hex(m.config_hash) << '\n';
  os << "version = " << m.version << '\n';
  os << "wall_clock_seconds = " << detail::fixed(m.wall_clock_seconds, 3) << '\n';
  for (const auto& [k, v] : m.seeds) os << "seeds." << k << " = " << v << '\n';
  for (std::size_t i = 0; i < m.artifacts.size(); ++i) os << "artifact." << i << " = " << m.artifacts[i] << '\n';
}

/// Records the resolved config in a fresh output directory, or checks that
/// an existing one was produced by the same config.
inline void bind_config(const ExperimentConfig& cfg, Workspace& ws) {
  const auto p = ws.path("config.resolved.txt");
  if (std::filesystem::exists(p)) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    if (ss.str() != cfg.resolved.canonical())
      throw std::runtime_error("'" + ws.root().string() + "' holds outputs of a different config (hash " +
                               hex(fnv1a(ss.str())) + ", expected " + hex(cfg.hash()) + ")");
    return;
  }
  auto os = ws.create("config.resolved.txt");
  os << cfg.resolved.canonical();
}

/// Every stage in order, then the resolved config and manifest.
inline RunManifest run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  Workspace ws(out_dir);
  {
    auto os = ws.create("config.resolved.txt");
    os << cfg.resolved.canonical();
  }
  stage_gen_data(cfg, ws);
  stage_gen_embeddings(cfg, ws);
  stage_train(cfg, ws);
  stage_eval_ood(cfg, ws);
  if (cfg.adv_enabled) stage_eval_adv(cfg, ws);
  stage_eval_semantic(cfg, ws);
  RunManifest m;
  m.config_hash = cfg.hash();
  m.seeds = experiment_seeds(cfg);
  m.artifacts = ws.written();
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(ws, m);
  return m;
}

}  // namespace membed
