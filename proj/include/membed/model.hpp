#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "dataset.hpp"
#include "decoder.hpp"
#include "embedding_store.hpp"
#include "optimizer.hpp"
#include "random.hpp"

namespace membed {

enum class Variant { multi_embed, softmax };

struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> trunk;
  std::size_t head_hidden = 32;
  /// One entry per embedding head (multi_embed) or {num_classes} (softmax).
  std::vector<std::size_t> head_dims;
  Variant variant = Variant::multi_embed;

  static ModelConfig multi_embed(std::size_t input_dim, std::vector<std::size_t> trunk, std::size_t head_hidden,
                                 std::vector<std::size_t> head_dims) {
    return {input_dim, std::move(trunk), head_hidden, std::move(head_dims), Variant::multi_embed};
  }

  static ModelConfig softmax(std::size_t input_dim, std::vector<std::size_t> trunk, std::size_t head_hidden,
                             std::size_t num_classes) {
    return {input_dim, std::move(trunk), head_hidden, {num_classes}, Variant::softmax};
  }

  std::size_t heads() const { return head_dims.size(); }

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("model config: input_dim must be >= 1");
    if (head_hidden == 0) throw std::invalid_argument("model config: head_hidden must be >= 1");
    for (auto w : trunk)
      if (w == 0) throw std::invalid_argument("model config: trunk widths must be >= 1");
    if (head_dims.empty()) throw std::invalid_argument("model config: need at least one head");
    for (auto d : head_dims)
      if (d == 0) throw std::invalid_argument("model config: head dims must be >= 1");
    if (variant == Variant::softmax && (head_dims.size() != 1 || head_dims[0] < 2))
      throw std::invalid_argument("model config: softmax variant needs one head with >= 2 classes");
  }

  std::string to_string() const {
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s.empty() ? std::string("-") : s;
    };
    return "input_dim=" + std::to_string(input_dim) + ";trunk=" + list(trunk) +
           ";head_hidden=" + std::to_string(head_hidden) + ";head_dims=" + list(head_dims) +
           ";variant=" + (variant == Variant::softmax ? "softmax" : "multi_embed");
  }

  static ModelConfig from_string(const std::string& s) {
    ModelConfig c;
    auto list = [](const std::string& v) {
      std::vector<std::size_t> out;
      if (v == "-") return out;
      std::istringstream is(v);
      std::string tok;
      while (std::getline(is, tok, ',')) out.push_back(std::stoull(tok));
      return out;
    };
    std::istringstream is(s);
    std::string kv;
    while (std::getline(is, kv, ';')) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("model config string: bad field '" + kv + "'");
      const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      if (k == "input_dim") c.input_dim = std::stoull(v);
      else if (k == "trunk") c.trunk = list(v);
      else if (k == "head_hidden") c.head_hidden = std::stoull(v);
      else if (k == "head_dims") c.head_dims = list(v);
      else if (k == "variant") {
        if (v == "softmax") c.variant = Variant::softmax;
        else if (v == "multi_embed") c.variant = Variant::multi_embed;
        else throw std::invalid_argument("model config string: unknown variant '" + v + "'");
      } else {
        throw std::invalid_argument("model config string: unknown key '" + k + "'");
      }
    }
    c.validate();
    return c;
  }
};

/// Shared MLP trunk followed by one exclusive FC-ReLU-FC-FC head per output.
/// The trunk applies ReLU after every hidden layer.
class MultiHeadModel {
 public:
  static constexpr const char* kInitScheme = "uniform_fan_in";

  MultiHeadModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    Rng rng(seed);
    std::size_t in = config_.input_dim;
    for (std::size_t i = 0; i < config_.trunk.size(); ++i) {
      add_linear("trunk." + std::to_string(i), in, config_.trunk[i], rng);
      in = config_.trunk[i];
    }
    trunk_out_ = in;
    for (std::size_t k = 0; k < config_.heads(); ++k) {
      const std::string p = "head." + std::to_string(k);
      add_linear(p + ".fc1", trunk_out_, config_.head_hidden, rng);
      add_linear(p + ".fc2", config_.head_hidden, config_.head_hidden, rng);
      add_linear(p + ".fc3", config_.head_hidden, config_.head_dims[k], rng);
    }
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t epochs_trained() const { return epochs_; }
  void set_epochs_trained(std::size_t e) { epochs_ = e; }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  bool operator==(const MultiHeadModel& o) const { return config_.to_string() == o.config_.to_string() && params_ == o.params_; }

  /// Parameters as tape leaves, in params() order.
  std::vector<Var> bind(Tape& tape, bool trainable) const {
    std::vector<Var> v;
    v.reserve(params_.size());
    for (const auto& p : params_) {
      Tensor t = p;
      t.requires_grad = trainable;
      v.push_back(tape.leaf(std::move(t)));
    }
    return v;
  }

  /// Head outputs for input `x` (rank 1: one example; rank 2: a batch).
  std::vector<Var> forward(Var x, std::span<const Var> p) const {
    if (x.value().cols() != config_.input_dim)
      throw ShapeError("forward: input length " + std::to_string(x.value().cols()) + ", expected " +
                       std::to_string(config_.input_dim));
    std::size_t i = 0;
    Var h = x;
    for (std::size_t l = 0; l < config_.trunk.size(); ++l, i += 2) h = ad::relu(linear(h, p[i], p[i + 1]));
    std::vector<Var> outs;
    for (std::size_t k = 0; k < config_.heads(); ++k, i += 6) {
      Var a = ad::relu(linear(h, p[i], p[i + 1]));
      Var b = linear(a, p[i + 2], p[i + 3]);
      outs.push_back(linear(b, p[i + 4], p[i + 5]));
    }
    return outs;
  }

  /// Batch inference: one (n x D_k) tensor per head.
  std::vector<Tensor> infer(const Tensor& x) const {
    Tape tape;
    auto p = bind(tape, false);
    auto outs = forward(tape.constant(x), p);
    std::vector<Tensor> r;
    for (auto o : outs) r.push_back(o.value());
    return r;
  }

  HeadOutputs outputs(std::span<const double> x) const {
    auto t = infer(Tensor::vector(std::vector<double>(x.begin(), x.end())));
    HeadOutputs r;
    for (auto& o : t) r.push_back(std::move(o.values));
    return r;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["config"] = config_.to_string();
    ck.meta["seed"] = std::to_string(seed_);
    ck.meta["epoch"] = std::to_string(epochs_);
    ck.meta["init"] = kInitScheme;
    for (std::size_t i = 0; i < params_.size(); ++i) ck.tensors.push_back({names_[i], params_[i]});
    return ck;
  }

  static MultiHeadModel from_checkpoint(const Checkpoint& ck) {
    MultiHeadModel m(ModelConfig::from_string(ck.meta_at("config")), std::stoull(ck.meta_at("seed")));
    for (std::size_t i = 0; i < m.params_.size(); ++i) {
      const Tensor& t = ck.get(m.names_[i]);
      if (t.shape != m.params_[i].shape) throw std::runtime_error("checkpoint: shape mismatch for " + m.names_[i]);
      m.params_[i] = t;
    }
    m.epochs_ = std::stoull(ck.meta_at("epoch"));
    return m;
  }

 private:
  static Var linear(Var x, Var w, Var b) { return ad::add(ad::matmul(x, w), b); }

  void add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor w({in, out}, 0.0), b(Shape{out}, 0.0);
    for (double& v : w.values) v = rng.uniform(-bound, bound);
    for (double& v : b.values) v = rng.uniform(-bound, bound);
    names_.push_back(name + ".weight");
    params_.push_back(std::move(w));
    names_.push_back(name + ".bias");
    params_.push_back(std::move(b));
  }

  ModelConfig config_;
  std::uint64_t seed_;
  std::size_t epochs_ = 0;
  std::size_t trunk_out_ = 0;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

/// Sum over heads of the cosine distance between head output and the
/// label's target in that head's space.
inline double multi_embedding_loss(std::span<const std::vector<double>> outputs, const LabelCodebook& cb,
                                   std::size_t y) {
  if (outputs.size() != cb.num_spaces()) throw std::invalid_argument("multi_embedding_loss: head count mismatch");
  if (y >= cb.num_labels()) throw std::out_of_range("multi_embedding_loss: label index out of range");
  double s = 0.0;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    double n2 = 0.0;
    for (double v : outputs[k]) n2 += v * v;
    if (n2 == 0.0) throw std::domain_error("multi_embedding_loss: head " + std::to_string(k) + " output has zero norm");
    s += cosine_distance(cb.target(k, y), outputs[k]);
  }
  return s;
}

/// Batch-mean of the per-example summed cosine distance, on the tape.
inline Var embedding_loss(std::span<const Var> outs, const LabelCodebook& cb, std::span<const std::size_t> labels) {
  if (outs.size() != cb.num_spaces()) throw std::invalid_argument("embedding_loss: head count mismatch");
  Tape& tape = *outs[0].tape;
  std::optional<Var> total;
  for (std::size_t k = 0; k < outs.size(); ++k) {
    const Tensor& o = outs[k].value();
    Tensor tgt(o.shape, 0.0);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] >= cb.num_labels()) throw std::out_of_range("embedding_loss: label index out of range");
      auto row = cb.target(k, labels[r]);
      std::copy(row.begin(), row.end(), tgt.values.begin() + static_cast<std::ptrdiff_t>(r * o.cols()));
    }
    Var d;
    try {
      d = ad::cosine_distance(outs[k], tape.constant(std::move(tgt)));
    } catch (const std::domain_error& e) {
      throw std::domain_error("embedding_loss: head " + std::to_string(k) + ": " + e.what());
    }
    total = total ? ad::add(*total, d) : d;
  }
  return ad::scale(ad::sum(*total), 1.0 / static_cast<double>(labels.size()));
}

inline Var softmax_loss(Var logits, std::span<const std::size_t> labels) {
  return ad::scale(ad::sum(ad::cross_entropy(logits, labels)), 1.0 / static_cast<double>(labels.size()));
}

struct TrainParams {
  std::size_t epochs = 20;
  std::size_t batch = 64;
  OptimizerRule rule = SgdMomentum{0.05, 0.9, 5e-4};
  /// Learning rate is multiplied by `gamma` at the start of each listed epoch.
  std::vector<std::size_t> milestones;
  double gamma = 0.2;
  std::uint64_t seed = 1;
};

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
  /// Mean of the summed squared head norms, split by decoding correctness.
  /// NaN when the group is empty or for the softmax variant.
  double mean_score_correct = std::numeric_limits<double>::quiet_NaN();
  double mean_score_wrong = std::numeric_limits<double>::quiet_NaN();
};

using TrainLog = std::vector<EpochStats>;

struct TrainResult {
  MultiHeadModel model;
  TrainLog log;
};

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Minibatch training. The embedding variant requires `codebook`; the
/// softmax variant ignores it. Deterministic for a given model seed and
/// params.seed.
inline TrainResult train(MultiHeadModel model, const Dataset& data, const LabelCodebook* codebook,
                         const TrainParams& hp) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (hp.batch == 0) throw std::invalid_argument("train: batch size must be >= 1");
  const bool embed = model.config().variant == Variant::multi_embed;
  if (embed) {
    if (!codebook) throw std::invalid_argument("train: embedding model needs a codebook");
    if (codebook->dims() != model.config().head_dims)
      throw std::invalid_argument("train: codebook dims do not match model head dims");
  }
  const std::size_t num_labels = embed ? codebook->num_labels() : model.config().head_dims[0];
  for (auto y : data.labels)
    if (y >= num_labels) throw std::invalid_argument("train: dataset label " + std::to_string(y) + " not in label set");

  Optimizer opt(hp.rule);
  const double base_lr = learning_rate(hp.rule);
  Rng rng(hp.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainLog log;

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    double lr = base_lr;
    for (auto m : hp.milestones)
      if (epoch >= m) lr *= hp.gamma;
    opt.set_learning_rate(lr);
    rng.shuffle(std::span(order));

    double loss_sum = 0.0, score_ok = 0.0, score_bad = 0.0;
    std::size_t correct = 0, wrong = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch) {
      const std::size_t end = std::min(order.size(), start + hp.batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);

      Tape tape;
      auto p = model.bind(tape, true);
      auto outs = model.forward(tape.constant(data.batch(idx)), p);
      Var loss = embed ? embedding_loss(outs, *codebook, labels) : softmax_loss(outs[0], labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) throw std::domain_error("train: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += lv * static_cast<double>(idx.size());

      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (embed) {
          HeadOutputs o;
          for (auto v : outs) {
            auto row = v.value().row_view(r);
            o.emplace_back(row.begin(), row.end());
          }
          const auto pred = soft_decode(o, *codebook);
          if (pred.label == labels[r]) {
            ++correct;
            score_ok += pred.ood_score;
          } else {
            ++wrong;
            score_bad += pred.ood_score;
          }
        } else {
          (argmax(outs[0].value().row_view(r)) == labels[r] ? correct : wrong)++;
        }
      }

      auto g = tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(p.size());
      for (auto v : p) grads.push_back(g.of(v));
      std::vector<Tensor*> pp;
      std::vector<const Tensor*> gp;
      for (std::size_t i = 0; i < p.size(); ++i) {
        pp.push_back(&model.params()[i]);
        gp.push_back(&grads[i]);
      }
      opt.step(pp, gp);
    }
    EpochStats s;
    s.mean_loss = loss_sum / static_cast<double>(data.size());
    s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (embed && correct) s.mean_score_correct = score_ok / static_cast<double>(correct);
    if (embed && wrong) s.mean_score_wrong = score_bad / static_cast<double>(wrong);
    log.push_back(s);
    model.set_epochs_trained(model.epochs_trained() + 1);
  }
  return {std::move(model), std::move(log)};
}

/// Independently initialized and shuffled softmax models, one per seed.
inline std::vector<TrainResult> train_ensemble(const ModelConfig& config, std::span<const std::uint64_t> seeds,
                                               const Dataset& data, TrainParams hp) {
  if (config.variant != Variant::softmax) throw std::invalid_argument("train_ensemble: members must be softmax models");
  if (seeds.empty()) throw std::invalid_argument("train_ensemble: no seeds");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw std::invalid_argument("train_ensemble: duplicate seeds");
  std::vector<TrainResult> members;
  for (auto s : seeds) {
    hp.seed = s;
    members.push_back(train(MultiHeadModel(config, s), data, nullptr, hp));
  }
  return members;
}

/// Class probabilities averaged over members.
inline std::vector<double> ensemble_probabilities(std::span<const MultiHeadModel> members, std::span<const double> x) {
  std::vector<double> mean;
  for (const auto& m : members) {
    auto logits = m.outputs(x)[0];
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& v : logits) z += (v = std::exp(v - mx));
    if (mean.empty()) mean.assign(logits.size(), 0.0);
    for (std::size_t i = 0; i < logits.size(); ++i) mean[i] += logits[i] / z / static_cast<double>(members.size());
  }
  return mean;
}

}  // namespace membed
