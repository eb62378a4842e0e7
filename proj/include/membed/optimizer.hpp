#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "tensor.hpp"

namespace membed {

struct SgdMomentum {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

using OptimizerRule = std::variant<SgdMomentum, Adam>;

inline double learning_rate(const OptimizerRule& rule) {
  return std::visit([](const auto& r) { return r.lr; }, rule);
}

/// Stateful first-order optimizer. Keeps momentum / moment buffers per
/// parameter slot; the parameter list must keep the same order and shapes
/// across calls to step().
class Optimizer {
 public:
  explicit Optimizer(OptimizerRule rule) : rule_(rule) {
    if (learning_rate(rule_) < 0.0) throw std::invalid_argument("optimizer: learning rate must be >= 0");
  }

  const OptimizerRule& rule() const { return rule_; }

  void set_learning_rate(double lr) {
    if (lr < 0.0) throw std::invalid_argument("optimizer: learning rate must be >= 0");
    std::visit([lr](auto& r) { r.lr = lr; }, rule_);
  }

  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("optimizer: params/grads count mismatch");
    if (first_.empty()) {
      for (auto* p : params) {
        first_.emplace_back(p->size(), 0.0);
        second_.emplace_back(p->size(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw std::invalid_argument("optimizer: parameter list changed");
    ++steps_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->shape != grads[i]->shape)
        throw std::invalid_argument("optimizer: shape mismatch for parameter " + std::to_string(i));
      std::visit([&](const auto& r) { apply(r, *params[i], *grads[i], i); }, rule_);
    }
  }

 private:
  void apply(const SgdMomentum& r, Tensor& p, const Tensor& g, std::size_t slot) {
    auto& buf = first_[slot];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double d = g[j] + r.weight_decay * p[j];
      buf[j] = r.momentum * buf[j] + d;
      p[j] -= r.lr * buf[j];
    }
  }

  void apply(const Adam& r, Tensor& p, const Tensor& g, std::size_t slot) {
    auto& m = first_[slot];
    auto& v = second_[slot];
    const double c1 = 1.0 - std::pow(r.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(r.beta2, static_cast<double>(steps_));
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double d = g[j] + r.weight_decay * p[j];
      m[j] = r.beta1 * m[j] + (1.0 - r.beta1) * d;
      v[j] = r.beta2 * v[j] + (1.0 - r.beta2) * d * d;
      p[j] -= r.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + r.eps);
    }
  }

  OptimizerRule rule_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long long steps_ = 0;
};

}  // namespace membed
