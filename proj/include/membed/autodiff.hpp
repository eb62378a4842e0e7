#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace membed {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Gradient of one scalar with respect to every grad-carrying node of a tape.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> g, std::vector<bool> tracked)
      : grads_(std::move(g)), tracked_(std::move(tracked)) {}

  const Tensor& of(Var v) const {
    if (v.id >= grads_.size() || !tracked_[v.id])
      throw std::logic_error("no gradient recorded for node " + std::to_string(v.id) +
                             " (requires_grad was false)");
    return grads_[v.id];
  }

 private:
  std::vector<Tensor> grads_;
  std::vector<bool> tracked_;
};

/// Append-only record of primitive applications. Node ids are assigned in
/// creation order, so the tape is always topologically sorted.
class Tape {
 public:
  using Vjp = std::function<void(const Tape&, const Tensor& grad_out, std::vector<Tensor>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor t) {
    const bool g = t.requires_grad;
    nodes_.push_back(Node{std::move(t), g, {}, nullptr});
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor t) {
    t.requires_grad = false;
    return leaf(std::move(t));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }

  Var record(Tensor value, std::vector<std::size_t> parents, Vjp vjp) {
    bool g = false;
    for (auto p : parents) g = g || nodes_.at(p).needs_grad;
    value.requires_grad = g;
    nodes_.push_back(Node{std::move(value), g, std::move(parents), g ? std::move(vjp) : nullptr});
    return {this, nodes_.size() - 1};
  }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  Gradients backward(Var loss) const {
    const Tensor& out = value(loss.id);
    if (out.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_string(out.shape));
    if (!std::isfinite(out[0])) throw std::domain_error("backward: loss is not finite");

    std::vector<Tensor> grads(nodes_.size());
    std::vector<bool> tracked(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].needs_grad) continue;
      tracked[i] = true;
      grads[i] = Tensor(nodes_[i].value.shape, 0.0);
    }

    if (!nodes_[loss.id].needs_grad) return Gradients(std::move(grads), std::move(tracked));
    grads[loss.id].values[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.needs_grad || !n.vjp) continue;
      n.vjp(*this, grads[i], grads);
    }
    return Gradients(std::move(grads), std::move(tracked));
  }

 private:
  struct Node {
    Tensor value;
    bool needs_grad;
    std::vector<std::size_t> parents;
    Vjp vjp;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

namespace detail {

inline void require_same_tape(const char* op, Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands live on different tapes");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " +
                     shape_string(b.shape));
}

inline void accumulate(const Tape& t, std::vector<Tensor>& grads, std::size_t id, const Tensor& g) {
  if (!t.needs_grad(id)) return;
  auto& dst = grads[id].values;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.values[i];
}

inline Shape rowwise_shape(const Tensor& t) { return Shape{t.rows()}; }

template <class F, class DF>
Var unary(const char* /*op*/, Var a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor out(x.shape, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const auto aid = a.id;
  const auto oid = a.tape->size();
  return a.tape->record(std::move(out), {aid},
                        [aid, oid, df](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          if (!t.needs_grad(aid)) return;
                          const Tensor& x = t.value(aid);
                          const Tensor& y = t.value(oid);
                          auto& dst = grads[aid].values;
                          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * df(x[i], y[i]);
                        });
}

}  // namespace detail

/// (m x k)(k x n). A rank-1 left operand is a single row and yields rank 1.
inline Var matmul(Var a, Var b) {
  detail::require_same_tape("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (B.rank() != 2 || A.rank() > 2 || A.cols() != B.shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_string(A.shape) + " x " + shape_string(B.shape));
  const std::size_t m = A.rows(), k = A.cols(), n = B.shape[1];
  Tensor out(A.rank() == 1 ? Shape{n} : Shape{m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.values.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A.values[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.values.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const auto aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {aid, bid},
                        [aid, bid, m, k, n](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          const Tensor& A = t.value(aid);
                          const Tensor& B = t.value(bid);
                          if (t.needs_grad(aid)) {
                            auto& dA = grads[aid].values;
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const double* brow = B.values.data() + p * n;
                                const double* grow = g.values.data() + i * n;
                                double s = 0.0;
                                for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                dA[i * k + p] += s;
                              }
                          }
                          if (t.needs_grad(bid)) {
                            auto& dB = grads[bid].values;
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const double av = A.values[i * k + p];
                                if (av == 0.0) continue;
                                const double* grow = g.values.data() + i * n;
                                double* drow = dB.data() + p * n;
                                for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                              }
                          }
                        });
}

/// Elementwise sum of equal shapes, or (m x n) + (n) bias broadcast.
inline Var add(Var a, Var b) {
  detail::require_same_tape("add", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool broadcast = A.rank() == 2 && B.rank() == 1 && A.cols() == B.size();
  if (!broadcast) detail::require_same_shape("add", A, B);
  Tensor out = A;
  out.requires_grad = false;
  const std::size_t n = B.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[broadcast ? i % n : i];
  const auto aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {aid, bid},
                        [aid, bid, broadcast, n](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          detail::accumulate(t, grads, aid, g);
                          if (!t.needs_grad(bid)) return;
                          auto& dB = grads[bid].values;
                          for (std::size_t i = 0; i < g.size(); ++i) dB[broadcast ? i % n : i] += g[i];
                        });
}

inline Var scale(Var a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

/// Subgradient at 0 is 0.
inline Var relu(Var a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sqrt(Var a) {
  for (double x : a.value().values)
    if (x < 0.0) throw std::domain_error("sqrt: negative input");
  return detail::unary("sqrt", a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}

inline Var log(Var a) {
  for (double x : a.value().values)
    if (x <= 0.0) throw std::domain_error("log: non-positive input");
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Sum of all elements, shape (1).
inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.values) s += v;
  const auto aid = a.id;
  return a.tape->record(Tensor::vector({s}), {aid},
                        [aid](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          if (!t.needs_grad(aid)) return;
                          for (double& d : grads[aid].values) d += g[0];
                        });
}

inline Var divide(Var a, Var b) {
  detail::require_same_tape("divide", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_same_shape("divide", A, B);
  Tensor out(A.shape, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (B[i] == 0.0) throw std::domain_error("divide: division by zero");
    out[i] = A[i] / B[i];
  }
  const auto aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {aid, bid},
                        [aid, bid](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          const Tensor& A = t.value(aid);
                          const Tensor& B = t.value(bid);
                          if (t.needs_grad(aid))
                            for (std::size_t i = 0; i < g.size(); ++i) grads[aid][i] += g[i] / B[i];
                          if (t.needs_grad(bid))
                            for (std::size_t i = 0; i < g.size(); ++i) grads[bid][i] -= g[i] * A[i] / (B[i] * B[i]);
                        });
}

/// Row-wise inner product; output has one entry per row.
inline Var dot(Var a, Var b) {
  detail::require_same_tape("dot", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_same_shape("dot", A, B);
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor out(detail::rowwise_shape(A), 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += A[r * cols + c] * B[r * cols + c];
  const auto aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {aid, bid},
                        [aid, bid, cols](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          const Tensor& A = t.value(aid);
                          const Tensor& B = t.value(bid);
                          for (std::size_t i = 0; i < A.size(); ++i) {
                            if (t.needs_grad(aid)) grads[aid][i] += g[i / cols] * B[i];
                            if (t.needs_grad(bid)) grads[bid][i] += g[i / cols] * A[i];
                          }
                        });
}

/// Row-wise softmax, shifted by the row maximum.
inline Var softmax(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out(x.shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values.data() + r * cols;
    double* o = out.values.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  const auto aid = a.id;
  const auto oid = a.tape->size();
  return a.tape->record(std::move(out), {aid},
                        [aid, oid, rows, cols](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                          if (!t.needs_grad(aid)) return;
                          const Tensor& y = t.value(oid);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double gy = 0.0;
                            for (std::size_t c = 0; c < cols; ++c) gy += g[r * cols + c] * y[r * cols + c];
                            for (std::size_t c = 0; c < cols; ++c)
                              grads[aid][r * cols + c] += y[r * cols + c] * (g[r * cols + c] - gy);
                          }
                        });
}

/// Per-row -log softmax(logits)[label]; one label per row.
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& x = logits.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  if (labels.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(x.shape));
  Tensor out(Shape{rows}, 0.0);
  std::vector<double> probs(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw std::out_of_range("cross_entropy: label index out of range");
    const double* in = x.values.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (probs[r * cols + c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= z;
    out[r] = -(in[labels[r]] - mx - std::log(z));
  }
  const auto lid = logits.id;
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape->record(
      std::move(out), {lid},
      [lid, cols, probs = std::move(probs), lab = std::move(lab)](const Tape& t, const Tensor& g,
                                                                   std::vector<Tensor>& grads) {
        if (!t.needs_grad(lid)) return;
        auto& d = grads[lid].values;
        for (std::size_t r = 0; r < lab.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[r] * probs[r * cols + c];
          d[r * cols + lab[r]] -= g[r];
        }
      });
}

/// Row-wise 0.5 * (1 - cos(u, v)). Zero-norm rows are rejected.
inline Var cosine_distance(Var u, Var v) {
  detail::require_same_tape("cosine_distance", u, v);
  const Tensor& U = u.value();
  const Tensor& V = v.value();
  detail::require_same_shape("cosine_distance", U, V);
  const std::size_t rows = U.rows(), cols = U.cols();
  Tensor out(detail::rowwise_shape(U), 0.0);
  // per row: u.v, |u|, |v|
  std::vector<double> cache(rows * 3);
  for (std::size_t r = 0; r < rows; ++r) {
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double a = U[r * cols + c], b = V[r * cols + c];
      uv += a * b;
      uu += a * a;
      vv += b * b;
    }
    if (uu == 0.0 || vv == 0.0)
      throw std::domain_error("cosine_distance: zero-norm vector in row " + std::to_string(r));
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    cache[3 * r] = uv;
    cache[3 * r + 1] = nu;
    cache[3 * r + 2] = nv;
    out[r] = 0.5 * (1.0 - uv / (nu * nv));
  }
  const auto uid = u.id, vid = v.id;
  return u.tape->record(
      std::move(out), {uid, vid},
      [uid, vid, cols, cache = std::move(cache)](const Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
        const Tensor& U = t.value(uid);
        const Tensor& V = t.value(vid);
        const bool gu = t.needs_grad(uid), gv = t.needs_grad(vid);
        for (std::size_t r = 0; r < g.size(); ++r) {
          const double uv = cache[3 * r], nu = cache[3 * r + 1], nv = cache[3 * r + 2];
          const double inv = 1.0 / (nu * nv);
          const double cosv = uv * inv;
          for (std::size_t c = 0; c < cols; ++c) {
            const double a = U[r * cols + c], b = V[r * cols + c];
            if (gu) grads[uid][r * cols + c] += -0.5 * g[r] * (b * inv - cosv * a / (nu * nu));
            if (gv) grads[vid][r * cols + c] += -0.5 * g[r] * (a * inv - cosv * b / (nv * nv));
          }
        }
      });
}

/// Gradient of a scalar built from `x` by `loss_of` with respect to `x`.
template <class LossFn>
Tensor grad_wrt_input(LossFn&& loss_of, const Tensor& x) {
  Tape tape;
  Tensor leaf = x;
  leaf.requires_grad = true;
  Var xv = tape.leaf(std::move(leaf));
  Var loss = loss_of(tape, xv);
  return tape.backward(loss).of(xv);
}

}  // namespace ad
}  // namespace membed
