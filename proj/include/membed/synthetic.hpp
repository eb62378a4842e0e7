#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "embedding_store.hpp"
#include "random.hpp"

namespace membed {

/// Gaussian-mixture stand-in for an image/audio feature extractor. Consecutive
/// mixture components are grouped under superclasses (shared center plus a
/// per-class offset), which also defines the emitted taxonomy.
struct SyntheticSpec {
  std::vector<std::size_t> in_components;   // in-distribution classes
  std::vector<std::size_t> out_components;  // held-out (OOD) classes
  std::size_t dim = 16;
  std::size_t samples_per_class = 500;
  std::size_t classes_per_group = 2;  // consecutive components share a superclass
  double separation = 3.0;  // scale of class means; 0 => all classes coincide
  double within = 0.6;      // class offset relative to its superclass center
  double noise = 1.0;
  double range = 10.0;      // features clipped to [-range, range]
  double test_fraction = 0.25;
  double val_fraction = 0.2;  // of what remains after the test split
  double ood_val_fraction = 0.2;
  std::uint64_t seed = 1;

  static SyntheticSpec with_counts(std::size_t in, std::size_t out) {
    SyntheticSpec s;
    for (std::size_t i = 0; i < in; ++i) s.in_components.push_back(i);
    for (std::size_t i = 0; i < out; ++i) s.out_components.push_back(in + i);
    return s;
  }

  std::size_t groups() const { return (components() + classes_per_group - 1) / classes_per_group; }

  std::size_t components() const {
    std::size_t m = 0;
    for (auto c : in_components) m = std::max(m, c + 1);
    for (auto c : out_components) m = std::max(m, c + 1);
    return m;
  }

  void validate() const {
    if (in_components.size() < 2) throw std::invalid_argument("synthetic data: need at least 2 in-distribution classes");
    if (out_components.empty()) throw std::invalid_argument("synthetic data: need at least 1 OOD class");
    std::set<std::size_t> in(in_components.begin(), in_components.end());
    if (in.size() != in_components.size()) throw std::invalid_argument("synthetic data: duplicate in-distribution class");
    std::set<std::size_t> out(out_components.begin(), out_components.end());
    if (out.size() != out_components.size()) throw std::invalid_argument("synthetic data: duplicate OOD class");
    for (auto c : out)
      if (in.count(c)) throw std::invalid_argument("synthetic data: class " + std::to_string(c) + " is both in- and out-of-distribution");
    if (dim == 0 || samples_per_class < 4 || classes_per_group == 0) throw std::invalid_argument("synthetic data: bad sizes");
    if (separation < 0.0 || noise < 0.0 || range <= 0.0) throw std::invalid_argument("synthetic data: bad scales");
  }
};

inline std::string component_name(std::size_t c) { return "class" + std::to_string(c); }

struct SyntheticData {
  Dataset train, val, test_in, ood_val, test_out;
  /// Names of the in-distribution labels; dataset labels index this list.
  std::vector<std::string> labels;
  /// Names of the OOD classes; OOD dataset labels index this list.
  std::vector<std::string> ood_labels;
  std::string taxonomy;
};

inline SyntheticData gen_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  const std::size_t m = spec.components();

  Rng mean_rng = root.fork(1);
  std::vector<std::vector<double>> super(spec.groups(), std::vector<double>(spec.dim));
  for (auto& s : super)
    for (double& v : s) v = mean_rng.normal();
  std::vector<std::vector<double>> means(m, std::vector<double>(spec.dim));
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t j = 0; j < spec.dim; ++j)
      means[c][j] = spec.separation * (super[c / spec.classes_per_group][j] + spec.within * mean_rng.normal());

  SyntheticData out;
  for (Dataset* d : {&out.train, &out.val, &out.test_in, &out.ood_val, &out.test_out}) {
    d->dim = spec.dim;
    d->lo = -spec.range;
    d->hi = spec.range;
  }
  auto sample = [&](std::size_t c, Rng& rng) {
    std::vector<double> x(spec.dim);
    for (std::size_t j = 0; j < spec.dim; ++j)
      x[j] = std::clamp(means[c][j] + spec.noise * rng.normal(), -spec.range, spec.range);
    return x;
  };
  const auto n = spec.samples_per_class;
  for (std::size_t i = 0; i < spec.in_components.size(); ++i) {
    const auto c = spec.in_components[i];
    Rng rng = root.fork(100 + c);
    const auto n_test = static_cast<std::size_t>(std::round(spec.test_fraction * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::round(spec.val_fraction * static_cast<double>(n - n_test)));
    for (std::size_t s = 0; s < n; ++s) {
      Dataset& d = s < n_test ? out.test_in : (s < n_test + n_val ? out.val : out.train);
      d.push(sample(c, rng), i);
    }
    out.labels.push_back(component_name(c));
  }
  for (std::size_t i = 0; i < spec.out_components.size(); ++i) {
    const auto c = spec.out_components[i];
    Rng rng = root.fork(100 + c);
    const auto n_val = static_cast<std::size_t>(std::round(spec.ood_val_fraction * static_cast<double>(n)));
    for (std::size_t s = 0; s < n; ++s) (s < n_val ? out.ood_val : out.test_out).push(sample(c, rng), i);
    out.ood_labels.push_back(component_name(c));
  }

  out.taxonomy = "!root entity\n";
  for (std::size_t s = 0; s < spec.groups(); ++s) out.taxonomy += "group" + std::to_string(s) + " entity\n";
  for (std::size_t c = 0; c < m; ++c)
    out.taxonomy += component_name(c) + " group" + std::to_string(c / spec.classes_per_group) + "\n";
  return out;
}

namespace detail {

inline void normalize(std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
}

/// rows x cols matrix whose columns (rows >= cols) or rows (rows < cols) are
/// orthonormal, from Gram-Schmidt on a Gaussian draw.
inline std::vector<std::vector<double>> random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
  const bool by_cols = rows >= cols;
  const std::size_t count = by_cols ? cols : rows, len = by_cols ? rows : cols;
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(len);
    for (double& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double d = 0.0;
      for (std::size_t i = 0; i < len; ++i) d += v[i] * b[i];
      for (std::size_t i = 0; i < len; ++i) v[i] -= d * b[i];
    }
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    if (n2 < 1e-10) continue;
    normalize(v);
    basis.push_back(std::move(v));
  }
  std::vector<std::vector<double>> m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = by_cols ? basis[c][r] : basis[r][c];
  return m;
}

}  // namespace detail

/// K label-embedding spaces. Space 0 holds random unit vectors; space k is
/// normalize((1 - diversity) * R_k e + diversity * g) with R_k a random
/// isometry and g a fresh random unit vector. diversity 0 preserves the
/// pairwise cosine structure of space 0; diversity 1 gives independent spaces.
inline std::vector<EmbeddingSpace> gen_synthetic_codebooks(const std::vector<std::string>& labels,
                                                           const std::vector<std::size_t>& dims, std::uint64_t seed,
                                                           double diversity) {
  if (!(diversity >= 0.0 && diversity <= 1.0)) throw std::invalid_argument("synthetic codebooks: diversity must be in [0, 1]");
  if (dims.empty()) throw std::invalid_argument("synthetic codebooks: need at least one space");
  for (auto d : dims)
    if (d < 2) throw std::invalid_argument("synthetic codebooks: dims must be >= 2");
  Rng rng(seed);
  std::vector<std::vector<double>> base;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<double> v(dims[0]);
    for (double& x : v) x = rng.normal();
    detail::normalize(v);
    base.push_back(std::move(v));
  }
  std::vector<EmbeddingSpace> spaces;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    EmbeddingSpace sp("space" + std::to_string(k), dims[k]);
    if (k == 0) {
      for (std::size_t i = 0; i < labels.size(); ++i) sp.add(labels[i], base[i]);
    } else {
      Rng krng = rng.fork(k);
      const auto rot = detail::random_orthonormal(dims[k], dims[0], krng);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        std::vector<double> rotated(dims[k], 0.0), noise(dims[k]);
        for (std::size_t r = 0; r < dims[k]; ++r)
          for (std::size_t c = 0; c < dims[0]; ++c) rotated[r] += rot[r][c] * base[i][c];
        detail::normalize(rotated);
        for (double& x : noise) x = krng.normal();
        detail::normalize(noise);
        std::vector<double> v(dims[k]);
        for (std::size_t r = 0; r < dims[k]; ++r) v[r] = (1.0 - diversity) * rotated[r] + diversity * noise[r];
        detail::normalize(v);
        sp.add(labels[i], std::move(v));
      }
    }
    spaces.push_back(std::move(sp));
  }
  return spaces;
}

}  // namespace membed
