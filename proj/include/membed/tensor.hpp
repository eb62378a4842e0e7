#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace membed {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major array of 64-bit reals. Rank 1 or 2 in practice; a rank-1
/// tensor is treated as a single row by the row-wise primitives.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0, bool grad = false)
      : shape(std::move(s)), values(shape_size(shape), fill), requires_grad(grad) {
    validate();
  }

  Tensor(Shape s, std::vector<double> v, bool grad = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(grad) {
    validate();
  }

  static Tensor vector(std::vector<double> v, bool grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), grad);
  }

  static Tensor row(std::span<const double> v, bool grad = false) {
    return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end()), grad);
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }

  /// Rows/cols under the "rank-1 is one row" convention.
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  std::span<const double> row_view(std::size_t r) const {
    return {values.data() + r * cols(), cols()};
  }

  bool operator==(const Tensor& o) const { return shape == o.shape && values == o.values; }

 private:
  void validate() const {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (auto d : shape)
      if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_string(shape));
    if (values.size() != shape_size(shape))
      throw std::invalid_argument("tensor value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_string(shape));
  }
};

}  // namespace membed
