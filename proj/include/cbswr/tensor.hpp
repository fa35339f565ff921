#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace cbswr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major float64 array. Batch dimension first by convention.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  /// Elements per leading index.
  std::size_t stride0() const { return shape.empty() || shape[0] == 0 ? 0 : data.size() / shape[0]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * stride0(), stride0()}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * stride0(), stride0()}; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor&) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

/// Stack equally-sized rows into an (n, ...) tensor whose trailing shape is `row_shape`.
Tensor stack_rows(const std::vector<std::span<const double>>& rows, const Shape& row_shape);

}  // namespace cbswr
