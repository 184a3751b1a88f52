#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace niwt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major float64 array with value semantics. This is the detached
// form of a tensor: freely copyable and shareable, never part of a graph.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() : shape{}, data(1, 0.0) {}
  explicit Array(Shape s);
  Array(Shape s, std::vector<double> values);
  Array(Shape s, double fill);

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
  static Array vector(std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double item() const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  bool all_finite() const;

  friend bool operator==(const Array&, const Array&) = default;
};

// Throws kNonFinite naming `where` if any element is NaN or infinite.
void check_finite(std::span<const double> values, const char* where);

}  // namespace niwt
