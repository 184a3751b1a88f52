#include "niwt/array.hpp"

#include <cmath>
#include <sstream>

#include "niwt/error.hpp"

namespace niwt {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Array::Array(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}

Array::Array(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  require(data.size() == numel(shape), ErrorCode::kShapeMismatch,
          "array data length " + std::to_string(data.size()) +
              " does not match shape " + to_string(shape));
}

Array::Array(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Array Array::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Array(std::move(s), std::move(values));
}

double Array::item() const {
  require(data.size() == 1, ErrorCode::kShapeMismatch,
          "item() on array of shape " + to_string(shape));
  return data[0];
}

bool Array::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      fail(ErrorCode::kNonFinite, std::string("non-finite value in ") + where);
    }
  }
}

}  // namespace niwt
