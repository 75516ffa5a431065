#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "invenio/errors.hpp"

namespace invenio {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. All heavy lifting happens in the tape
// ops and in model code; this is just shaped storage plus a few helpers.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {
    validate_shape();
  }

  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    validate_shape();
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor: data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  size_t rank() const { return shape.size(); }
  int64_t dim(size_t i) const { return shape.at(i); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  double& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  double at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

  // NHWC addressing for image tensors
  double& at4(int64_t n, int64_t h, int64_t w, int64_t c) {
    return data[static_cast<size_t>(((n * shape[1] + h) * shape[2] + w) * shape[3] + c)];
  }
  double at4(int64_t n, int64_t h, int64_t w, int64_t c) const {
    return data[static_cast<size_t>(((n * shape[1] + h) * shape[2] + w) * shape[3] + c)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate_shape() const {
    for (int64_t d : shape)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
  }
};

}  // namespace invenio
