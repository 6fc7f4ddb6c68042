#include "tokmat/tensor.hpp"

#include <algorithm>

namespace tokmat {

void Matrix::set_row(std::size_t r, std::span<const Scalar> v) {
  if (v.size() != cols_) {
    throw std::invalid_argument("Matrix::set_row: width " + std::to_string(v.size()) +
                                " != " + std::to_string(cols_));
  }
  std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

void Matrix::append_row(std::span<const Scalar> v) {
  if (rows_ == 0 && cols_ == 0) cols_ = v.size();
  if (v.size() != cols_) {
    throw std::invalid_argument("Matrix::append_row: width " + std::to_string(v.size()) +
                                " != " + std::to_string(cols_));
  }
  data_.insert(data_.end(), v.begin(), v.end());
  ++rows_;
}

Scalar dot(std::span<const Scalar> a, std::span<const Scalar> b) {
  Scalar s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Scalar norm(std::span<const Scalar> a) { return std::sqrt(dot(a, a)); }

Scalar squared_distance(std::span<const Scalar> a, std::span<const Scalar> b) {
  Scalar s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Scalar d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void axpy(Scalar a, std::span<const Scalar> x, std::span<Scalar> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

bool all_finite(std::span<const Scalar> v) {
  return std::all_of(v.begin(), v.end(), [](Scalar x) { return std::isfinite(x); });
}

std::string shape_string(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

}  // namespace tokmat
