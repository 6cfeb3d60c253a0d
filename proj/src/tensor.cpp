#include "perldiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace perldiff {

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Dims dims, double fill) : dims_(std::move(dims)) {
  for (int d : dims_) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims_));
  }
  data_.assign(num_elements(dims_), fill);
}

Tensor::Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
  for (int d : dims_) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims_));
  }
  if (num_elements(dims_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match dims " +
                     dims_to_string(dims_));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const int r = static_cast<int>(rows.size());
  if (r == 0) throw ShapeError("matrix literal needs at least one row");
  const int c = static_cast<int>(rows.begin()->size());
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::reshaped(Dims dims) const {
  if (num_elements(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
  }
  return Tensor(std::move(dims), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("max_abs_diff: " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace perldiff
