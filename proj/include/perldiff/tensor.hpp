#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace perldiff {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Dims = std::vector<int>;

std::string dims_to_string(const Dims& dims);

inline std::size_t num_elements(const Dims& dims) {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

// Dense row-major array of doubles. Plain value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, double fill = 0.0);
  Tensor(Dims dims, std::vector<double> data);

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  // Rows given as nested initializer lists, for tests and small literals.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Dims& dims() const { return dims_; }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i < 0 ? static_cast<int>(dims_.size()) + i : i)); }
  int rank() const { return static_cast<int>(dims_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rows/cols of the 2D view that keeps the last dimension.
  int rows() const { return dims_.empty() ? 0 : static_cast<int>(data_.size() / static_cast<std::size_t>(dims_.back())); }
  int cols() const { return dims_.empty() ? 0 : dims_.back(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)]; }
  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)]; }

  Tensor reshaped(Dims dims) const;
  void fill(double v);
  bool all_finite() const;
  double max_abs() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Dims dims_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace perldiff
