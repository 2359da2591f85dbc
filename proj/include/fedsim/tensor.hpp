// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. A rank-0 tensor (empty shape) holds one
// scalar. Values must be finite; construction from data rejects NaN/Inf.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor filled(Shape shape, double value);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // Element (row, col) of a rank-2 tensor.
  double& at(std::size_t row, std::size_t col) noexcept {
    return data_[row * shape_[1] + col];
  }
  double at(std::size_t row, std::size_t col) const noexcept {
    return data_[row * shape_[1] + col];
  }

  // Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;

  bool all_finite() const noexcept;
  void require_finite(const char* context) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Frobenius norm.
double norm(const Tensor& t) noexcept;
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace fedsim
