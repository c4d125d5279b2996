/* Copyright 2026 The Dispersion Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef DLAB_TENSOR_HPP_
#define DLAB_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dlab {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

// Dense row-major double tensor of rank 1 to 4.
//
// Every operation below returns a fresh tensor; nothing aliases. Mutable
// element access exists for construction only, operations never modify
// their arguments.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor identity(std::size_t n);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const;
  // Rank-2 conveniences.
  std::size_t rows() const;
  std::size_t cols() const;
  std::vector<std::size_t> strides() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  double at(std::initializer_list<std::size_t> index) const;

  std::span<const double> row(std::size_t i) const;
  std::span<double> row(std::size_t i);

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Throws DimensionError unless the tensor has rank 2.
void require_matrix(const Tensor& t, const char* what);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor hadamard(const Tensor& a, const Tensor& b);
// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
// Running elementwise products along axis 0: out[i] = a[0] * ... * a[i].
Tensor cumprod_rows(const Tensor& a);
Tensor mean_rows(const Tensor& a);
Tensor broadcast_row(const Tensor& v, std::size_t n);
Tensor sum_rows(const Tensor& a);
// Rows [begin, begin + count) of a matrix.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
// Columns [begin, begin + count) of a matrix.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// out[i] = a[index[i]].
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);

double max_abs_diff(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);

// Thread-local multiply-add instrumentation. matmul, mean_rows and the
// attention kernels report the multiply-adds of coefficient computation and
// value aggregation; exp/divide work is not counted.
namespace flops {
void add(std::uint64_t count);
std::uint64_t current();

// Captures the multiply-adds performed on this thread while alive.
class Scope {
 public:
  Scope();
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
};
}  // namespace flops

}  // namespace dlab

#endif  // DLAB_TENSOR_HPP_
