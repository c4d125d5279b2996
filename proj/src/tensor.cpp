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
#include "dlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "dlab/errors.hpp"

namespace dlab {
namespace {

std::size_t element_count(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw DimensionError("tensor rank must be 1..4, got shape " + shape_to_string(shape));
  }
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

thread_local std::uint64_t g_multiply_adds = 0;

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != element_count(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& r : rows) {
    if (r.size() != m) throw DimensionError("ragged rows in matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({n, m}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for shape " + shape_to_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows()");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols()");
  return shape_[1];
}

std::vector<std::size_t> Tensor::strides() const {
  std::vector<std::size_t> s(shape_.size(), 1);
  for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
  return s;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw DimensionError("index rank mismatch for shape " + shape_to_string(shape_));
  const auto s = strides();
  std::size_t flat = 0, axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_to_string(shape_));
    flat += i * s[axis++];
  }
  return data_[flat];
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t m = shape_.back();
  return std::span<const double>(data_).subspan(i * m, m);
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t m = shape_.back();
  return std::span<double>(data_).subspan(i * m, m);
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor c({n, m});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  // i-l-j order keeps the inner loop contiguous in b and c.
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = pc + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = pa[i * k + l];
      const double* bl = pb + l * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += ail * bl[j];
    }
  }
  flops::add(static_cast<std::uint64_t>(n) * k * m);
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor t({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t(j, i) = a(i, j);
  return t;
}

namespace {
template <typename Op>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, Op op) {
  require_same_shape(a, b, what);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
  return out;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, "add", std::plus<>()); }
Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, "sub", std::minus<>()); }
Tensor hadamard(const Tensor& a, const Tensor& b) { return zip(a, b, "hadamard", std::multiplies<>()); }

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (auto& v : o) v /= total;
  }
  return out;
}

Tensor cumprod_rows(const Tensor& a) {
  Tensor out = a;
  const std::size_t n = a.dim(0);
  const std::size_t stride = a.size() / n;
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < stride; ++j) out[i * stride + j] = out[(i - 1) * stride + j] * a[i * stride + j];
  return out;
}

Tensor sum_rows(const Tensor& a) {
  require_matrix(a, "sum_rows");
  Tensor out({1, a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  return out;
}

Tensor mean_rows(const Tensor& a) {
  Tensor s = sum_rows(a);
  const double inv = 1.0 / static_cast<double>(a.rows());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] *= inv;
  flops::add(static_cast<std::uint64_t>(a.rows()) * a.cols());
  return s;
}

Tensor broadcast_row(const Tensor& v, std::size_t n) {
  require_matrix(v, "broadcast_row");
  if (v.rows() != 1) throw DimensionError("broadcast_row: expected a 1xd row, got " + shape_to_string(v.shape()));
  if (n == 0) throw DimensionError("broadcast_row: n must be positive");
  Tensor out({n, v.cols()});
  for (std::size_t i = 0; i < n; ++i) std::copy(v.data().begin(), v.data().end(), out.row(i).begin());
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_rows");
  if (count == 0 || begin + count > a.rows()) {
    throw DimensionError("slice_rows: range out of bounds for shape " + shape_to_string(a.shape()));
  }
  const auto first = a.data().begin() + static_cast<std::ptrdiff_t>(begin * a.cols());
  return Tensor({count, a.cols()}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * a.cols())));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw DimensionError("concat_rows: column counts disagree");
    n += p.rows();
  }
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor({n, m}, std::move(data));
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_cols");
  if (count == 0 || begin + count > a.cols()) {
    throw DimensionError("slice_cols: range out of bounds for shape " + shape_to_string(a.shape()));
  }
  Tensor out({a.rows(), count});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, begin + j);
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw DimensionError("concat_cols: row counts disagree");
    m += p.cols();
  }
  Tensor out({n, m});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, offset + j) = p(i, j);
    offset += p.cols();
  }
  return out;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  Tensor out({index.size(), a.cols()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw DimensionError("gather_rows: index out of range");
    const auto src = a.row(index[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sum(const Tensor& a) { return std::accumulate(a.data().begin(), a.data().end(), 0.0); }

namespace flops {
void add(std::uint64_t count) { g_multiply_adds += count; }
std::uint64_t current() { return g_multiply_adds; }
Scope::Scope() : start_(g_multiply_adds) {}
std::uint64_t Scope::count() const { return g_multiply_adds - start_; }
}  // namespace flops

}  // namespace dlab
