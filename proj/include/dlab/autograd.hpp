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
#ifndef DLAB_AUTOGRAD_HPP_
#define DLAB_AUTOGRAD_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlab/posenc.hpp"
#include "dlab/tensor.hpp"

namespace dlab::ad {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Maps the output gradient (and the output value) to one gradient per parent,
// in parent order.
using Adjoint = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)>;

class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}
  bool has(const Var& v) const { return v.id() < grads_.size() && grads_[v.id()].has_value(); }
  // Zero tensor when nothing flowed into v.
  Tensor operator[](const Var& v) const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

// Single-threaded reverse-mode tape. Nodes are appended in evaluation order,
// which is a topological order of the DAG; backward walks it in reverse and
// visits every node once.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  // An empty adjoint records an op without a derivative; backward throws
  // DifferentiationError if a gradient ever has to pass through it.
  Var record(std::string op, Tensor value, std::vector<Var> parents, Adjoint adjoint);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  const std::string& op(const Var& v) const { return nodes_[v.id()].op; }
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  Gradients backward(const Var& loss) const;
  // Backward from an arbitrary output with an explicit seed gradient.
  Gradients backward(const Var& output, const Tensor& seed) const;

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> parents;
    Adjoint adjoint;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// Op set. Every op below registers an adjoint.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a (n x m) + broadcast of a 1 x m row.
Var add_row(const Var& a, const Var& row);
Var exp(const Var& a);
Var elu_plus_one(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var pow(const Var& a, int p);
Var reciprocal(const Var& a);
// a / b elementwise, defined as 0 where b == 0.
Var safe_div(const Var& a, const Var& b);
Var softmax_rows(const Var& a);
Var mean_rows(const Var& a);
Var sum_rows(const Var& a);    // n x m -> 1 x m
Var row_sums(const Var& a);    // n x m -> n x 1
Var row_norms(const Var& a);   // n x m -> n x 1, gradient 0 at a zero row
Var scale_rows(const Var& a, const Var& s);  // a_i * s_i with s n x 1
Var broadcast_row(const Var& row, std::size_t n);
Var sum(const Var& a);  // -> shape {1}
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const std::size_t> index);
Var reshape(const Var& a, Shape shape);
// RoPE-style pair rotation by fixed angles (n x d/2).
Var rotate(const Var& a, const Tensor& angles);
// Depthwise k x k correlation with learnable taps (channels x k x k).
Var depthwise_conv(const Var& v, const Var& taps, const GridSpec& grid);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// -log softmax(logits)[label] for a 1 x K row; shape {1}.
Var cross_entropy(const Var& logits, std::size_t label);

struct GradcheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coordinates = 0;
  bool pass = false;
};

using TracedFn = std::function<Var(Tape&, std::span<const Var>)>;

// Central differences against backward. Inputs with more than 512 entries
// are probed on 64 seeded random coordinates. The relative error divides by
// max(|analytic|, |numeric|, 1e-8).
GradcheckReport gradcheck(const TracedFn& f, const std::vector<Tensor>& inputs, double step = 1e-5,
                          double tol = 1e-5, std::uint64_t seed = 7);

}  // namespace dlab::ad

#endif  // DLAB_AUTOGRAD_HPP_
