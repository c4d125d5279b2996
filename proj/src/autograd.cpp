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
#include "dlab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dlab/attention.hpp"
#include "dlab/errors.hpp"
#include "dlab/rng.hpp"

namespace dlab::ad {

const Tensor& Var::value() const {
  if (!tape_) throw DifferentiationError("use of an unbound Var");
  return tape_->value(id_);
}

Tensor Gradients::operator[](const Var& v) const {
  if (has(v)) return *grads_[v.id()];
  return Tensor::zeros(v.value().shape());
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back({"leaf", std::move(value), {}, {}, requires_grad && grad_enabled_});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> parents, Adjoint adjoint) {
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw DifferentiationError("op '" + node.op + "' mixes values from different tapes");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  node.requires_grad = node.requires_grad && grad_enabled_;
  if (node.requires_grad) node.adjoint = std::move(adjoint);
  const bool missing = node.requires_grad && !node.adjoint;
  nodes_.push_back(std::move(node));
  if (missing) nodes_.back().op += " (no adjoint)";
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) const {
  if (loss.value().size() != 1) {
    throw DifferentiationError("backward needs a scalar loss, got shape " + shape_to_string(loss.value().shape()));
  }
  return backward(loss, Tensor::ones(loss.value().shape()));
}

Gradients Tape::backward(const Var& output, const Tensor& seed) const {
  if (output.tape() != this) throw DifferentiationError("backward from a Var of another tape");
  require_same_shape(seed, output.value(), "backward seed");
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[output.id()] = seed;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || node.parents.empty() || !node.requires_grad) continue;
    if (!node.adjoint) throw DifferentiationError("no adjoint registered for op '" + node.op + "'");
    std::vector<Tensor> parent_grads = node.adjoint(*grads[id], node.value);
    if (parent_grads.size() != node.parents.size()) {
      throw DifferentiationError("adjoint of '" + node.op + "' returned the wrong number of gradients");
    }
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      const std::size_t pid = node.parents[i];
      if (!nodes_[pid].requires_grad) continue;
      require_same_shape(parent_grads[i], nodes_[pid].value, node.op.c_str());
      if (grads[pid]) {
        grads[pid] = dlab::add(*grads[pid], parent_grads[i]);
      } else {
        grads[pid] = std::move(parent_grads[i]);
      }
    }
  }
  return Gradients(std::move(grads));
}

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw DifferentiationError("use of an unbound Var");
  return *a.tape();
}

template <typename Fn>
Tensor map(const Tensor& x, Fn fn) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return out;
}

template <typename Fn>
Tensor map2(const Tensor& x, const Tensor& y, Fn fn) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i], y[i]);
  return out;
}

// n x 1 column from a flat vector of per-row values.
Tensor column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n, 1}, std::move(values));
}

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

Var matmul(const Var& a, const Var& b) {
  return tape_of(a).record("matmul", dlab::matmul(a.value(), b.value()), {a, b},
                           [a, b](const Tensor& g, const Tensor&) {
                             return std::vector<Tensor>{dlab::matmul(g, dlab::transpose(b.value())),
                                                        dlab::matmul(dlab::transpose(a.value()), g)};
                           });
}

Var transpose(const Var& a) {
  return tape_of(a).record("transpose", dlab::transpose(a.value()), {a}, [](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{dlab::transpose(g)};
  });
}

Var add(const Var& a, const Var& b) {
  return tape_of(a).record("add", dlab::add(a.value(), b.value()), {a, b},
                           [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  return tape_of(a).record("sub", dlab::sub(a.value(), b.value()), {a, b}, [](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{g, dlab::scale(g, -1.0)};
  });
}

Var hadamard(const Var& a, const Var& b) {
  return tape_of(a).record("hadamard", dlab::hadamard(a.value(), b.value()), {a, b},
                           [a, b](const Tensor& g, const Tensor&) {
                             return std::vector<Tensor>{dlab::hadamard(g, b.value()), dlab::hadamard(g, a.value())};
                           });
}

Var scale(const Var& a, double s) {
  return tape_of(a).record("scale", dlab::scale(a.value(), s), {a}, [s](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{dlab::scale(g, s)};
  });
}

Var add_scalar(const Var& a, double s) {
  return tape_of(a).record("add_scalar", map(a.value(), [s](double x) { return x + s; }), {a},
                           [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g}; });
}

Var add_row(const Var& a, const Var& row) {
  const Tensor out = dlab::add(a.value(), dlab::broadcast_row(row.value(), a.value().rows()));
  return tape_of(a).record("add_row", out, {a, row}, [](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{g, dlab::sum_rows(g)};
  });
}

Var exp(const Var& a) {
  return tape_of(a).record("exp", map(a.value(), [](double x) { return std::exp(x); }), {a},
                           [](const Tensor& g, const Tensor& out) { return std::vector<Tensor>{dlab::hadamard(g, out)}; });
}

Var elu_plus_one(const Var& a) {
  return tape_of(a).record("elu", dlab::elu_plus_one(a.value()), {a}, [a](const Tensor& g, const Tensor& out) {
    const Tensor& x = a.value();
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * (x[i] > 0.0 ? 1.0 : out[i]);
    return std::vector<Tensor>{gx};
  });
}

Var relu(const Var& a) {
  return tape_of(a).record("relu", map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                           [a](const Tensor& g, const Tensor&) {
                             return std::vector<Tensor>{
                                 map2(g, a.value(), [](double gi, double x) { return x > 0.0 ? gi : 0.0; })};
                           });
}

Var gelu(const Var& a) {
  auto f = [](double x) { return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x))); };
  return tape_of(a).record("gelu", map(a.value(), f), {a}, [a](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{map2(g, a.value(), [](double gi, double x) {
      const double t = std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x));
      const double dt = (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
      return gi * (0.5 * (1.0 + t) + 0.5 * x * dt);
    })};
  });
}

Var pow(const Var& a, int p) {
  return tape_of(a).record("pow", map(a.value(), [p](double x) { return std::pow(x, p); }), {a},
                           [a, p](const Tensor& g, const Tensor&) {
                             return std::vector<Tensor>{map2(g, a.value(), [p](double gi, double x) {
                               return p == 1 ? gi : gi * p * std::pow(x, p - 1);
                             })};
                           });
}

Var reciprocal(const Var& a) {
  return tape_of(a).record("reciprocal", map(a.value(), [](double x) { return 1.0 / x; }), {a},
                           [](const Tensor& g, const Tensor& out) {
                             return std::vector<Tensor>{map2(g, out, [](double gi, double r) { return -gi * r * r; })};
                           });
}

Var safe_div(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "safe_div");
  const Tensor out = map2(a.value(), b.value(), [](double x, double y) { return y == 0.0 ? 0.0 : x / y; });
  return tape_of(a).record("safe_div", out, {a, b}, [a, b](const Tensor& g, const Tensor&) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor ga(x.shape()), gb(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] == 0.0) continue;
      ga[i] = g[i] / y[i];
      gb[i] = -g[i] * x[i] / (y[i] * y[i]);
    }
    return std::vector<Tensor>{ga, gb};
  });
}

Var softmax_rows(const Var& a) {
  return tape_of(a).record("softmax_rows", dlab::softmax_rows(a.value()), {a}, [](const Tensor& g, const Tensor& y) {
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dotp = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dotp += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) = y(i, j) * (g(i, j) - dotp);
    }
    return std::vector<Tensor>{gx};
  });
}

Var mean_rows(const Var& a) {
  const std::size_t n = a.value().rows();
  return tape_of(a).record("mean_rows", dlab::mean_rows(a.value()), {a}, [n](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{dlab::broadcast_row(dlab::scale(g, 1.0 / static_cast<double>(n)), n)};
  });
}

Var sum_rows(const Var& a) {
  const std::size_t n = a.value().rows();
  return tape_of(a).record("sum_rows", dlab::sum_rows(a.value()), {a}, [n](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{dlab::broadcast_row(g, n)};
  });
}

Var row_sums(const Var& a) {
  const Tensor& x = a.value();
  require_matrix(x, "row_sums");
  std::vector<double> s(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (double v : x.row(i)) s[i] += v;
  const std::size_t m = x.cols();
  return tape_of(a).record("row_sums", column(std::move(s)), {a}, [m](const Tensor& g, const Tensor&) {
    Tensor gx({g.rows(), m});
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < m; ++j) gx(i, j) = g[i];
    return std::vector<Tensor>{gx};
  });
}

Var row_norms(const Var& a) {
  const Tensor& x = a.value();
  require_matrix(x, "row_norms");
  std::vector<double> s(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (double v : x.row(i)) s[i] += v * v;
    s[i] = std::sqrt(s[i]);
  }
  return tape_of(a).record("row_norms", column(std::move(s)), {a}, [a](const Tensor& g, const Tensor& norms) {
    const Tensor& x = a.value();
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (norms[i] == 0.0) continue;
      for (std::size_t j = 0; j < x.cols(); ++j) gx(i, j) = g[i] * x(i, j) / norms[i];
    }
    return std::vector<Tensor>{gx};
  });
}

Var scale_rows(const Var& a, const Var& s) {
  const Tensor& x = a.value();
  require_matrix(x, "scale_rows");
  if (s.value().shape() != Shape{x.rows(), 1}) throw DimensionError("scale_rows: scale must be n x 1");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * s.value()[i];
  return tape_of(a).record("scale_rows", out, {a, s}, [a, s](const Tensor& g, const Tensor&) {
    const Tensor& x = a.value();
    Tensor ga(x.shape()), gs({x.rows(), 1});
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) {
        ga(i, j) = g(i, j) * s.value()[i];
        gs[i] += g(i, j) * x(i, j);
      }
    return std::vector<Tensor>{ga, gs};
  });
}

Var broadcast_row(const Var& row, std::size_t n) {
  return tape_of(row).record("broadcast_row", dlab::broadcast_row(row.value(), n), {row},
                             [](const Tensor& g, const Tensor&) { return std::vector<Tensor>{dlab::sum_rows(g)}; });
}

Var sum(const Var& a) {
  const Shape shape = a.value().shape();
  return tape_of(a).record("sum", Tensor({1}, {dlab::sum(a.value())}), {a}, [shape](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{Tensor::full(shape, g[0])};
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Shape shape = a.value().shape();
  return tape_of(a).record("slice_rows", dlab::slice_rows(a.value(), begin, count), {a},
                           [shape, begin](const Tensor& g, const Tensor&) {
                             Tensor gx(shape);
                             std::copy(g.data().begin(), g.data().end(), gx.data().begin() + static_cast<std::ptrdiff_t>(begin * shape[1]));
                             return std::vector<Tensor>{gx};
                           });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const Shape shape = a.value().shape();
  return tape_of(a).record("slice_cols", dlab::slice_cols(a.value(), begin, count), {a},
                           [shape, begin](const Tensor& g, const Tensor&) {
                             Tensor gx(shape);
                             for (std::size_t i = 0; i < g.rows(); ++i)
                               for (std::size_t j = 0; j < g.cols(); ++j) gx(i, begin + j) = g(i, j);
                             return std::vector<Tensor>{gx};
                           });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  std::vector<Tensor> values;
  std::vector<std::size_t> rows;
  for (const Var& p : parts) {
    values.push_back(p.value());
    rows.push_back(p.value().rows());
  }
  return tape_of(parts.front())
      .record("concat_rows", dlab::concat_rows(values), std::vector<Var>(parts.begin(), parts.end()),
              [rows](const Tensor& g, const Tensor&) {
                std::vector<Tensor> out;
                std::size_t at = 0;
                for (std::size_t r : rows) {
                  out.push_back(dlab::slice_rows(g, at, r));
                  at += r;
                }
                return out;
              });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  std::vector<Tensor> values;
  std::vector<std::size_t> cols;
  for (const Var& p : parts) {
    values.push_back(p.value());
    cols.push_back(p.value().cols());
  }
  return tape_of(parts.front())
      .record("concat_cols", dlab::concat_cols(values), std::vector<Var>(parts.begin(), parts.end()),
              [cols](const Tensor& g, const Tensor&) {
                std::vector<Tensor> out;
                std::size_t at = 0;
                for (std::size_t c : cols) {
                  out.push_back(dlab::slice_cols(g, at, c));
                  at += c;
                }
                return out;
              });
}

Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  const Shape shape = a.value().shape();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return tape_of(a).record("gather_rows", dlab::gather_rows(a.value(), idx), {a},
                           [shape, idx](const Tensor& g, const Tensor&) {
                             Tensor gx(shape);
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               auto dst = gx.row(idx[i]);
                               const auto src = g.row(i);
                               for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                             }
                             return std::vector<Tensor>{gx};
                           });
}

Var reshape(const Var& a, Shape shape) {
  const Shape original = a.value().shape();
  return tape_of(a).record("reshape", a.value().reshaped(std::move(shape)), {a},
                           [original](const Tensor& g, const Tensor&) { return std::vector<Tensor>{g.reshaped(original)}; });
}

Var rotate(const Var& a, const Tensor& angles) {
  return tape_of(a).record("rotate", rotate_pairs(a.value(), angles), {a}, [angles](const Tensor& g, const Tensor&) {
    return std::vector<Tensor>{rotate_pairs(g, angles, /*inverse=*/true)};
  });
}

Var depthwise_conv(const Var& v, const Var& taps, const GridSpec& grid) {
  const DepthwiseKernel kernel = DepthwiseKernel::from_tensor(taps.value());
  return tape_of(v).record("depthwise_conv", lepe(v.value(), kernel, grid), {v, taps},
                           [v, kernel, grid](const Tensor& g, const Tensor&) {
                             return std::vector<Tensor>{lepe_grad_input(g, kernel, grid),
                                                        lepe_grad_taps(g, v.value(), kernel.size, grid)};
                           });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& in = x.value();
  require_matrix(in, "layer_norm");
  const std::size_t n = in.rows(), m = in.cols();
  if (gamma.value().shape() != Shape{1, m} || beta.value().shape() != Shape{1, m}) {
    throw DimensionError("layer_norm: gamma and beta must be 1 x " + std::to_string(m));
  }
  Tensor xhat(in.shape()), out(in.shape());
  std::vector<double> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0, var = 0.0;
    for (double val : in.row(i)) mean += val;
    mean /= static_cast<double>(m);
    for (double val : in.row(i)) var += (val - mean) * (val - mean);
    var /= static_cast<double>(m);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat(i, j) = (in(i, j) - mean) * rstd[i];
      out(i, j) = xhat(i, j) * gamma.value()[j] + beta.value()[j];
    }
  }
  return tape_of(x).record("layer_norm", out, {x, gamma, beta},
                           [xhat, rstd, gamma](const Tensor& g, const Tensor&) {
                             const std::size_t n = xhat.rows(), m = xhat.cols();
                             Tensor gx(xhat.shape()), gg({1, m}), gb({1, m});
                             std::vector<double> dy(m);
                             for (std::size_t i = 0; i < n; ++i) {
                               double mean_dy = 0.0, mean_dy_xhat = 0.0;
                               for (std::size_t j = 0; j < m; ++j) {
                                 dy[j] = g(i, j) * gamma.value()[j];
                                 mean_dy += dy[j];
                                 mean_dy_xhat += dy[j] * xhat(i, j);
                                 gg[j] += g(i, j) * xhat(i, j);
                                 gb[j] += g(i, j);
                               }
                               mean_dy /= static_cast<double>(m);
                               mean_dy_xhat /= static_cast<double>(m);
                               for (std::size_t j = 0; j < m; ++j)
                                 gx(i, j) = rstd[i] * (dy[j] - mean_dy - xhat(i, j) * mean_dy_xhat);
                             }
                             return std::vector<Tensor>{gx, gg, gb};
                           });
}

Var cross_entropy(const Var& logits, std::size_t label) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.rows() != 1 || label >= z.cols()) {
    throw DimensionError("cross_entropy: expected a 1 x K row and label < K");
  }
  const Tensor p = dlab::softmax_rows(z);
  const double mx = *std::max_element(z.data().begin(), z.data().end());
  double lse = 0.0;
  for (double v : z.data()) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  return tape_of(logits).record("cross_entropy", Tensor({1}, {lse - z[label]}), {logits},
                                [p, label](const Tensor& g, const Tensor&) {
                                  Tensor gz = dlab::scale(p, g[0]);
                                  gz[label] -= g[0];
                                  return std::vector<Tensor>{gz};
                                });
}

GradcheckReport gradcheck(const TracedFn& f, const std::vector<Tensor>& inputs, double step, double tol,
                          std::uint64_t seed) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.leaf(in));
  const Var out = f(tape, vars);
  const Gradients grads = tape.backward(out);

  auto evaluate = [&](const std::vector<Tensor>& probe) {
    Tape t(/*grad_enabled=*/false);
    std::vector<Var> vs;
    for (const auto& in : probe) vs.push_back(t.leaf(in));
    return f(t, vs).value()[0];
  };

  GradcheckReport report;
  Rng rng = Rng::keyed(seed, "gradcheck");
  std::vector<Tensor> probe = inputs;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const Tensor analytic = grads[vars[which]];
    std::vector<std::size_t> coords;
    if (inputs[which].size() > 512) {
      for (int c = 0; c < 64; ++c) coords.push_back(rng.index(inputs[which].size()));
    } else {
      for (std::size_t c = 0; c < inputs[which].size(); ++c) coords.push_back(c);
    }
    for (std::size_t c : coords) {
      const double x0 = inputs[which][c];
      probe[which][c] = x0 + step;
      const double fp = evaluate(probe);
      probe[which][c] = x0 - step;
      const double fm = evaluate(probe);
      probe[which][c] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[c];
      const double abs_err = std::abs(a - numeric);
      const double rel = std::isfinite(abs_err) ? abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8})
                                                : std::numeric_limits<double>::infinity();
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coordinates;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace dlab::ad
