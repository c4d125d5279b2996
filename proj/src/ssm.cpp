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
#include "dlab/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dlab/errors.hpp"
#include "dlab/rng.hpp"

namespace dlab {

void SsmParams::validate() const {
  const std::size_t n = length();
  if (n == 0) throw DimensionError("ssm: empty parameter sequence");
  require_matrix(h0, "ssm h0");
  const std::size_t ds = d_state(), C = channels();
  if (b.size() != n || c_out.size() != n) throw DimensionError("ssm: per-step sequences must share length");
  if (delta.shape() != Shape{n, C}) throw DimensionError("ssm: delta must be n x C, got " + shape_to_string(delta.shape()));
  if (d.shape() != Shape{1, C}) throw DimensionError("ssm: D must be 1 x C, got " + shape_to_string(d.shape()));
  for (std::size_t i = 0; i < n; ++i) {
    if (a_tilde[i].shape() != Shape{ds, C}) throw DimensionError("ssm: A_" + std::to_string(i + 1) + " must be d_state x C");
    if (b[i].shape() != Shape{ds, 1}) throw DimensionError("ssm: B_" + std::to_string(i + 1) + " must be d_state x 1");
    if (c_out[i].shape() != Shape{1, ds}) throw DimensionError("ssm: C_" + std::to_string(i + 1) + " must be 1 x d_state");
    for (double a : a_tilde[i].data())
      if (!(a > 0.0 && a <= 1.0)) throw PreconditionError("ssm: A entries must lie in (0, 1]");
  }
}

SsmParams SsmParams::random(Rng& rng, std::size_t n, std::size_t d_state, std::size_t channels, bool zero_h0,
                            double a_lo, double a_hi) {
  SsmParams p;
  for (std::size_t i = 0; i < n; ++i) {
    p.a_tilde.push_back(rng.uniform_tensor({d_state, channels}, a_lo, a_hi));
    p.b.push_back(rng.normal_tensor({d_state, 1}));
    p.c_out.push_back(rng.normal_tensor({1, d_state}));
  }
  p.d = rng.normal_tensor({1, channels});
  p.delta = rng.uniform_tensor({n, channels}, 0.01, 1.0);
  p.h0 = zero_h0 ? Tensor::zeros({d_state, channels}) : rng.normal_tensor({d_state, channels});
  return p;
}

namespace {

void check_input(const SsmParams& p, const Tensor& x) {
  p.validate();
  if (x.shape() != Shape{p.length(), p.channels()}) {
    throw DimensionError("ssm: input must be " + shape_to_string({p.length(), p.channels()}) + ", got " +
                         shape_to_string(x.shape()));
  }
}

// B_i (Delta_i . x_i): outer product, d_state x C. i is 0-based.
Tensor injection(const SsmParams& p, const Tensor& x, std::size_t i) {
  Tensor u({p.d_state(), p.channels()});
  for (std::size_t s = 0; s < p.d_state(); ++s)
    for (std::size_t c = 0; c < p.channels(); ++c) u(s, c) = p.b[i][s] * (p.delta(i, c) * x(i, c));
  return u;
}

// C_i h + D . x_i as a 1 x C row. i is 0-based.
Tensor readout(const SsmParams& p, const Tensor& h, const Tensor& x, std::size_t i) {
  Tensor y = matmul(p.c_out[i], h);
  for (std::size_t c = 0; c < p.channels(); ++c) y[c] += p.d[c] * x(i, c);
  return y;
}

}  // namespace

ScanResult ssm_scan(const SsmParams& p, const Tensor& x) {
  check_input(p, x);
  ScanResult r;
  r.y = Tensor({p.length(), p.channels()});
  Tensor h = p.h0;
  for (std::size_t i = 0; i < p.length(); ++i) {
    h = add(hadamard(p.a_tilde[i], h), injection(p, x, i));
    const Tensor yi = readout(p, h, x, i);
    std::copy(yi.data().begin(), yi.data().end(), r.y.row(i).begin());
    r.h.push_back(h);
  }
  return r;
}

StepValue ssm_closed_form(const SsmParams& p, const Tensor& x, std::size_t m) {
  check_input(p, x);
  if (m < 1 || m > p.length()) {
    throw DimensionError("ssm_closed_form: step " + std::to_string(m) + " outside 1.." + std::to_string(p.length()));
  }
  // (prod_{j=1}^m A_j) . h0
  Tensor prefix = Tensor::ones({p.d_state(), p.channels()});
  for (std::size_t j = 1; j <= m; ++j) prefix = hadamard(prefix, p.a_tilde[j - 1]);
  Tensor h = hadamard(prefix, p.h0);
  for (std::size_t i = 1; i <= m; ++i) {
    // prod_{j=1}^{m-i} A_{m-(j-1)} = A_m . A_{m-1} ... A_{i+1}
    Tensor suffix = Tensor::ones({p.d_state(), p.channels()});
    for (std::size_t j = 1; j <= m - i; ++j) suffix = hadamard(suffix, p.a_tilde[m - (j - 1) - 1]);
    h = add(h, hadamard(suffix, injection(p, x, i - 1)));
  }
  StepValue out;
  out.y = readout(p, h, x, m - 1);
  out.h = std::move(h);
  return out;
}

std::vector<Tensor> mamba_effective_keys(const SsmParams& p, std::size_t m) {
  p.validate();
  if (m < 1 || m > p.length()) throw DimensionError("mamba_effective_keys: step out of range");
  std::vector<Tensor> keys(m);
  Tensor run = Tensor::ones({p.d_state(), p.channels()});
  for (std::size_t i = m; i-- > 0;) {
    Tensor key({p.d_state(), p.channels()});
    for (std::size_t s = 0; s < p.d_state(); ++s)
      for (std::size_t c = 0; c < p.channels(); ++c) key(s, c) = run(s, c) * p.b[i][s];
    keys[i] = std::move(key);
    run = hadamard(run, p.a_tilde[i]);
  }
  return keys;
}

Tensor mamba_as_attention(const SsmParams& p, const Tensor& x) {
  check_input(p, x);
  for (double h : p.h0.data())
    if (h != 0.0) throw PreconditionError("mamba_as_attention requires h0 = 0");
  const std::size_t n = p.length(), ds = p.d_state(), C = p.channels();
  Tensor y({n, C});
  for (std::size_t m = 1; m <= n; ++m) {
    const auto keys = mamba_effective_keys(p, m);
    const Tensor& query = p.c_out[m - 1];
    auto ym = y.row(m - 1);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        double score = 0.0;
        for (std::size_t s = 0; s < ds; ++s) score += query[s] * keys[i](s, c);
        ym[c] += score * (p.delta(i, c) * x(i, c));
      }
    }
    for (std::size_t c = 0; c < C; ++c) ym[c] += p.d[c] * x(m - 1, c);
  }
  return y;
}

Tensor causal_linear_recursive(const Tensor& q, const Tensor& k, const Tensor& v, double epsilon) {
  require_matrix(q, "causal_linear_recursive");
  require_matrix(k, "causal_linear_recursive");
  require_matrix(v, "causal_linear_recursive");
  if (q.shape() != k.shape() || v.rows() != q.rows()) {
    throw DimensionError("causal_linear_recursive: incompatible shapes " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
  const std::size_t n = q.rows(), d = q.cols(), dv = v.cols();
  Tensor state({d, dv});
  std::vector<double> z(d, 0.0);
  Tensor y({n, dv});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      z[a] += k(i, a);
      for (std::size_t c = 0; c < dv; ++c) state(a, c) += k(i, a) * v(i, c);
    }
    double den = epsilon;
    for (std::size_t a = 0; a < d; ++a) den += q(i, a) * z[a];
    if (!(std::abs(den) >= epsilon) || den == 0.0) {
      throw KernelDomainError("causal_linear_recursive: degenerate query at position " + std::to_string(i + 1));
    }
    auto yi = y.row(i);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t c = 0; c < dv; ++c) yi[c] += q(i, a) * state(a, c);
    for (auto& val : yi) val /= den;
  }
  return y;
}

std::vector<std::size_t> forgetting_horizon(const SsmParams& p, double threshold) {
  p.validate();
  const std::size_t n = p.length();
  std::vector<std::size_t> horizon(n, 0);
  for (std::size_t m = 1; m <= n; ++m) {
    Tensor run = Tensor::ones({p.d_state(), p.channels()});
    std::size_t lag = 0;
    while (lag < m) {
      run = hadamard(run, p.a_tilde[m - lag - 1]);
      const double largest = *std::max_element(run.data().begin(), run.data().end());
      if (largest < threshold) break;
      ++lag;
    }
    horizon[m - 1] = lag;
  }
  return horizon;
}

EquivalenceReport ssm_equivalence(std::size_t instances, std::size_t n_max, std::size_t d_state_max,
                                  std::size_t channels_max, std::uint64_t seed, double perturbation) {
  if (n_max == 0 || d_state_max == 0 || channels_max == 0) throw PreconditionError("ssm_equivalence: sizes must be positive");
  EquivalenceReport report;
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng = Rng::keyed(seed, "ssm-check", t);
    const std::size_t n = 1 + rng.index(n_max);
    const std::size_t ds = 1 + rng.index(d_state_max);
    const std::size_t c = 1 + rng.index(channels_max);
    const SsmParams p = SsmParams::random(rng, n, ds, c, /*zero_h0=*/true);
    const Tensor x = rng.normal_tensor({n, c});

    const ScanResult scan = ssm_scan(p, x);
    for (std::size_t m = 1; m <= n; ++m) {
      const StepValue closed = ssm_closed_form(p, x, m);
      report.scan_vs_closed = std::max(report.scan_vs_closed, max_abs_diff(closed.h, scan.h[m - 1]));
      report.scan_vs_closed = std::max(report.scan_vs_closed, max_abs_diff(closed.y, slice_rows(scan.y, m - 1, 1)));
      ++report.prefixes;
    }
    Tensor attention = mamba_as_attention(p, x);
    for (std::size_t i = 0; i < attention.size(); ++i) attention[i] += perturbation;
    report.scan_vs_attention = std::max(report.scan_vs_attention, max_abs_diff(attention, scan.y));
    ++report.instances;
  }
  return report;
}

}  // namespace dlab
