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
#ifndef DLAB_SSM_HPP_
#define DLAB_SSM_HPP_

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dlab/rng.hpp"
#include "dlab/tensor.hpp"

namespace dlab {

// Discretized state-space parameters, one entry per step i = 1..n.
struct SsmParams {
  std::vector<Tensor> a_tilde;  // d_state x C, entries in (0, 1]
  std::vector<Tensor> b;        // d_state x 1
  std::vector<Tensor> c_out;    // 1 x d_state
  Tensor d;                     // 1 x C
  Tensor delta;                 // n x C
  Tensor h0;                    // d_state x C

  std::size_t length() const { return a_tilde.size(); }
  std::size_t d_state() const { return h0.rows(); }
  std::size_t channels() const { return h0.cols(); }
  void validate() const;

  // Seeded instance with A entries in [a_lo, a_hi].
  static SsmParams random(Rng& rng, std::size_t n, std::size_t d_state, std::size_t channels, bool zero_h0,
                          double a_lo = 0.05, double a_hi = 1.0);
};

struct ScanResult {
  std::vector<Tensor> h;  // h_1..h_n
  Tensor y;               // n x C
};

// h_i = A_i . h_{i-1} + B_i (Delta_i . x_i),  y_i = C_i h_i + D . x_i
ScanResult ssm_scan(const SsmParams& p, const Tensor& x);

struct StepValue {
  Tensor h;  // d_state x C
  Tensor y;  // 1 x C
};

// Product-sum solution at step m (1-based), evaluated term by term.
StepValue ssm_closed_form(const SsmParams& p, const Tensor& x, std::size_t m);

// k~_i = (A_m . A_{m-1} ... A_{i+1}) . B_i for i = 1..m, each d_state x C.
std::vector<Tensor> mamba_effective_keys(const SsmParams& p, std::size_t m);

// y_m = sum_{i<=m} C_m k~_i v~_i + D . x_m with v~_i = Delta_i . x_i.
// Requires h0 = 0.
Tensor mamba_as_attention(const SsmParams& p, const Tensor& x);

// Recurrent causal linear attention on already-featured q, k:
// S_i = S_{i-1} + k_i^T v_i, Z_i = Z_{i-1} + k_i^T, y_i = q_i S_i / (q_i Z_i + eps).
Tensor causal_linear_recursive(const Tensor& q, const Tensor& k, const Tensor& v, double epsilon = 1e-6);

// For each position m (1-based), the largest lag L <= m such that the largest
// entry of A_m . ... . A_{m-L+1} is still >= threshold.
std::vector<std::size_t> forgetting_horizon(const SsmParams& p, double threshold);

struct EquivalenceReport {
  std::size_t instances = 0;
  std::size_t prefixes = 0;
  double scan_vs_closed = 0.0;     // max abs diff over h and y at every prefix
  double scan_vs_attention = 0.0;  // max abs diff over y
  double max_abs_diff() const { return std::max(scan_vs_closed, scan_vs_attention); }
};

// Seeded instances with n in [1, n_max], d_state in [1, d_state_max] and C in
// [1, channels_max], h0 = 0. perturbation is added to every attention-form
// output (negative control).
EquivalenceReport ssm_equivalence(std::size_t instances, std::size_t n_max, std::size_t d_state_max,
                                  std::size_t channels_max, std::uint64_t seed, double perturbation = 0.0);

}  // namespace dlab

#endif  // DLAB_SSM_HPP_
