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
#ifndef DLAB_ANALYSIS_HPP_
#define DLAB_ANALYSIS_HPP_

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dlab/attention.hpp"
#include "dlab/rng.hpp"
#include "dlab/tensor.hpp"

namespace dlab {

enum class Variant { kSoftmax, kLinear, kFocused, kWindow, kSema, kMila, kMix, kDifferential };

std::string to_string(Variant v);
// Throws ConfigError for unknown names.
Variant parse_variant(const std::string& name);
// The kernel a variant uses when none is given.
KernelSpec default_kernel(Variant v);

struct BoundSpec {
  Variant variant = Variant::kSoftmax;
  double phi_a = 1.0;  // min of phi over the logit range
  double phi_b = 1.0;  // max of phi over the logit range
  std::size_t n = 1;
};

struct Bounds {
  double lower = 0.0;
  double upper = 0.0;
};

// phi(a)/(n phi(b)) <= alpha <= phi(b)/(n phi(a)); the differential variant
// uses the difference form (phi(a)/phi(b) - phi(b)/phi(a))/n and its negation.
Bounds coefficient_bounds(const BoundSpec& spec);

// Draws (q, k) with |q_i . k_j| <= logit_bound.
struct BoundedSampler {
  double logit_bound = 1.0;
  std::size_t d = 16;
  bool zero_queries = false;  // every logit exactly 0
  // Folds rows into the positive orthant. Relu-based features need this to
  // keep every logit, and so phi(a), strictly positive.
  bool nonnegative = false;
  // When nonzero, one block of `tile` rows is drawn and repeated, so that
  // every window sees the same content regardless of n.
  std::size_t tile = 0;

  std::pair<Tensor, Tensor> draw(Rng& rng, std::size_t n) const;
};

struct DispersionConfig {
  Variant variant = Variant::kSoftmax;
  KernelSpec kernel = KernelSpec::softmax();
  BoundedSampler sampler;
  std::vector<std::size_t> n_values = {64, 128, 256, 512, 1024, 2048, 4096};
  std::size_t trials = 32;
  std::uint64_t seed = 42;
  std::size_t window = 8;  // window variant only
  unsigned threads = 0;    // 0: DISPERSION_LAB_THREADS or hardware concurrency
};

struct DispersionReport {
  Variant variant = Variant::kSoftmax;
  std::vector<std::size_t> n_values;
  std::vector<double> max_coeff;
  std::vector<double> min_coeff;
  std::vector<double> median_max_coeff;  // median over trials of the per-trial max
  std::vector<double> lower_bound;
  std::vector<double> upper_bound;
  double slope = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::uint64_t coefficients_checked = 0;
};

// Extracts coefficient matrices for every (n, trial) cell, checks each
// coefficient against the bounds built from that cell's logit extrema, and
// fits the decay slope. Throws InvariantViolation on any escape.
DispersionReport measure_dispersion(const DispersionConfig& config);

// OLS slope of log(max_coeff) against log(n).
double fit_decay_slope(const DispersionReport& report);
double fit_log_log_slope(const std::vector<double>& x, const std::vector<double>& y);

inline constexpr double kBaselProbability = 0.60792710185402662866;  // 6 / pi^2

struct RemarkResult {
  double first_coeff = 0.0;
  double lower_bound = kBaselProbability;
};

// Softmax weight of the first key when logit j is log(1/j^2).
RemarkResult remark_counterexample(std::size_t n);
// first_coeff for every n = 1..n_max from one compensated running sum.
std::vector<double> remark_prefix_coefficients(std::size_t n_max);

// Closed-form multiply-adds of coefficient computation and value aggregation.
std::uint64_t complexity_estimate(Variant variant, std::size_t n, std::size_t d, std::size_t w = 0);

// Runs one forward pass of a variant on (q, k, v).
Tensor run_variant(Variant variant, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t w);
// Multiply-adds reported by the instrumented kernels for one seeded run.
std::uint64_t instrumented_multiply_adds(Variant variant, std::size_t n, std::size_t d, std::size_t w,
                                         std::uint64_t seed);

struct BenchConfig {
  std::vector<Variant> variants = {Variant::kSema, Variant::kSoftmax};
  std::vector<std::size_t> n_values = {256, 512, 1024, 2048, 4096, 8192};
  std::size_t d = 16;
  std::size_t w = 32;
  std::uint64_t seed = 42;
  double min_batch_seconds = 0.02;
  int batches = 3;
};

struct BenchRow {
  Variant variant;
  std::size_t n;
  double seconds;  // best per-call time
  std::uint64_t multiply_adds;
  std::uint64_t analytic_multiply_adds;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::vector<std::pair<Variant, double>> time_exponents;
};

BenchResult run_bench(const BenchConfig& config);

// Worker count from DISPERSION_LAB_THREADS, else hardware concurrency.
unsigned default_threads();

}  // namespace dlab

#endif  // DLAB_ANALYSIS_HPP_
