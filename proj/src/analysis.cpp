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
#include "dlab/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "dlab/errors.hpp"

namespace dlab {

namespace {

struct VariantName {
  Variant variant;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::kSoftmax, "softmax"}, {Variant::kLinear, "linear"}, {Variant::kFocused, "focused"},
    {Variant::kWindow, "window"},   {Variant::kSema, "sema"},     {Variant::kMila, "mila"},
    {Variant::kMix, "mix"},         {Variant::kDifferential, "differential"},
};

// Relative slack for the bound check: the bounds are exact in real arithmetic,
// the computed coefficients carry O(n eps) summation error.
constexpr double kBoundSlack = 1e-10;

template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& e : kVariantNames)
    if (e.variant == v) return e.name;
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (const auto& e : kVariantNames)
    if (name == e.name) return e.variant;
  throw ConfigError("unknown attention variant '" + name + "'");
}

KernelSpec default_kernel(Variant v) {
  switch (v) {
    case Variant::kLinear:
    case Variant::kMila:
      return KernelSpec::linear();
    case Variant::kFocused:
      return KernelSpec::focused(3);
    default:
      return KernelSpec::softmax();
  }
}

Bounds coefficient_bounds(const BoundSpec& spec) {
  if (!(spec.phi_a > 0.0)) throw KernelDomainError("coefficient_bounds: phi(a) must be positive");
  if (!(spec.phi_b >= spec.phi_a)) throw KernelDomainError("coefficient_bounds: phi(b) must be >= phi(a)");
  if (spec.n == 0) throw PreconditionError("coefficient_bounds: n must be positive");
  const double n = static_cast<double>(spec.n);
  if (spec.variant == Variant::kDifferential) {
    const double spread = spec.phi_b / spec.phi_a - spec.phi_a / spec.phi_b;
    return {-spread / n, spread / n};
  }
  return {spec.phi_a / (n * spec.phi_b), spec.phi_b / (n * spec.phi_a)};
}

std::pair<Tensor, Tensor> BoundedSampler::draw(Rng& rng, std::size_t n) const {
  const std::size_t rows = tile ? tile : n;
  if (tile && n % tile != 0) throw WindowPartitionError("sampler tile does not divide n");
  // Rows on spheres of radius sqrt(M) keep every |q.k| <= M.
  const double radius = std::sqrt(logit_bound);
  Tensor q = zero_queries ? Tensor::zeros({rows, d}) : rng.sphere_rows(rows, d, radius);
  Tensor k = rng.sphere_rows(rows, d, radius);
  if (nonnegative) {
    for (auto& x : q.data()) x = std::abs(x);
    for (auto& x : k.data()) x = std::abs(x);
  }
  if (!tile) return {std::move(q), std::move(k)};
  std::vector<Tensor> qs(n / tile, q), ks(n / tile, k);
  return {concat_rows(qs), concat_rows(ks)};
}

namespace {

struct CellResult {
  double max_coeff = 0.0;
  double min_coeff = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::uint64_t checked = 0;
};

// phi extrema over a logit block, as a ratio-safe pair for exp kernels.
std::pair<double, double> phi_extrema(const Tensor& logits, const Normalizer& phi) {
  const auto [lo, hi] = std::minmax_element(logits.data().begin(), logits.data().end());
  if (phi.exponential()) return {phi(*lo - *hi), 1.0};
  double a = std::numeric_limits<double>::infinity(), b = -a;
  for (double x : logits.data()) {
    const double f = phi(x);
    a = std::min(a, f);
    b = std::max(b, f);
  }
  return {a, b};
}

CellResult check_block(const Tensor& logits, const Tensor& coeffs, Variant variant, const Normalizer& phi,
                       std::size_t n_keys) {
  const auto [phi_a, phi_b] = phi_extrema(logits, phi);
  const Bounds b = coefficient_bounds({variant, phi_a, phi_b, n_keys});
  CellResult r;
  r.lower = b.lower;
  r.upper = b.upper;
  const auto [lo, hi] = std::minmax_element(coeffs.data().begin(), coeffs.data().end());
  r.min_coeff = *lo;
  r.max_coeff = *hi;
  if (r.min_coeff < b.lower * (1.0 - kBoundSlack) || r.max_coeff > b.upper * (1.0 + kBoundSlack)) {
    std::ostringstream os;
    os.precision(17);
    os << to_string(variant) << " coefficient outside [" << b.lower << ", " << b.upper << "] at n=" << n_keys
       << ": observed [" << r.min_coeff << ", " << r.max_coeff << "]";
    throw InvariantViolation(os.str());
  }
  r.checked = coeffs.size();
  return r;
}

CellResult run_cell(const DispersionConfig& cfg, std::size_t n, std::size_t trial) {
  // Window cells hold per-window content fixed across n: the stream depends on
  // the trial only and the tile repeats into every window.
  const bool window = cfg.variant == Variant::kWindow;
  Rng rng = Rng::keyed(cfg.seed, "disperse", window ? 0 : n, trial);
  BoundedSampler sampler = cfg.sampler;
  if (cfg.variant == Variant::kFocused) sampler.nonnegative = true;
  if (cfg.variant == Variant::kWindow) {
    sampler.tile = cfg.window;
    WindowSpec{cfg.window}.check(n);
  }
  const auto [q, k] = sampler.draw(rng, n);
  if (cfg.variant != Variant::kWindow) {
    const Tensor logits = featured_logits(q, k, cfg.kernel);
    return check_block(logits, normalize_rows(logits, cfg.kernel), cfg.variant, cfg.kernel.phi, n);
  }
  // Per-window bounds: every window is its own Phi-normalization over w keys.
  const Tensor coeffs = window_coefficients(q, k, WindowSpec{cfg.window}, cfg.kernel);
  CellResult total;
  for (std::size_t b = 0; b < n; b += cfg.window) {
    const Tensor logits = featured_logits(slice_rows(q, b, cfg.window), slice_rows(k, b, cfg.window), cfg.kernel);
    const CellResult r = check_block(logits, slice_rows(coeffs, b, cfg.window), cfg.variant, cfg.kernel.phi, cfg.window);
    if (b == 0) {
      total = r;
    } else {
      total.max_coeff = std::max(total.max_coeff, r.max_coeff);
      total.min_coeff = std::min(total.min_coeff, r.min_coeff);
      total.lower = std::min(total.lower, r.lower);
      total.upper = std::max(total.upper, r.upper);
      total.checked += r.checked;
    }
  }
  return total;
}

}  // namespace

DispersionReport measure_dispersion(const DispersionConfig& config) {
  switch (config.variant) {
    case Variant::kSoftmax:
    case Variant::kLinear:
    case Variant::kFocused:
    case Variant::kWindow:
      break;
    default:
      throw ConfigError("measure_dispersion: variant '" + to_string(config.variant) +
                        "' has no Phi-normalized coefficient matrix");
  }
  config.kernel.validate();
  if (config.trials == 0 || config.n_values.empty()) throw ConfigError("measure_dispersion: empty sweep");
  if (!std::is_sorted(config.n_values.begin(), config.n_values.end())) {
    throw ConfigError("measure_dispersion: n values must be ascending");
  }

  const std::size_t cells = config.n_values.size() * config.trials;
  std::vector<CellResult> results(cells);
  parallel_for(cells, config.threads ? config.threads : default_threads(), [&](std::size_t idx) {
    results[idx] = run_cell(config, config.n_values[idx / config.trials], idx % config.trials);
  });

  DispersionReport report;
  report.variant = config.variant;
  report.n_values = config.n_values;
  report.samples = config.trials;
  report.seed = config.seed;
  for (std::size_t ni = 0; ni < config.n_values.size(); ++ni) {
    const auto first = results.begin() + static_cast<std::ptrdiff_t>(ni * config.trials);
    const auto last = first + static_cast<std::ptrdiff_t>(config.trials);
    double mx = first->max_coeff, mn = first->min_coeff, lo = first->lower, hi = first->upper;
    std::vector<double> maxima;
    for (auto it = first; it != last; ++it) {
      mx = std::max(mx, it->max_coeff);
      mn = std::min(mn, it->min_coeff);
      lo = std::min(lo, it->lower);
      hi = std::max(hi, it->upper);
      maxima.push_back(it->max_coeff);
      report.coefficients_checked += it->checked;
    }
    report.max_coeff.push_back(mx);
    report.min_coeff.push_back(mn);
    report.lower_bound.push_back(lo);
    report.upper_bound.push_back(hi);
    report.median_max_coeff.push_back(median(std::move(maxima)));
  }
  report.slope = fit_decay_slope(report);
  return report;
}

double fit_log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("fit_log_log_slope: series lengths differ");
  if (x.size() < 3) throw PreconditionError("fit_log_log_slope: need at least 3 points");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw PreconditionError("fit_log_log_slope: values must be positive");
  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); })) return 0.0;
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) return 0.0;
  std::vector<double> lx(x.size()), ly(y.size());
  std::transform(x.begin(), x.end(), lx.begin(), [](double v) { return std::log(v); });
  std::transform(y.begin(), y.end(), ly.begin(), [](double v) { return std::log(v); });
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

double fit_decay_slope(const DispersionReport& report) {
  std::vector<double> n(report.n_values.begin(), report.n_values.end());
  return fit_log_log_slope(n, report.max_coeff);
}

RemarkResult remark_counterexample(std::size_t n) {
  if (n == 0) throw PreconditionError("remark_counterexample: n must be positive");
  Tensor logits({n});
  for (std::size_t j = 1; j <= n; ++j) logits[j - 1] = std::log(1.0 / (static_cast<double>(j) * static_cast<double>(j)));
  const Tensor coeffs = phi_normalize(logits, Normalizer::exp());
  return {coeffs[0], kBaselProbability};
}

std::vector<double> remark_prefix_coefficients(std::size_t n_max) {
  std::vector<double> out;
  out.reserve(n_max);
  double s = 0.0, comp = 0.0;  // Kahan
  for (std::size_t j = 1; j <= n_max; ++j) {
    const double jd = static_cast<double>(j);
    const double term = 1.0 / (jd * jd) - comp;
    const double t = s + term;
    comp = (t - s) - term;
    s = t;
    out.push_back(1.0 / s);
  }
  return out;
}

std::uint64_t complexity_estimate(Variant variant, std::size_t n, std::size_t d, std::size_t w) {
  const std::uint64_t N = n, D = d, W = w;
  switch (variant) {
    case Variant::kSoftmax:
    case Variant::kFocused:
      return 2 * N * N * D;
    case Variant::kWindow:
      return 2 * N * W * D;
    case Variant::kMix:
      return N * D;
    case Variant::kSema:
      return 2 * N * W * D + N * D;
    case Variant::kLinear:
    case Variant::kMila:
      return 2 * N * D * D;
    case Variant::kDifferential:
      return 4 * N * N * D;
  }
  return 0;
}

Tensor run_variant(Variant variant, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t w) {
  switch (variant) {
    case Variant::kSoftmax:
      return generalized_attention(q, k, v, KernelSpec::softmax());
    case Variant::kLinear:
      return linear_attention(q, k, v);
    case Variant::kFocused:
      return generalized_attention(q, k, v, KernelSpec::focused(3));
    case Variant::kWindow:
      return window_attention(q, k, v, WindowSpec{w});
    case Variant::kSema:
      return sema_attention(q, k, v, WindowSpec{w});
    case Variant::kMix:
      return homogeneous_mix(v);
    case Variant::kMila: {
      const auto positions = grid_positions(GridSpec::linear(q.rows()));
      return mila_attention(q, k, v, positions, false, GridSpec::linear(q.rows()), DepthwiseKernel::zeros(v.cols(), 1));
    }
    case Variant::kDifferential:
      break;
  }
  throw ConfigError("run_variant: '" + to_string(variant) + "' has no forward implementation");
}

std::uint64_t instrumented_multiply_adds(Variant variant, std::size_t n, std::size_t d, std::size_t w,
                                         std::uint64_t seed) {
  Rng rng = Rng::keyed(seed, "flops", n, d);
  const Tensor q = rng.normal_tensor({n, d}), k = rng.normal_tensor({n, d}), v = rng.normal_tensor({n, d});
  flops::Scope scope;
  run_variant(variant, q, k, v, w);
  return scope.count();
}

BenchResult run_bench(const BenchConfig& config) {
  using Clock = std::chrono::steady_clock;
  BenchResult result;
  for (Variant variant : config.variants) {
    std::vector<double> ns, times;
    for (std::size_t n : config.n_values) {
      Rng rng = Rng::keyed(config.seed, "bench", n, static_cast<std::uint64_t>(variant));
      const Tensor q = rng.normal_tensor({n, config.d}, 0.25), k = rng.normal_tensor({n, config.d}, 0.25),
                   v = rng.normal_tensor({n, config.d});
      std::uint64_t counted = 0;
      {
        flops::Scope scope;
        run_variant(variant, q, k, v, config.w);
        counted = scope.count();
      }
      double best = std::numeric_limits<double>::infinity();
      for (int b = 0; b < config.batches; ++b) {
        std::size_t reps = 0;
        const auto start = Clock::now();
        double elapsed = 0.0;
        do {
          run_variant(variant, q, k, v, config.w);
          ++reps;
          elapsed = std::chrono::duration<double>(Clock::now() - start).count();
        } while (elapsed < config.min_batch_seconds);
        best = std::min(best, elapsed / static_cast<double>(reps));
      }
      result.rows.push_back({variant, n, best, counted, complexity_estimate(variant, n, config.d, config.w)});
      ns.push_back(static_cast<double>(n));
      times.push_back(best);
    }
    result.time_exponents.emplace_back(variant, fit_log_log_slope(ns, times));
  }
  return result;
}

unsigned default_threads() {
  if (const char* env = std::getenv("DISPERSION_LAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace dlab
