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
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dlab/analysis.hpp"
#include "dlab/attention.hpp"
#include "dlab/errors.hpp"
#include "dlab/model.hpp"
#include "dlab/rng.hpp"
#include "dlab/ssm.hpp"
#include "dlab/traced.hpp"

namespace {

using dlab::Variant;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

dlab::DispersionConfig sweep(Variant v) {
  dlab::DispersionConfig cfg;
  cfg.variant = v;
  cfg.kernel = dlab::default_kernel(v);
  cfg.sampler.logit_bound = 1.0;
  cfg.sampler.d = 16;
  cfg.n_values = {64, 128, 256, 512, 1024, 2048, 4096};
  cfg.trials = 32;
  cfg.seed = 42;
  return cfg;
}

// measure_dispersion throws InvariantViolation on the first coefficient
// outside its bounds, so a returned report means full containment.
Outcome dispersion_law(Variant v) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    const dlab::DispersionReport r = dlab::measure_dispersion(sweep(v));
    const double t = seconds_since(t0);
    o.pass = r.slope >= -1.15 && r.slope <= -0.85 && t < 120.0;
    o.detail = "slope=" + fmt("%.4f", r.slope) + " coefficients_in_bounds=" + std::to_string(r.coefficients_checked) +
               " time=" + fmt("%.1fs", t);
  } catch (const dlab::InvariantViolation& e) {
    o.detail = e.what();
  }
  return o;
}

Outcome window_flat() {
  dlab::DispersionConfig cfg = sweep(Variant::kWindow);
  cfg.window = 8;
  const dlab::DispersionReport r = dlab::measure_dispersion(cfg);
  const bool constant =
      std::all_of(r.max_coeff.begin(), r.max_coeff.end(), [&](double m) { return m == r.max_coeff.front(); });
  return {constant && r.slope == 0.0,
          "max_coeff=" + fmt("%.17g", r.max_coeff.front()) + (constant ? " constant" : " varies") +
              " slope=" + fmt("%g", r.slope)};
}

Outcome remark() {
  const std::size_t n_max = 1000000;
  const auto prefix = dlab::remark_prefix_coefficients(n_max);
  const bool above = std::all_of(prefix.begin(), prefix.end(), [](double c) { return c > dlab::kBaselProbability; });
  const double last = dlab::remark_counterexample(n_max).first_coeff;
  const double gap = last - dlab::kBaselProbability;
  return {above && std::abs(gap) < 1e-5,
          std::string(above ? "all n<=1e6 above 6/pi^2" : "dips below 6/pi^2") + " gap_at_1e6=" + fmt("%.3e", gap)};
}

Outcome ssm() {
  const auto t0 = std::chrono::steady_clock::now();
  const dlab::EquivalenceReport r = dlab::ssm_equivalence(100, 16, 8, 8, 42);
  const double t = seconds_since(t0);
  return {r.instances == 100 && r.max_abs_diff() < 1e-12 && t < 30.0,
          "prefixes=" + std::to_string(r.prefixes) + " scan_vs_closed=" + fmt("%.3e", r.scan_vs_closed) +
              " scan_vs_attention=" + fmt("%.3e", r.scan_vs_attention) + " time=" + fmt("%.2fs", t)};
}

Outcome sema_decomposition() {
  double exact = 0.0, residual = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    dlab::Rng rng = dlab::Rng::keyed(42, "accept-sema", i);
    const std::size_t w = 2 + rng.index(7), n = w * (1 + rng.index(8)), d = 1 + rng.index(8);
    const dlab::Tensor q = rng.normal_tensor({n, d}), k = rng.normal_tensor({n, d}), v = rng.normal_tensor({n, d});
    const dlab::Tensor window = dlab::window_attention(q, k, v, dlab::WindowSpec{w});
    const dlab::Tensor sema = dlab::sema_attention(q, k, v, dlab::WindowSpec{w});
    exact = std::max(exact, dlab::max_abs_diff(sema, dlab::add(window, dlab::homogeneous_mix(v))));
    residual = std::max(residual, dlab::max_abs_diff(dlab::sub(sema, window), dlab::homogeneous_mix(v)));
  }

  // Full block pipeline, LePE zeroed, one window covering the sequence.
  double pipeline = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    dlab::Rng rng = dlab::Rng::keyed(42, "accept-pipeline", i);
    const std::size_t n = 4 + rng.index(12), d = 4;
    dlab::SemaAttentionParams p = dlab::SemaAttentionParams::identity(d);
    p.wq = rng.normal_tensor({d, d}, 0.5);
    p.wk = rng.normal_tensor({d, d}, 0.5);
    p.wv = rng.normal_tensor({d, d}, 0.5);
    p.bq = rng.normal_tensor({1, d}, 0.1);
    p.bk = rng.normal_tensor({1, d}, 0.1);
    p.bv = rng.normal_tensor({1, d}, 0.1);
    const dlab::Tensor x = rng.normal_tensor({n, d});
    const dlab::GridSpec grid = dlab::GridSpec::linear(n);
    const auto affine = [&](const dlab::Tensor& w, const dlab::Tensor& b) {
      return dlab::add(dlab::matmul(x, w), dlab::broadcast_row(b, n));
    };
    const dlab::Tensor q = dlab::rope_apply(affine(p.wq, p.bq), grid);
    const dlab::Tensor k = dlab::rope_apply(affine(p.wk, p.bk), grid);
    const dlab::Tensor v = affine(p.wv, p.bv);
    const dlab::Tensor expected = dlab::add(dlab::softmax_attention(q, k, v), dlab::homogeneous_mix(v));
    pipeline = std::max(pipeline, dlab::max_abs_diff(dlab::sema_attention_full(x, p, dlab::WindowSpec{n}, grid), expected));
  }
  return {exact == 0.0 && pipeline < 1e-12,
          "sema-(window+mean) max=" + fmt("%g", exact) + " (sema-window)-mean max=" + fmt("%.2e", residual) +
              " pipeline_vs_softmax+mean=" + fmt("%.2e", pipeline)};
}

Outcome gradchecks() {
  const auto t0 = std::chrono::steady_clock::now();
  bool all = true;
  std::string detail;
  for (Variant v : {Variant::kSoftmax, Variant::kLinear, Variant::kFocused, Variant::kWindow, Variant::kSema,
                    Variant::kMila}) {
    const dlab::ad::GradcheckReport r = dlab::ad::gradcheck_variant(v, 7, 1e-5);
    all = all && r.pass;
    detail += dlab::to_string(v) + "=" + fmt("%.1e", r.max_rel_err) + (r.pass ? " " : "(fail) ");
  }
  const double t = seconds_since(t0);
  return {all && t < 60.0, detail + "time=" + fmt("%.1fs", t)};
}

Outcome complexity() {
  dlab::BenchConfig cfg;
  cfg.variants = {Variant::kSema, Variant::kSoftmax};
  cfg.n_values = {256, 512, 1024, 2048, 4096, 8192};
  cfg.d = 16;
  cfg.w = 32;
  const dlab::BenchResult r = dlab::run_bench(cfg);
  double sema = 0.0, softmax = 0.0;
  for (const auto& [v, e] : r.time_exponents) (v == Variant::kSema ? sema : softmax) = e;
  bool counts = true;
  for (Variant v : {Variant::kSoftmax, Variant::kWindow, Variant::kSema, Variant::kMix, Variant::kLinear})
    counts = counts && dlab::instrumented_multiply_adds(v, 64, 16, 8, 42) == dlab::complexity_estimate(v, 64, 16, 8);
  return {sema >= 0.9 && sema <= 1.3 && softmax >= 1.7 && softmax <= 2.3 && counts,
          "sema_exponent=" + fmt("%.3f", sema) + " softmax_exponent=" + fmt("%.3f", softmax) +
              (counts ? " counts_match_at_64" : " count_mismatch")};
}

Outcome receptive_field() {
  const dlab::SyntheticTask task;
  const dlab::ModelConfig on = task.model_config(true, 42);
  dlab::ModelConfig off = on;
  off.averaging_enabled = false;
  dlab::ModelParams params = dlab::init_params(on);
  dlab::zero_lepe(params);
  const dlab::GridSpec grid = dlab::stage_grids(on).front();
  const std::size_t n = grid.tokens(), w = dlab::stage_window(on, grid);
  const auto window_of = [&](std::size_t t) { return (t / grid.width / w) * (grid.width / w) + (t % grid.width) / w; };
  std::size_t zeros_on = 0, leaks_off = 0, cross = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const dlab::Tensor m_on = dlab::receptive_field_map(on, params, i);
    const dlab::Tensor m_off = dlab::receptive_field_map(off, params, i);
    for (std::size_t j = 0; j < n; ++j) {
      zeros_on += m_on[j] == 0.0;
      if (window_of(i) != window_of(j)) {
        ++cross;
        leaks_off += m_off[j] != 0.0;
      }
    }
  }
  return {zeros_on == 0 && leaks_off == 0,
          "averaging_on zero_entries=" + std::to_string(zeros_on) + "/" + std::to_string(n * n) +
              " averaging_off nonzero_cross_window=" + std::to_string(leaks_off) + "/" + std::to_string(cross)};
}

Outcome ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  const dlab::SyntheticTask task;
  dlab::TrainOptions opts;
  opts.epochs = 30;
  opts.seed = 13;
  const dlab::TrainResult on = dlab::train_toy(task.model_config(true, 13), task, opts);
  const dlab::TrainResult off = dlab::train_toy(task.model_config(false, 13), task, opts);
  double off_max = 0.0;
  for (const auto& m : off.history) off_max = std::max(off_max, m.val_acc);
  const double t = seconds_since(t0);
  return {on.best_val_acc >= 0.9 && off_max <= 0.6 && t < 300.0,
          "on_best=" + fmt("%.4f", on.best_val_acc) + "@" + std::to_string(on.best_epoch) +
              " off_max=" + fmt("%.4f", off_max) + " time=" + fmt("%.1fs", t)};
}

Outcome architecture() {
  const dlab::ModelConfig cfg = dlab::ModelConfig::reference();
  const auto grids = dlab::stage_grids(cfg);
  const std::size_t want[] = {56, 28, 14, 7};
  bool ok = grids.size() == 4;
  std::string sides;
  for (std::size_t s = 0; s < grids.size(); ++s) {
    ok = ok && grids[s].height == want[s] && grids[s].width == want[s];
    sides += std::to_string(grids[s].height) + "x" + std::to_string(grids[s].width) + " ";
  }
  const std::size_t count = dlab::parameter_count(cfg);
  ok = ok && count >= 18'000'000 && count <= 34'000'000;
  return {ok, "grids=" + sides + "params=" + std::to_string(count)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"dispersion law, softmax", [] { return dispersion_law(Variant::kSoftmax); }},
      {"dispersion law, linear", [] { return dispersion_law(Variant::kLinear); }},
      {"window non-dispersion", window_flat},
      {"inverse-square counterexample", remark},
      {"ssm equivalence", ssm},
      {"sema decomposition", sema_decomposition},
      {"gradient checks", gradchecks},
      {"complexity scaling", complexity},
      {"receptive field", receptive_field},
      {"averaging ablation", ablation},
      {"architecture fidelity", architecture},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
