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
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dlab/attention.hpp"
#include "dlab/errors.hpp"
#include "dlab/rng.hpp"
#include "dlab/ssm.hpp"

namespace dlab {
namespace {

SsmParams instance(std::uint64_t seed, std::size_t n, std::size_t ds, std::size_t c, bool zero_h0) {
  Rng rng(seed);
  return SsmParams::random(rng, n, ds, c, zero_h0);
}

Tensor injection(const SsmParams& p, const Tensor& x, std::size_t i) {
  Tensor u({p.d_state(), p.channels()});
  for (std::size_t s = 0; s < p.d_state(); ++s)
    for (std::size_t c = 0; c < p.channels(); ++c) u(s, c) = p.b[i][s] * p.delta(i, c) * x(i, c);
  return u;
}

TEST(SsmScanTest, BaseCase) {
  const SsmParams p = instance(1, 1, 3, 2, false);
  const Tensor x = Rng(2).normal_tensor({1, 2});
  const ScanResult r = ssm_scan(p, x);
  EXPECT_LT(max_abs_diff(r.h[0], add(hadamard(p.a_tilde[0], p.h0), injection(p, x, 0))), 1e-15);
}

TEST(SsmScanTest, NoForgettingAccumulates) {
  SsmParams p = instance(3, 5, 3, 2, true);
  for (auto& a : p.a_tilde) a = Tensor::ones(a.shape());
  const Tensor x = Rng(4).normal_tensor({5, 2});
  const ScanResult r = ssm_scan(p, x);
  Tensor acc = Tensor::zeros({3, 2});
  for (std::size_t m = 0; m < 5; ++m) {
    acc = add(acc, injection(p, x, m));
    EXPECT_LT(max_abs_diff(r.h[m], acc), 1e-14);
  }
}

TEST(SsmScanTest, MatchesClosedFormAtEveryPrefix) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SsmParams p = instance(seed, 5, 4, 3, false);
    const Tensor x = Rng(seed + 100).normal_tensor({5, 3});
    const ScanResult r = ssm_scan(p, x);
    for (std::size_t m = 1; m <= 5; ++m) {
      const StepValue c = ssm_closed_form(p, x, m);
      EXPECT_LT(max_abs_diff(c.h, r.h[m - 1]), 1e-12);
      EXPECT_LT(max_abs_diff(c.y, slice_rows(r.y, m - 1, 1)), 1e-12);
    }
  }
}

TEST(SsmScanTest, AppendingTokensKeepsEarlierOutputs) {
  const SsmParams p = instance(5, 8, 3, 2, false);
  const Tensor x = Rng(6).normal_tensor({8, 2});
  SsmParams head = p;
  head.a_tilde.resize(5);
  head.b.resize(5);
  head.c_out.resize(5);
  head.delta = slice_rows(p.delta, 0, 5);
  EXPECT_EQ(slice_rows(ssm_scan(p, x).y, 0, 5), ssm_scan(head, slice_rows(x, 0, 5)).y);
}

TEST(SsmScanTest, ShapeMismatchIsRejected) {
  const SsmParams p = instance(7, 4, 2, 3, true);
  EXPECT_THROW(ssm_scan(p, Tensor({4, 2})), DimensionError);
  SsmParams bad = p;
  bad.a_tilde[1](0, 0) = 1.5;
  EXPECT_THROW(ssm_scan(bad, Tensor({4, 3})), PreconditionError);
}

TEST(SsmClosedFormTest, HomogeneousSolution) {
  const SsmParams p = instance(8, 6, 3, 2, false);
  const Tensor x({6, 2});
  Tensor prod = p.h0;
  for (std::size_t m = 1; m <= 6; ++m) {
    prod = hadamard(p.a_tilde[m - 1], prod);
    EXPECT_LT(max_abs_diff(ssm_closed_form(p, x, m).h, prod), 1e-15);
  }
}

TEST(SsmClosedFormTest, IndexOutOfRange) {
  const SsmParams p = instance(9, 3, 2, 2, true);
  EXPECT_THROW(ssm_closed_form(p, Tensor({3, 2}), 0), DimensionError);
  EXPECT_THROW(ssm_closed_form(p, Tensor({3, 2}), 4), DimensionError);
}

TEST(MambaAttentionTest, FirstStep) {
  const SsmParams p = instance(10, 4, 3, 2, true);
  const Tensor x = Rng(11).normal_tensor({4, 2});
  const Tensor y = mamba_as_attention(p, x);
  const Tensor expected = add(matmul(p.c_out[0], injection(p, x, 0)), hadamard(p.d, slice_rows(x, 0, 1)));
  EXPECT_LT(max_abs_diff(slice_rows(y, 0, 1), expected), 1e-15);
}

TEST(MambaAttentionTest, EqualsScan) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SsmParams p = instance(seed, 6, 4, 3, true);
    const Tensor x = Rng(seed + 50).normal_tensor({6, 3});
    EXPECT_LT(max_abs_diff(mamba_as_attention(p, x), ssm_scan(p, x).y), 1e-12);
  }
}

TEST(MambaAttentionTest, NoForgettingIsUnnormalizedCausalLinear) {
  SsmParams p = instance(12, 5, 3, 2, true);
  for (auto& a : p.a_tilde) a = Tensor::ones(a.shape());
  const Tensor x = Rng(13).normal_tensor({5, 2});
  const Tensor y = mamba_as_attention(p, x);
  for (std::size_t m = 0; m < 5; ++m)
    for (std::size_t c = 0; c < 2; ++c) {
      double expected = p.d[c] * x(m, c);
      for (std::size_t i = 0; i <= m; ++i) {
        double score = 0.0;
        for (std::size_t s = 0; s < 3; ++s) score += p.c_out[m][s] * p.b[i][s];
        expected += score * p.delta(i, c) * x(i, c);
      }
      EXPECT_NEAR(y(m, c), expected, 1e-12);
    }
}

TEST(MambaAttentionTest, RequiresZeroInitialState) {
  const SsmParams p = instance(14, 3, 2, 2, false);
  EXPECT_THROW(mamba_as_attention(p, Tensor({3, 2})), PreconditionError);
}

TEST(MambaAttentionTest, EffectiveKeysDecayGeometrically) {
  SsmParams p = instance(15, 8, 3, 2, true);
  const double rho = 0.7;
  Rng rng(16);
  for (auto& a : p.a_tilde) a = rng.uniform_tensor(a.shape(), 0.1, rho);
  const auto keys = mamba_effective_keys(p, 8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_LE(std::abs(keys[i](s, c)), std::pow(rho, 7.0 - static_cast<double>(i)) * std::abs(p.b[i][s]) + 1e-15);
}

TEST(CausalLinearTest, FirstRowIsFirstValue) {
  Rng rng(17);
  const Tensor q = elu_plus_one(rng.normal_tensor({4, 3})), k = elu_plus_one(rng.normal_tensor({4, 3}));
  const Tensor v = rng.normal_tensor({4, 3});
  EXPECT_LT(max_abs_diff(slice_rows(causal_linear_recursive(q, k, v), 0, 1), slice_rows(v, 0, 1)), 1e-5);
}

TEST(CausalLinearTest, MatchesMaskedQuadraticForm) {
  Rng rng(18);
  const Tensor q = elu_plus_one(rng.normal_tensor({6, 3})), k = elu_plus_one(rng.normal_tensor({6, 3}));
  const Tensor v = rng.normal_tensor({6, 3});
  const Tensor scores = matmul(q, transpose(k));
  Tensor expected({6, 3});
  for (std::size_t i = 0; i < 6; ++i) {
    double den = 1e-6;
    for (std::size_t j = 0; j <= i; ++j) den += scores(i, j);
    for (std::size_t j = 0; j <= i; ++j)
      for (std::size_t c = 0; c < 3; ++c) expected(i, c) += scores(i, j) * v(j, c) / den;
  }
  EXPECT_LT(max_abs_diff(causal_linear_recursive(q, k, v), expected), 1e-10);
}

TEST(CausalLinearTest, EqualKeysGivePrefixMeans) {
  Rng rng(19);
  const Tensor q = elu_plus_one(rng.normal_tensor({5, 3}));
  const Tensor k = broadcast_row(elu_plus_one(rng.normal_tensor({1, 3})), 5);
  const Tensor v = rng.normal_tensor({5, 2});
  const Tensor y = causal_linear_recursive(q, k, v, 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor mean = mean_rows(slice_rows(v, 0, i + 1));
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(y(i, c), mean[c], 1e-12);
  }
}

TEST(CausalLinearTest, CausalAndDegenerate) {
  Rng rng(20);
  const Tensor q = elu_plus_one(rng.normal_tensor({7, 3})), k = elu_plus_one(rng.normal_tensor({7, 3}));
  const Tensor v = rng.normal_tensor({7, 3});
  const Tensor full = causal_linear_recursive(q, k, v);
  const Tensor head = causal_linear_recursive(slice_rows(q, 0, 4), slice_rows(k, 0, 4), slice_rows(v, 0, 4));
  EXPECT_EQ(slice_rows(full, 0, 4), head);
  const Tensor zero({2, 3});
  EXPECT_THROW(causal_linear_recursive(zero, zero, Tensor({2, 3}), 0.0), KernelDomainError);
}

TEST(ForgettingHorizonTest, GeometricDecay) {
  SsmParams p = instance(21, 20, 2, 2, true);
  for (auto& a : p.a_tilde) a = Tensor::full(a.shape(), 0.5);
  const auto h = forgetting_horizon(p, std::ldexp(1.0, -10));
  EXPECT_EQ(h[19], 10u);
  EXPECT_EQ(h[4], 5u);  // capped by the prefix length
}

TEST(ForgettingHorizonTest, NoForgettingReachesTheStart) {
  SsmParams p = instance(22, 9, 2, 2, true);
  for (auto& a : p.a_tilde) a = Tensor::ones(a.shape());
  const auto h = forgetting_horizon(p, 0.5);
  for (std::size_t m = 1; m <= 9; ++m) EXPECT_EQ(h[m - 1], m);
}

TEST(ForgettingHorizonTest, MatchesBruteForceAndIsMonotone) {
  const SsmParams p = instance(23, 12, 3, 2, true);
  const auto loose = forgetting_horizon(p, 0.05);
  const auto tight = forgetting_horizon(p, 0.2);
  for (std::size_t m = 1; m <= 12; ++m) {
    std::size_t best = 0;
    for (std::size_t lag = 1; lag <= m; ++lag) {
      Tensor prod = Tensor::ones({3, 2});
      for (std::size_t j = m - lag + 1; j <= m; ++j) prod = hadamard(prod, p.a_tilde[j - 1]);
      double largest = 0.0;
      for (double v : prod.data()) largest = std::max(largest, v);
      if (largest >= 0.05) best = lag;
    }
    EXPECT_EQ(loose[m - 1], best);
    EXPECT_LE(tight[m - 1], loose[m - 1]);
  }
}

TEST(SsmEquivalenceTest, HundredInstances) {
  const EquivalenceReport r = ssm_equivalence(100, 16, 8, 8, 42);
  EXPECT_EQ(r.instances, 100u);
  EXPECT_LT(r.max_abs_diff(), 1e-12);
  EXPECT_GE(ssm_equivalence(3, 4, 2, 2, 42, 1e-9).max_abs_diff(), 1e-9 * 0.5);
}

}  // namespace
}  // namespace dlab
