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
#include <numeric>
#include <tuple>
#include <vector>

#include <gtest/gtest.h>

#include "dlab/attention.hpp"
#include "dlab/errors.hpp"
#include "dlab/rng.hpp"

namespace dlab {
namespace {

// Per-element oracle: out_i = sum_l phi(s_il) v_l / sum_j phi(s_ij) with
// s = psi_q(q) psi_k(k)^T, looping over every scalar.
Tensor double_loop(const Tensor& q, const Tensor& k, const Tensor& v, double (*phi)(double),
                   double (*psi)(double)) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  Tensor out({n, v.cols()});
  for (std::size_t i = 0; i < n; ++i) {
    double den = 0.0;
    std::vector<double> w(m);
    for (std::size_t l = 0; l < m; ++l) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += psi(q(i, c)) * psi(k(l, c));
      w[l] = phi(s);
      den += w[l];
    }
    for (std::size_t l = 0; l < m; ++l)
      for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += w[l] * v(l, c) / den;
  }
  return out;
}

double exp_fn(double x) { return std::exp(x); }
double ident(double x) { return x; }
double elu1(double x) { return x > 0.0 ? x + 1.0 : std::exp(x); }

std::vector<double> row_sums(const Tensor& c) {
  std::vector<double> s(c.rows(), 0.0);
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (double v : c.row(i)) s[i] += v;
  return s;
}

// --- phi_normalize ----------------------------------------------------------

TEST(PhiNormalizeTest, ConstantLogitsAreUniform) {
  const Tensor logits = Tensor::vector({0.7, 0.7, 0.7, 0.7});
  for (const auto& phi : {Normalizer::exp(), Normalizer::exp_temperature(0.3), Normalizer::identity(),
                          Normalizer::power(3.0)}) {
    const Tensor p = phi_normalize(logits, phi);
    for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25) << phi.name();
  }
}

TEST(PhiNormalizeTest, InverseSquareLogits) {
  const Tensor logits = Tensor::vector({std::log(1.0), std::log(1.0 / 4.0), std::log(1.0 / 9.0)});
  const Tensor p = phi_normalize(logits, KernelSpec::softmax());
  EXPECT_NEAR(p[0], 36.0 / 49.0, 1e-15);
  EXPECT_NEAR(p[1], 9.0 / 49.0, 1e-15);
  EXPECT_NEAR(p[2], 4.0 / 49.0, 1e-15);
  EXPECT_GT(p[0], 6.0 / (M_PI * M_PI));
}

TEST(PhiNormalizeTest, IdentityIsADirectRatio) {
  const Tensor p = phi_normalize(Tensor::vector({1.0, 3.0}), KernelSpec::linear());
  EXPECT_EQ(p[0], 0.25);
  EXPECT_EQ(p[1], 0.75);
}

TEST(PhiNormalizeTest, NonPositiveDenominatorIsADomainError) {
  EXPECT_THROW(phi_normalize(Tensor::vector({0.0, 0.0}), KernelSpec::linear()), KernelDomainError);
  EXPECT_THROW(phi_normalize(Tensor::vector({-1.0, 0.5}), Normalizer::identity()), KernelDomainError);
}

TEST(KernelSpecTest, ValidationRejectsSignedFeaturesWithIdentityKernel) {
  KernelSpec bad{Normalizer::identity(), FeatureMap::identity(), FeatureMap::identity(), 1e-6};
  EXPECT_THROW(bad.validate(), KernelDomainError);
  EXPECT_THROW(KernelSpec::focused(0).validate(), KernelDomainError);
  EXPECT_THROW(KernelSpec::temperature(0.0).validate(), KernelDomainError);
  EXPECT_NO_THROW(KernelSpec::focused(3).validate());
}

// --- generalized / softmax / linear -----------------------------------------

TEST(GeneralizedAttentionTest, SingleKeyReturnsValue) {
  Rng rng(1);
  const Tensor q = rng.normal_tensor({1, 3}), k = rng.normal_tensor({1, 3}), v = rng.normal_tensor({1, 2});
  for (const auto& kernel : {KernelSpec::softmax(), KernelSpec::linear(), KernelSpec::temperature(2.0)}) {
    EXPECT_LT(max_abs_diff(generalized_attention(q, k, v, kernel), v), 1e-15);
  }
  EXPECT_LT(max_abs_diff(softmax_attention(q, k, v), v), 1e-15);
  EXPECT_LT(max_abs_diff(linear_attention(q, k, v), v), 1e-15);
}

TEST(GeneralizedAttentionTest, ZeroQueriesGiveTheMean) {
  Rng rng(2);
  const Tensor k = rng.normal_tensor({5, 3}), v = rng.normal_tensor({5, 4});
  const Tensor out = generalized_attention(Tensor({5, 3}), k, v, KernelSpec::softmax());
  EXPECT_LT(max_abs_diff(out, homogeneous_mix(v)), 1e-15);
}

TEST(GeneralizedAttentionTest, MatchesDoubleLoopOracle) {
  Rng rng(3);
  const Tensor q = rng.normal_tensor({4, 2}), k = rng.normal_tensor({4, 2}), v = rng.normal_tensor({4, 2});
  EXPECT_LT(max_abs_diff(generalized_attention(q, k, v, KernelSpec::softmax()), double_loop(q, k, v, exp_fn, ident)),
            1e-12);
  EXPECT_LT(max_abs_diff(generalized_attention(q, k, v, KernelSpec::linear()), double_loop(q, k, v, ident, elu1)),
            1e-12);
}

TEST(GeneralizedAttentionTest, SpecializesToSoftmaxAndLinear) {
  Rng rng(4);
  const Tensor q = rng.normal_tensor({6, 3}), k = rng.normal_tensor({6, 3}), v = rng.normal_tensor({6, 3});
  EXPECT_LT(max_abs_diff(generalized_attention(q, k, v, KernelSpec::softmax()), softmax_attention(q, k, v)), 1e-12);
  EXPECT_LT(max_abs_diff(generalized_attention(q, k, v, KernelSpec::linear()), linear_attention(q, k, v)), 1e-12);
}

TEST(GeneralizedAttentionTest, TemperatureDividesLogits) {
  Rng rng(5);
  const Tensor q = rng.normal_tensor({5, 3}), k = rng.normal_tensor({5, 3}), v = rng.normal_tensor({5, 2});
  EXPECT_LT(max_abs_diff(generalized_attention(q, k, v, KernelSpec::temperature(4.0)),
                         softmax_attention(scale(q, 0.25), k, v)),
            1e-12);
}

TEST(SoftmaxAttentionTest, DominantKeySaturates) {
  const Tensor q = Tensor::from_rows({{1.0, 0.0}});
  const Tensor k = Tensor::from_rows({{40.0, 0.0}, {0.0, 1.0}, {5.0, 3.0}});
  const Tensor v = Tensor::from_rows({{1.0, 2.0}, {-3.0, 4.0}, {7.0, 7.0}});
  const Tensor out = softmax_attention(q, k, v);
  EXPECT_NEAR(out(0, 0), 1.0, 1e-10);
  EXPECT_NEAR(out(0, 1), 2.0, 1e-10);
}

TEST(SoftmaxAttentionTest, PermutationEquivariant) {
  Rng rng(6);
  const Tensor q = rng.normal_tensor({6, 3}), k = rng.normal_tensor({6, 3}), v = rng.normal_tensor({6, 2});
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const Tensor permuted = softmax_attention(gather_rows(q, perm), gather_rows(k, perm), gather_rows(v, perm));
  EXPECT_LT(max_abs_diff(permuted, gather_rows(softmax_attention(q, k, v), perm)), 1e-14);
}

TEST(LinearAttentionTest, IdenticalKeysGiveTheMean) {
  Rng rng(7);
  const Tensor q = rng.normal_tensor({5, 3}), v = rng.normal_tensor({5, 2});
  const Tensor k = broadcast_row(rng.normal_tensor({1, 3}), 5);
  EXPECT_LT(max_abs_diff(linear_attention(q, k, v), homogeneous_mix(v)), 1e-14);
}

TEST(LinearAttentionTest, QuadraticAndAssociativeFormsAgree) {
  Rng rng(8);
  const Tensor q = rng.normal_tensor({8, 4}), k = rng.normal_tensor({8, 4}), v = rng.normal_tensor({8, 4});
  EXPECT_LT(max_abs_diff(linear_attention_quadratic(q, k, v), linear_attention(q, k, v)), 1e-10);
}

// --- focused ----------------------------------------------------------------

TEST(FocusedAttentionTest, FeaturesPreserveNorm) {
  Rng rng(9);
  const Tensor x = rng.normal_tensor({20, 6});
  for (int p : {1, 2, 3, 5}) {
    const Tensor f = focus_features(x, p);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double nr = 0.0, nf = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) {
        nr += std::max(x(i, j), 0.0) * std::max(x(i, j), 0.0);
        nf += f(i, j) * f(i, j);
      }
      EXPECT_NEAR(std::sqrt(nf), std::sqrt(nr), 1e-12);
    }
  }
}

TEST(FocusedAttentionTest, FeaturesMatchDefinition) {
  // f_3(x) = (|x| / |x^3|) x^3 on [1, 2]: |x| = sqrt5, |x^3| = sqrt65.
  const Tensor f = focus_features(Tensor::from_rows({{1.0, 2.0, -4.0}}), 3);
  const double r = std::sqrt(5.0) / std::sqrt(65.0);
  EXPECT_NEAR(f[0], r, 1e-15);
  EXPECT_NEAR(f[1], 8.0 * r, 1e-14);
  EXPECT_EQ(f[2], 0.0);
}

TEST(FocusedAttentionTest, ZeroVectorMapsToZero) {
  const Tensor f = focus_features(Tensor::from_rows({{-1.0, 0.0, -3.0}}), 3);
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(FocusedAttentionTest, PowerOneIsIdentityOnNonnegative) {
  Rng rng(10);
  const Tensor x = rng.uniform_tensor({4, 5}, 0.0, 2.0);
  EXPECT_LT(max_abs_diff(focus_features(x, 1), x), 1e-15);
}

TEST(FocusedAttentionTest, ZeroKernelIsolatesTheNormalizedTerm) {
  Rng rng(11);
  const Tensor k = rng.normal_tensor({6, 4}), v = rng.normal_tensor({6, 4});
  const Tensor qp = rng.uniform_tensor({6, 4}, 0.1, 1.0);
  const GridSpec grid = GridSpec::grid(2, 3);
  const Tensor expected = generalized_attention(qp, k, v, KernelSpec::focused(3));
  EXPECT_LT(max_abs_diff(focused_attention(qp, k, v, 3, DepthwiseKernel::zeros(4), grid), expected), 1e-14);
  const DepthwiseKernel dwc = DepthwiseKernel::from_tensor(rng.normal_tensor({4, 3, 3}));
  EXPECT_LT(max_abs_diff(focused_attention(qp, k, v, 3, dwc, grid), add(expected, lepe(v, dwc, grid))), 1e-14);
}

// --- window -----------------------------------------------------------------

TEST(WindowAttentionTest, FullWindowEqualsGeneralized) {
  Rng rng(12);
  const Tensor q = rng.normal_tensor({6, 3}), k = rng.normal_tensor({6, 3}), v = rng.normal_tensor({6, 2});
  EXPECT_EQ(window_attention(q, k, v, WindowSpec{6}), generalized_attention(q, k, v, KernelSpec::softmax()));
}

TEST(WindowAttentionTest, UnitWindowReturnsValues) {
  Rng rng(13);
  const Tensor q = rng.normal_tensor({5, 3}), k = rng.normal_tensor({5, 3}), v = rng.normal_tensor({5, 2});
  EXPECT_LT(max_abs_diff(window_attention(q, k, v, WindowSpec{1}), v), 1e-15);
}

TEST(WindowAttentionTest, MatchesStackedBlockOracle) {
  Rng rng(14);
  const Tensor q = rng.normal_tensor({4, 3}), k = rng.normal_tensor({4, 3}), v = rng.normal_tensor({4, 2});
  const Tensor top = double_loop(slice_rows(q, 0, 2), slice_rows(k, 0, 2), slice_rows(v, 0, 2), exp_fn, ident);
  const Tensor bottom = double_loop(slice_rows(q, 2, 2), slice_rows(k, 2, 2), slice_rows(v, 2, 2), exp_fn, ident);
  const std::vector<Tensor> parts{top, bottom};
  EXPECT_LT(max_abs_diff(window_attention(q, k, v, WindowSpec{2}), concat_rows(parts)), 1e-12);
}

TEST(WindowAttentionTest, IndivisibleLengthIsRejected) {
  const Tensor x({6, 2});
  EXPECT_THROW(window_attention(x, x, x, WindowSpec{4}), WindowPartitionError);
  EXPECT_THROW(window_attention(x, x, x, WindowSpec{2, WindowScheme::kSliding}), WindowPartitionError);
}

TEST(WindowAttentionTest, RowsAreBitIdenticalWhenTheSequenceGrows) {
  Rng rng(15);
  const Tensor q = rng.normal_tensor({8, 3}), k = rng.normal_tensor({8, 3}), v = rng.normal_tensor({8, 2});
  const Tensor base = window_attention(q, k, v, WindowSpec{4});
  const Tensor extra_q = rng.normal_tensor({8, 3}), extra_k = rng.normal_tensor({8, 3}), extra_v = rng.normal_tensor({8, 2});
  const std::vector<Tensor> qs{q, extra_q}, ks{k, extra_k}, vs{v, extra_v};
  const Tensor grown = window_attention(concat_rows(qs), concat_rows(ks), concat_rows(vs), WindowSpec{4});
  EXPECT_EQ(slice_rows(grown, 0, 8), base);
}

TEST(WindowLayoutTest, TilesAreContiguousAndInvertible) {
  const WindowLayout layout = window_layout(GridSpec::grid(4, 6), 2);
  EXPECT_EQ(layout.block, 4u);
  // First tile: (0,0) (0,1) (1,0) (1,1).
  EXPECT_EQ((std::vector<std::size_t>(layout.order.begin(), layout.order.begin() + 4)),
            (std::vector<std::size_t>{0, 1, 6, 7}));
  for (std::size_t i = 0; i < layout.order.size(); ++i) EXPECT_EQ(layout.inverse[layout.order[i]], i);
  EXPECT_THROW(window_layout(GridSpec::grid(4, 6), 4), WindowPartitionError);
}

// --- mixing and SEMA ----------------------------------------------------------

TEST(HomogeneousMixTest, IdenticalRowsUnchanged) {
  const Tensor v = broadcast_row(Tensor::from_rows({{1.5, -2.0}}), 3);
  EXPECT_EQ(homogeneous_mix(v), v);
}

TEST(HomogeneousMixTest, HandArithmetic) {
  EXPECT_EQ(homogeneous_mix(Tensor::from_rows({{1, 0}, {0, 1}})), Tensor::from_rows({{0.5, 0.5}, {0.5, 0.5}}));
}

TEST(HomogeneousMixTest, CenteringSumsToZero) {
  Rng rng(16);
  const Tensor v = rng.normal_tensor({9, 4});
  const Tensor centered = sub(v, homogeneous_mix(v));
  const Tensor sums = sum_rows(centered);
  for (double s : sums.data()) EXPECT_NEAR(s, 0.0, 1e-12);
}

TEST(SemaAttentionTest, ConstantValuesDouble) {
  Rng rng(17);
  const Tensor q = rng.normal_tensor({8, 3}), k = rng.normal_tensor({8, 3});
  const Tensor row = Tensor::from_rows({{0.5, -1.0}});
  const Tensor out = sema_attention(q, k, broadcast_row(row, 8), WindowSpec{4});
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(out(i, 0), 1.0, 1e-15);
    EXPECT_NEAR(out(i, 1), -2.0, 1e-15);
  }
}

TEST(SemaAttentionTest, FullWindowIsSoftmaxPlusMean) {
  Rng rng(18);
  const Tensor q = rng.normal_tensor({6, 3}), k = rng.normal_tensor({6, 3}), v = rng.normal_tensor({6, 2});
  EXPECT_LT(max_abs_diff(sema_attention(q, k, v, WindowSpec{6}), add(softmax_attention(q, k, v), homogeneous_mix(v))),
            1e-12);
}

TEST(SemaAttentionTest, ExactDecomposition) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = Rng::keyed(seed, "sema");
    const Tensor q = rng.normal_tensor({8, 3}), k = rng.normal_tensor({8, 3}), v = rng.normal_tensor({8, 3});
    const Tensor window = window_attention(q, k, v, WindowSpec{4});
    const Tensor sema = sema_attention(q, k, v, WindowSpec{4});
    EXPECT_EQ(max_abs_diff(sema, add(window, homogeneous_mix(v))), 0.0);
    const Tensor diff = sub(sema, window);
    const Tensor mean = mean_rows(v);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(diff(i, c), mean[c], 1e-12);
  }
}

SemaAttentionParams random_params(Rng& rng, std::size_t d, std::size_t heads) {
  SemaAttentionParams p;
  p.wq = rng.normal_tensor({d, d}, 0.5);
  p.wk = rng.normal_tensor({d, d}, 0.5);
  p.wv = rng.normal_tensor({d, d}, 0.5);
  p.bq = rng.normal_tensor({1, d}, 0.1);
  p.bk = rng.normal_tensor({1, d}, 0.1);
  p.bv = rng.normal_tensor({1, d}, 0.1);
  p.lepe = DepthwiseKernel::zeros(d);
  p.heads = heads;
  return p;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), broadcast_row(b, x.rows()));
}

TEST(SemaAttentionFullTest, FullWindowWithoutLepeIsSoftmaxPlusMean) {
  Rng rng(19);
  const std::size_t n = 6, d = 4;
  const Tensor x = rng.normal_tensor({n, d});
  const SemaAttentionParams p = random_params(rng, d, 1);
  const GridSpec grid = GridSpec::linear(n);
  const Tensor q = rope_apply(affine(x, p.wq, p.bq), grid);
  const Tensor k = rope_apply(affine(x, p.wk, p.bk), grid);
  const Tensor v = affine(x, p.wv, p.bv);
  const Tensor expected = add(softmax_attention(q, k, v), homogeneous_mix(v));
  EXPECT_LT(max_abs_diff(sema_attention_full(x, p, WindowSpec{n}, grid), expected), 1e-12);
}

TEST(SemaAttentionFullTest, IdentityProjectionsReduceToSema) {
  Rng rng(20);
  const Tensor x = rng.normal_tensor({8, 4});
  const GridSpec grid = GridSpec::linear(8);
  const Tensor r = rope_apply(x, grid);
  EXPECT_LT(max_abs_diff(sema_attention_full(x, SemaAttentionParams::identity(4), WindowSpec{4}, grid),
                         sema_attention(r, r, x, WindowSpec{4})),
            1e-12);
}

TEST(SemaAttentionFullTest, TwoDimensionalTilesMatchPerTileOracle) {
  Rng rng(21);
  const GridSpec grid = GridSpec::grid(4, 4);
  const std::size_t d = 8, hd = 4;
  const Tensor x = rng.normal_tensor({16, d});
  SemaAttentionParams p = random_params(rng, d, 2);
  p.lepe = DepthwiseKernel::from_tensor(rng.normal_tensor({d, 3, 3}));
  p.qk_scale = 0.7;
  const Tensor q = affine(x, p.wq, p.bq), k = affine(x, p.wk, p.bk), v = affine(x, p.wv, p.bv);
  const auto pos = grid_positions(grid);

  Tensor expected({16, d});
  for (std::size_t h = 0; h < 2; ++h) {
    const Tensor qh = scale(rope_apply(slice_cols(q, hd * h, hd), pos, true), 0.7);
    const Tensor kh = rope_apply(slice_cols(k, hd * h, hd), pos, true);
    const Tensor vh = slice_cols(v, hd * h, hd);
    for (std::size_t tr = 0; tr < 2; ++tr)
      for (std::size_t tc = 0; tc < 2; ++tc) {
        std::vector<std::size_t> idx;
        for (std::size_t r = 0; r < 2; ++r)
          for (std::size_t c = 0; c < 2; ++c) idx.push_back((2 * tr + r) * 4 + 2 * tc + c);
        const Tensor o = double_loop(gather_rows(qh, idx), gather_rows(kh, idx), gather_rows(vh, idx), exp_fn, ident);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t c = 0; c < hd; ++c) expected(idx[i], hd * h + c) = o(i, c);
      }
  }
  expected = add(add(expected, lepe(v, p.lepe, grid)), homogeneous_mix(v));
  const Tensor out = sema_attention_full(x, p, WindowSpec{2}, grid);
  EXPECT_EQ(out.shape(), x.shape());
  EXPECT_LT(max_abs_diff(out, expected), 1e-12);
}

TEST(SemaAttentionFullTest, RopeOnValuesRotatesTheWindowTerm) {
  Rng rng(22);
  const GridSpec grid = GridSpec::linear(4);
  const Tensor x = rng.normal_tensor({4, 2});
  SemaAttentionParams p = SemaAttentionParams::identity(2);
  p.averaging = false;
  const Tensor plain = sema_attention_full(x, p, WindowSpec{4}, grid);
  p.rope_on_values = true;
  const Tensor rotated = sema_attention_full(x, p, WindowSpec{4}, grid);
  const Tensor r = rope_apply(x, grid);
  EXPECT_LT(max_abs_diff(plain, softmax_attention(r, r, x)), 1e-12);
  EXPECT_LT(max_abs_diff(rotated, softmax_attention(r, r, r)), 1e-12);
}

TEST(SemaAttentionFullTest, ShapeContract) {
  Rng rng(23);
  for (const auto& [n, d, w, heads] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>{
           {4, 2, 2, 1}, {12, 8, 3, 2}, {16, 4, 16, 2}}) {
    SemaAttentionParams p = random_params(rng, d, heads);
    const Tensor x = rng.normal_tensor({n, d});
    EXPECT_EQ(sema_attention_full(x, p, WindowSpec{w}, GridSpec::linear(n)).shape(), x.shape());
  }
}

// --- MILA ---------------------------------------------------------------------

// The gated numerator and ungated denominator written out per element.
Tensor mila_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<double>& pos) {
  const std::size_t n = q.rows(), d = q.cols();
  const auto gate = [&](const Tensor& x, std::size_t i) {
    std::vector<double> f(d), g(d);
    for (std::size_t c = 0; c < d; ++c) f[c] = elu1(x(i, c));
    for (std::size_t t = 0; t < d / 2; ++t) {
      const double th = pos[i] * std::pow(10000.0, -2.0 * static_cast<double>(t) / static_cast<double>(d));
      g[2 * t] = f[2 * t] * std::cos(th) - f[2 * t + 1] * std::sin(th);
      g[2 * t + 1] = f[2 * t] * std::sin(th) + f[2 * t + 1] * std::cos(th);
    }
    return std::make_pair(f, g);
  };
  Tensor out({n, v.cols()});
  for (std::size_t i = 0; i < n; ++i) {
    const auto [fq, gq] = gate(q, i);
    double den = kMilaEpsilon;
    for (std::size_t j = 0; j < n; ++j) {
      const auto [fk, gk] = gate(k, j);
      double num = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        num += gq[c] * gk[c];
        den += fq[c] * fk[c];
      }
      for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += num * v(j, c);
    }
    for (auto& o : out.row(i)) o /= den;
  }
  return out;
}

TEST(MilaAttentionTest, MatchesPerElementOracle) {
  Rng rng(24);
  const Tensor q = rng.normal_tensor({6, 4}), k = rng.normal_tensor({6, 4}), v = rng.normal_tensor({6, 4});
  const DepthwiseKernel zero = DepthwiseKernel::zeros(4);
  EXPECT_LT(max_abs_diff(mila_attention(q, k, v, GridSpec::linear(6), zero), mila_oracle(q, k, v, {0, 1, 2, 3, 4, 5})),
            1e-12);
}

TEST(MilaAttentionTest, ZeroRotationIsLinearAttention) {
  Rng rng(25);
  const Tensor q = rng.normal_tensor({6, 4}), k = rng.normal_tensor({6, 4}), v = rng.normal_tensor({6, 4});
  const std::vector<TokenPosition> origin(6);
  const Tensor out = mila_attention(q, k, v, origin, false, GridSpec::linear(6), DepthwiseKernel::zeros(4));
  EXPECT_LT(max_abs_diff(out, linear_attention(q, k, v)), 1e-6);
}

TEST(MilaAttentionTest, SingleTokenReturnsValueUpToEpsilon) {
  Rng rng(26);
  const Tensor q = rng.normal_tensor({1, 4}), k = rng.normal_tensor({1, 4}), v = rng.normal_tensor({1, 4});
  EXPECT_LT(max_abs_diff(mila_attention(q, k, v, GridSpec::linear(1), DepthwiseKernel::zeros(4)), v), 1e-5);
}

TEST(MilaAttentionTest, LepeTermIsAdded) {
  Rng rng(27);
  const Tensor q = rng.normal_tensor({6, 2}), k = rng.normal_tensor({6, 2}), v = rng.normal_tensor({6, 2});
  const GridSpec grid = GridSpec::grid(2, 3);
  const DepthwiseKernel dwc = DepthwiseKernel::from_tensor(rng.normal_tensor({2, 3, 3}));
  const Tensor base = mila_attention(q, k, v, grid, DepthwiseKernel::zeros(2));
  EXPECT_LT(max_abs_diff(mila_attention(q, k, v, grid, dwc), add(base, lepe(v, dwc, grid))), 1e-14);
}

// --- coefficient rows ---------------------------------------------------------

TEST(CoefficientTest, NormalizedVariantsLieOnTheSimplex) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = Rng::keyed(seed, "simplex");
    const Tensor q = rng.normal_tensor({8, 4}, 2.0), k = rng.normal_tensor({8, 4}, 2.0);
    std::vector<Tensor> coeffs{softmax_coefficients(q, k), linear_coefficients(q, k),
                               focused_coefficients(rng.uniform_tensor({8, 4}, 0.05, 1.0), k, 3),
                               window_coefficients(q, k, WindowSpec{4})};
    for (const auto& c : coeffs) {
      for (double v : c.data()) EXPECT_GE(v, 0.0);
      for (double s : row_sums(c)) EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(CoefficientTest, CoefficientsReproduceOutputs) {
  Rng rng(28);
  const Tensor q = rng.normal_tensor({8, 4}), k = rng.normal_tensor({8, 4}), v = rng.normal_tensor({8, 3});
  EXPECT_LT(max_abs_diff(matmul(softmax_coefficients(q, k), v), softmax_attention(q, k, v)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul(linear_coefficients(q, k), v), linear_attention(q, k, v)), 1e-12);
  const auto pos = grid_positions(GridSpec::linear(8));
  EXPECT_LT(max_abs_diff(matmul(mila_coefficients(q, k, pos, false), v),
                         mila_attention(q, k, v, GridSpec::linear(8), DepthwiseKernel::zeros(3))),
            1e-12);
}

TEST(CoefficientTest, MilaRowsSumToOneWithoutRotation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = Rng::keyed(seed, "mila");
    const Tensor q = rng.sphere_rows(12, 8, 10.0 * rng.uniform()), k = rng.sphere_rows(12, 8, 10.0 * rng.uniform());
    const std::vector<TokenPosition> origin(12);
    for (double s : row_sums(mila_coefficients(q, k, origin, false))) {
      EXPECT_GE(s, 1.0 - 1e-3);
      EXPECT_LE(s, 1.0 + 1e-3);
    }
  }
}

TEST(CoefficientTest, RotationMovesMilaRowsOffTheSimplex) {
  // The gated numerator is not normalized by its own sum, so with distinct
  // positions rows drift far from 1.
  Rng rng(29);
  const Tensor q = rng.sphere_rows(16, 8, 5.0), k = rng.sphere_rows(16, 8, 5.0);
  const auto pos = grid_positions(GridSpec::linear(16));
  double worst = 0.0;
  for (double s : row_sums(mila_coefficients(q, k, pos, false))) worst = std::max(worst, std::abs(s - 1.0));
  EXPECT_GT(worst, 1e-3);
}

}  // namespace
}  // namespace dlab
