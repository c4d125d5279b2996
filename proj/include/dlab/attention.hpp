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
#ifndef DLAB_ATTENTION_HPP_
#define DLAB_ATTENTION_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dlab/posenc.hpp"
#include "dlab/tensor.hpp"

namespace dlab {

// The scalar kernel phi of a Phi-normalized attention.
enum class NormalizerKind { kExp, kExpTemperature, kIdentity, kPower };

struct Normalizer {
  NormalizerKind kind = NormalizerKind::kExp;
  double theta = 1.0;  // temperature, kExpTemperature only
  double p = 1.0;      // exponent, kPower only

  static Normalizer exp() { return {}; }
  static Normalizer exp_temperature(double theta) { return {NormalizerKind::kExpTemperature, theta, 1.0}; }
  static Normalizer identity() { return {NormalizerKind::kIdentity, 1.0, 1.0}; }
  static Normalizer power(double p) { return {NormalizerKind::kPower, 1.0, p}; }

  double operator()(double x) const;
  // exp-family kernels are shift-equivariant, so rows may subtract their max.
  bool exponential() const { return kind == NormalizerKind::kExp || kind == NormalizerKind::kExpTemperature; }
  void validate() const;
  std::string name() const;
  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

enum class FeatureKind { kIdentity, kEluPlusOne, kFocused };

// Row-wise feature map psi applied to queries or keys.
struct FeatureMap {
  FeatureKind kind = FeatureKind::kIdentity;
  int p = 3;  // kFocused only

  static FeatureMap identity() { return {}; }
  static FeatureMap elu_plus_one() { return {FeatureKind::kEluPlusOne, 3}; }
  static FeatureMap focused(int p) { return {FeatureKind::kFocused, p}; }

  Tensor apply(const Tensor& x) const;
  bool nonnegative() const { return kind != FeatureKind::kIdentity; }
  void validate() const;
  std::string name() const;
  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

struct KernelSpec {
  Normalizer phi;
  FeatureMap psi_q;
  FeatureMap psi_k;
  // Denominators must exceed epsilon. Only MILA and the causal recursion add
  // it to the denominator; everywhere else it is a floor.
  double epsilon = 1e-6;

  static KernelSpec softmax() { return {}; }
  static KernelSpec temperature(double theta) { return {Normalizer::exp_temperature(theta), {}, {}, 1e-6}; }
  static KernelSpec linear() {
    return {Normalizer::identity(), FeatureMap::elu_plus_one(), FeatureMap::elu_plus_one(), 1e-6};
  }
  static KernelSpec focused(int p) {
    return {Normalizer::identity(), FeatureMap::focused(p), FeatureMap::focused(p), 1e-6};
  }

  // Rejects identity/power kernels paired with a feature map that can go
  // negative, and out-of-range parameters.
  void validate() const;
  friend bool operator==(const KernelSpec&, const KernelSpec&) = default;
};

enum class WindowScheme { kBlocked, kSliding, kDilated };

struct WindowSpec {
  std::size_t w = 7;
  WindowScheme scheme = WindowScheme::kBlocked;

  // Throws WindowPartitionError unless w divides n (blocked scheme only).
  void check(std::size_t n) const;
  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

// Row permutation that makes every window contiguous. For a 1-D grid this is
// the identity with blocks of w; for a 2-D grid the windows are w x w tiles
// visited row-major, tokens inside a tile row-major, giving blocks of w*w.
struct WindowLayout {
  std::vector<std::size_t> order;    // order[new] = old
  std::vector<std::size_t> inverse;  // inverse[old] = new
  std::size_t block = 0;
};
WindowLayout window_layout(const GridSpec& grid, std::size_t w);

Tensor elu_plus_one(const Tensor& x);
// f_p(relu(x)) row-wise, f_p(x) = (|x| / |x^p|) x^p, with f_p(0) = 0.
Tensor focus_features(const Tensor& x, int p);

Tensor phi_normalize(const Tensor& logits, const Normalizer& phi, double floor = 0.0);
Tensor phi_normalize(const Tensor& logits, const KernelSpec& kernel);
// phi_normalize applied to every row of a logit matrix.
Tensor normalize_rows(const Tensor& logits, const KernelSpec& kernel);

// psi_q(q) psi_k(k)^T, the logits a Phi-normalized attention normalizes.
Tensor featured_logits(const Tensor& q, const Tensor& k, const KernelSpec& kernel);

Tensor generalized_attention(const Tensor& q, const Tensor& k, const Tensor& v, const KernelSpec& kernel);
Tensor generalized_coefficients(const Tensor& q, const Tensor& k, const KernelSpec& kernel);

// Matrix route: softmax_rows(q k^T) v.
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor softmax_coefficients(const Tensor& q, const Tensor& k);

// Associative O(n d^2) form: psi(Q) (psi(K)^T V) / psi(Q) sum_j psi(k_j).
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Same map through the quadratic Phi-normalized route.
Tensor linear_attention_quadratic(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor linear_coefficients(const Tensor& q, const Tensor& k);

Tensor focused_attention(const Tensor& q, const Tensor& k, const Tensor& v, int p, const DepthwiseKernel& dwc,
                         const GridSpec& grid);
Tensor focused_coefficients(const Tensor& q, const Tensor& k, int p);

Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& win,
                        const KernelSpec& kernel = KernelSpec::softmax());
// n x w: row i holds the weights of query i over its window J(i).
Tensor window_coefficients(const Tensor& q, const Tensor& k, const WindowSpec& win,
                           const KernelSpec& kernel = KernelSpec::softmax());

Tensor homogeneous_mix(const Tensor& v);

// Blocked softmax window attention plus homogeneous mixing.
Tensor sema_attention(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& win);

// Parameters of the full SEMA attention: x -> (Q, K, V) projections, LePE.
struct SemaAttentionParams {
  Tensor wq, wk, wv;  // d_model x d_model, applied as x W
  Tensor bq, bk, bv;  // 1 x d_model
  DepthwiseKernel lepe;
  std::size_t heads = 1;
  double qk_scale = 1.0;
  bool rope_on_values = false;
  bool averaging = true;

  static SemaAttentionParams identity(std::size_t d_model);
  std::size_t d_model() const { return wq.rows(); }
  void validate() const;
};

// Project, window, rotate Q and K, windowed softmax attention per head, then
// add LePE(V) and the sequence mean of V.
Tensor sema_attention_full(const Tensor& x, const SemaAttentionParams& params, const WindowSpec& win,
                           const GridSpec& grid);

inline constexpr double kMilaEpsilon = 1e-6;

// RoPE-gated linear attention numerator over an un-gated denominator plus
// epsilon, plus LePE(v).
Tensor mila_attention(const Tensor& q, const Tensor& k, const Tensor& v, const GridSpec& grid,
                      const DepthwiseKernel& lepe_kernel, double epsilon = kMilaEpsilon);
Tensor mila_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const TokenPosition> positions,
                      bool planar, const GridSpec& grid, const DepthwiseKernel& lepe_kernel,
                      double epsilon = kMilaEpsilon);
Tensor mila_coefficients(const Tensor& q, const Tensor& k, std::span<const TokenPosition> positions, bool planar,
                         double epsilon = kMilaEpsilon);

}  // namespace dlab

#endif  // DLAB_ATTENTION_HPP_
