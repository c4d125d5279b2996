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
#include "dlab/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dlab/errors.hpp"

namespace dlab {

double Normalizer::operator()(double x) const {
  switch (kind) {
    case NormalizerKind::kExp:
      return std::exp(x);
    case NormalizerKind::kExpTemperature:
      return std::exp(x / theta);
    case NormalizerKind::kIdentity:
      return x;
    case NormalizerKind::kPower:
      return std::pow(x, p);
  }
  return x;
}

void Normalizer::validate() const {
  if (kind == NormalizerKind::kExpTemperature && !(theta > 0.0)) {
    throw KernelDomainError("temperature must be positive, got " + std::to_string(theta));
  }
  if (kind == NormalizerKind::kPower && !(p >= 1.0)) {
    throw KernelDomainError("power kernel needs p >= 1, got " + std::to_string(p));
  }
}

std::string Normalizer::name() const {
  switch (kind) {
    case NormalizerKind::kExp:
      return "exp";
    case NormalizerKind::kExpTemperature:
      return "exp_temperature";
    case NormalizerKind::kIdentity:
      return "identity";
    case NormalizerKind::kPower:
      return "power";
  }
  return "?";
}

Tensor FeatureMap::apply(const Tensor& x) const {
  switch (kind) {
    case FeatureKind::kIdentity:
      return x;
    case FeatureKind::kEluPlusOne:
      return dlab::elu_plus_one(x);
    case FeatureKind::kFocused:
      return focus_features(x, p);
  }
  return x;
}

void FeatureMap::validate() const {
  if (kind == FeatureKind::kFocused && p < 1) {
    throw KernelDomainError("focused feature map needs p >= 1, got " + std::to_string(p));
  }
}

std::string FeatureMap::name() const {
  switch (kind) {
    case FeatureKind::kIdentity:
      return "identity";
    case FeatureKind::kEluPlusOne:
      return "elu_plus_one";
    case FeatureKind::kFocused:
      return "focused";
  }
  return "?";
}

void KernelSpec::validate() const {
  phi.validate();
  psi_q.validate();
  psi_k.validate();
  if (!(epsilon >= 0.0)) throw KernelDomainError("epsilon must be non-negative");
  if (!phi.exponential() && !(psi_q.nonnegative() && psi_k.nonnegative())) {
    throw KernelDomainError("kernel " + phi.name() + " needs non-negative feature maps, got " + psi_q.name() + "/" +
                            psi_k.name());
  }
}

void WindowSpec::check(std::size_t n) const {
  if (scheme != WindowScheme::kBlocked) throw WindowPartitionError("only the blocked window scheme is implemented");
  if (w == 0 || n % w != 0) {
    throw WindowPartitionError("window size " + std::to_string(w) + " does not divide " + std::to_string(n) +
                               " tokens");
  }
}

WindowLayout window_layout(const GridSpec& grid, std::size_t w) {
  WindowLayout layout;
  const std::size_t n = grid.tokens();
  layout.order.resize(n);
  layout.inverse.resize(n);
  if (!grid.planar) {
    WindowSpec{w}.check(n);
    for (std::size_t i = 0; i < n; ++i) layout.order[i] = layout.inverse[i] = i;
    layout.block = w;
    return layout;
  }
  if (w == 0 || grid.height % w != 0 || grid.width % w != 0) {
    throw WindowPartitionError("window " + std::to_string(w) + "x" + std::to_string(w) + " does not tile grid " +
                               std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  std::size_t next = 0;
  for (std::size_t wr = 0; wr < grid.height / w; ++wr)
    for (std::size_t wc = 0; wc < grid.width / w; ++wc)
      for (std::size_t r = 0; r < w; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const std::size_t old = (wr * w + r) * grid.width + wc * w + c;
          layout.order[next] = old;
          layout.inverse[old] = next;
          ++next;
        }
  layout.block = w * w;
  return layout;
}

Tensor elu_plus_one(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] + 1.0 : std::exp(x[i]);
  return out;
}

Tensor focus_features(const Tensor& x, int p) {
  require_matrix(x, "focus_features");
  if (p < 1) throw KernelDomainError("focused feature map needs p >= 1");
  Tensor out(x.shape());
  std::vector<double> r(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    double mx = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      r[j] = std::max(in[j], 0.0);
      mx = std::max(mx, r[j]);
    }
    if (mx == 0.0) continue;  // f_p(0) = 0
    // f_p is positively homogeneous of degree one; rescale before powering.
    double norm_r = 0.0, norm_pw = 0.0;
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double s = r[j] / mx;
      norm_r += s * s;
      o[j] = std::pow(s, p);
      norm_pw += o[j] * o[j];
    }
    const double ratio = mx * std::sqrt(norm_r) / std::sqrt(norm_pw);
    for (auto& val : o) val *= ratio;
  }
  return out;
}

namespace {

// Writes phi(x)/sum phi(x) into out; returns the denominator.
double normalize_into(std::span<const double> logits, std::span<double> out, const Normalizer& phi, double floor) {
  double shift = 0.0;
  if (phi.exponential()) shift = *std::max_element(logits.begin(), logits.end());
  double den = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double w = phi(logits[j] - shift);
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw KernelDomainError("kernel " + phi.name() + " is not positive at logit " + std::to_string(logits[j]));
    }
    out[j] = w;
    den += w;
  }
  if (!(den > floor)) {
    throw KernelDomainError("normalizer denominator " + std::to_string(den) + " is not above " + std::to_string(floor));
  }
  for (auto& w : out) w /= den;
  return den;
}

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* what) {
  require_matrix(q, what);
  require_matrix(k, what);
  require_matrix(v, what);
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError(std::string(what) + ": incompatible q/k/v shapes " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor column_sums(const Tensor& a) {
  Tensor z({a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) z[j] += a(i, j);
  return z;
}

}  // namespace

Tensor phi_normalize(const Tensor& logits, const Normalizer& phi, double floor) {
  phi.validate();
  Tensor out(logits.shape());
  normalize_into(logits.data(), out.data(), phi, floor);
  return out;
}

Tensor phi_normalize(const Tensor& logits, const KernelSpec& kernel) {
  return phi_normalize(logits, kernel.phi, kernel.epsilon);
}

Tensor featured_logits(const Tensor& q, const Tensor& k, const KernelSpec& kernel) {
  kernel.validate();
  require_matrix(q, "featured_logits");
  require_matrix(k, "featured_logits");
  return matmul(kernel.psi_q.apply(q), transpose(kernel.psi_k.apply(k)));
}

Tensor generalized_attention(const Tensor& q, const Tensor& k, const Tensor& v, const KernelSpec& kernel) {
  check_qkv(q, k, v, "generalized_attention");
  kernel.validate();
  const Tensor fq = kernel.psi_q.apply(q);
  const Tensor fk = kernel.psi_k.apply(k);
  const std::size_t n = k.rows(), dv = v.cols();
  Tensor out({q.rows(), dv});
  std::vector<double> logits(n);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto qi = fq.row(i);
    for (std::size_t j = 0; j < n; ++j) logits[j] = dot(qi, fk.row(j));
    const double shift = kernel.phi.exponential() ? *std::max_element(logits.begin(), logits.end()) : 0.0;
    double den = 0.0;
    auto oi = out.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = kernel.phi(logits[j] - shift);
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw KernelDomainError("kernel " + kernel.phi.name() + " is not positive at logit " +
                                std::to_string(logits[j]));
      }
      den += w;
      const auto vj = v.row(j);
      for (std::size_t c = 0; c < dv; ++c) oi[c] += w * vj[c];
    }
    if (!(den > kernel.epsilon)) {
      throw KernelDomainError("attention denominator " + std::to_string(den) + " is not above epsilon");
    }
    for (auto& o : oi) o /= den;
  }
  flops::add(static_cast<std::uint64_t>(q.rows()) * n * (fq.cols() + dv));
  return out;
}

Tensor generalized_coefficients(const Tensor& q, const Tensor& k, const KernelSpec& kernel) {
  return normalize_rows(featured_logits(q, k, kernel), kernel);
}

Tensor normalize_rows(const Tensor& logits, const KernelSpec& kernel) {
  require_matrix(logits, "normalize_rows");
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < logits.rows(); ++i) normalize_into(logits.row(i), out.row(i), kernel.phi, kernel.epsilon);
  return out;
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "softmax_attention");
  return matmul(softmax_rows(matmul(q, transpose(k))), v);
}

Tensor softmax_coefficients(const Tensor& q, const Tensor& k) { return softmax_rows(matmul(q, transpose(k))); }

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "linear_attention");
  const KernelSpec kernel = KernelSpec::linear();
  const Tensor fq = elu_plus_one(q);
  const Tensor fk = elu_plus_one(k);
  const Tensor kv = matmul(transpose(fk), v);
  Tensor out = matmul(fq, kv);
  const Tensor z = column_sums(fk);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double den = dot(fq.row(i), z.data());
    if (!(den > kernel.epsilon)) throw KernelDomainError("linear attention denominator underflowed epsilon");
    for (auto& o : out.row(i)) o /= den;
  }
  return out;
}

Tensor linear_attention_quadratic(const Tensor& q, const Tensor& k, const Tensor& v) {
  return generalized_attention(q, k, v, KernelSpec::linear());
}

Tensor linear_coefficients(const Tensor& q, const Tensor& k) {
  return generalized_coefficients(q, k, KernelSpec::linear());
}

Tensor focused_attention(const Tensor& q, const Tensor& k, const Tensor& v, int p, const DepthwiseKernel& dwc,
                         const GridSpec& grid) {
  const Tensor local = lepe(v, dwc, grid);
  return add(generalized_attention(q, k, v, KernelSpec::focused(p)), local);
}

Tensor focused_coefficients(const Tensor& q, const Tensor& k, int p) {
  return generalized_coefficients(q, k, KernelSpec::focused(p));
}

Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& win,
                        const KernelSpec& kernel) {
  check_qkv(q, k, v, "window_attention");
  if (q.rows() != k.rows()) throw DimensionError("window_attention: self-attention requires as many queries as keys");
  win.check(q.rows());
  std::vector<Tensor> blocks;
  blocks.reserve(q.rows() / win.w);
  for (std::size_t b = 0; b < q.rows(); b += win.w) {
    blocks.push_back(generalized_attention(slice_rows(q, b, win.w), slice_rows(k, b, win.w), slice_rows(v, b, win.w),
                                           kernel));
  }
  return concat_rows(blocks);
}

Tensor window_coefficients(const Tensor& q, const Tensor& k, const WindowSpec& win, const KernelSpec& kernel) {
  require_matrix(q, "window_coefficients");
  require_matrix(k, "window_coefficients");
  if (q.rows() != k.rows()) throw DimensionError("window_coefficients: query/key counts differ");
  win.check(q.rows());
  std::vector<Tensor> blocks;
  for (std::size_t b = 0; b < q.rows(); b += win.w) {
    blocks.push_back(generalized_coefficients(slice_rows(q, b, win.w), slice_rows(k, b, win.w), kernel));
  }
  return concat_rows(blocks);
}

Tensor homogeneous_mix(const Tensor& v) { return broadcast_row(mean_rows(v), v.rows()); }

Tensor sema_attention(const Tensor& q, const Tensor& k, const Tensor& v, const WindowSpec& win) {
  return add(window_attention(q, k, v, win, KernelSpec::softmax()), homogeneous_mix(v));
}

SemaAttentionParams SemaAttentionParams::identity(std::size_t d_model) {
  SemaAttentionParams p;
  p.wq = p.wk = p.wv = Tensor::identity(d_model);
  p.bq = p.bk = p.bv = Tensor::zeros({1, d_model});
  p.lepe = DepthwiseKernel::zeros(d_model);
  return p;
}

void SemaAttentionParams::validate() const {
  require_matrix(wq, "sema params");
  const std::size_t d = wq.rows();
  for (const Tensor* w : {&wq, &wk, &wv})
    if (w->shape() != Shape{d, d}) throw DimensionError("sema params: projections must be d_model x d_model");
  for (const Tensor* b : {&bq, &bk, &bv})
    if (b->shape() != Shape{1, d}) throw DimensionError("sema params: biases must be 1 x d_model");
  if (heads == 0 || d % heads != 0) throw ConfigError("sema params: heads must divide d_model");
  if ((d / heads) % 2 != 0) throw ConfigError("sema params: head dimension must be even for RoPE");
  lepe.validate();
  if (lepe.channels != d) throw DimensionError("sema params: LePE channels must equal d_model");
}

namespace {
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), broadcast_row(b, x.rows()));
}
}  // namespace

Tensor sema_attention_full(const Tensor& x, const SemaAttentionParams& params, const WindowSpec& win,
                           const GridSpec& grid) {
  params.validate();
  require_matrix(x, "sema_attention_full");
  if (x.cols() != params.d_model()) throw DimensionError("sema_attention_full: input width differs from d_model");
  grid.check(x.rows());
  const WindowLayout layout = window_layout(grid, win.w);

  const Tensor q = affine(x, params.wq, params.bq);
  const Tensor k = affine(x, params.wk, params.bk);
  const Tensor v = affine(x, params.wv, params.bv);

  const std::size_t hd = params.d_model() / params.heads;
  const auto positions = grid_positions(grid);
  const Tensor angles = rope_angles(positions, hd, grid.planar);

  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (std::size_t h = 0; h < params.heads; ++h) {
    Tensor qh = rotate_pairs(slice_cols(q, h * hd, hd), angles);
    const Tensor kh = rotate_pairs(slice_cols(k, h * hd, hd), angles);
    Tensor vh = slice_cols(v, h * hd, hd);
    if (params.rope_on_values) vh = rotate_pairs(vh, angles);
    if (params.qk_scale != 1.0) qh = scale(qh, params.qk_scale);
    const Tensor wa = window_attention(gather_rows(qh, layout.order), gather_rows(kh, layout.order),
                                       gather_rows(vh, layout.order), WindowSpec{layout.block}, KernelSpec::softmax());
    heads.push_back(gather_rows(wa, layout.inverse));
  }
  Tensor out = add(concat_cols(heads), lepe(v, params.lepe, grid));
  if (params.averaging) out = add(out, homogeneous_mix(v));
  return out;
}

namespace {

struct MilaParts {
  Tensor gated_q, gated_k, fq, fk;
};

MilaParts mila_parts(const Tensor& q, const Tensor& k, std::span<const TokenPosition> positions, bool planar) {
  require_matrix(q, "mila_attention");
  require_matrix(k, "mila_attention");
  if (q.cols() != k.cols() || q.rows() != k.rows()) throw DimensionError("mila_attention: q/k shapes differ");
  if (positions.size() != q.rows()) throw DimensionError("mila_attention: one position per token required");
  MilaParts parts;
  parts.fq = elu_plus_one(q);
  parts.fk = elu_plus_one(k);
  const Tensor angles = rope_angles(positions, q.cols(), planar);
  parts.gated_q = rotate_pairs(parts.fq, angles);
  parts.gated_k = rotate_pairs(parts.fk, angles);
  return parts;
}

}  // namespace

Tensor mila_attention(const Tensor& q, const Tensor& k, const Tensor& v, const GridSpec& grid,
                      const DepthwiseKernel& lepe_kernel, double epsilon) {
  const auto positions = grid_positions(grid);
  return mila_attention(q, k, v, positions, grid.planar, grid, lepe_kernel, epsilon);
}

Tensor mila_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const TokenPosition> positions,
                      bool planar, const GridSpec& grid, const DepthwiseKernel& lepe_kernel, double epsilon) {
  check_qkv(q, k, v, "mila_attention");
  const MilaParts parts = mila_parts(q, k, positions, planar);
  Tensor out = matmul(parts.gated_q, matmul(transpose(parts.gated_k), v));
  const Tensor z = column_sums(parts.fk);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double den = dot(parts.fq.row(i), z.data()) + epsilon;
    for (auto& o : out.row(i)) o /= den;
  }
  return add(out, lepe(v, lepe_kernel, grid));
}

Tensor mila_coefficients(const Tensor& q, const Tensor& k, std::span<const TokenPosition> positions, bool planar,
                         double epsilon) {
  const MilaParts parts = mila_parts(q, k, positions, planar);
  Tensor c = matmul(parts.gated_q, transpose(parts.gated_k));
  const Tensor z = column_sums(parts.fk);
  for (std::size_t i = 0; i < c.rows(); ++i) {
    const double den = dot(parts.fq.row(i), z.data()) + epsilon;
    for (auto& o : c.row(i)) o /= den;
  }
  return c;
}

}  // namespace dlab
