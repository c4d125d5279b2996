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
#include "dlab/traced.hpp"

#include <cmath>
#include <vector>

#include "dlab/errors.hpp"
#include "dlab/rng.hpp"

namespace dlab::ad {

namespace {

// Divides every row of num by the matching entry of the n x 1 column den.
Var divide_rows(const Var& num, const Var& den) { return scale_rows(num, reciprocal(den)); }

}  // namespace

Var softmax_attention(const Var& q, const Var& k, const Var& v) {
  return matmul(softmax_rows(matmul(q, transpose(k))), v);
}

Var linear_attention(const Var& q, const Var& k, const Var& v) {
  const Var fq = elu_plus_one(q);
  const Var fk = elu_plus_one(k);
  const Var num = matmul(fq, matmul(transpose(fk), v));
  return divide_rows(num, matmul(fq, transpose(sum_rows(fk))));
}

Var feature_map(const Var& x, const FeatureMap& map) {
  switch (map.kind) {
    case FeatureKind::kIdentity:
      return x;
    case FeatureKind::kEluPlusOne:
      return elu_plus_one(x);
    case FeatureKind::kFocused:
      return focus_features(x, map.p);
  }
  return x;
}

Var focus_features(const Var& x, int p) {
  if (p < 1) throw KernelDomainError("focused feature map needs p >= 1");
  const Var r = relu(x);
  const Var powered = pow(r, p);
  return scale_rows(powered, safe_div(row_norms(r), row_norms(powered)));
}

Var generalized_attention(const Var& q, const Var& k, const Var& v, const KernelSpec& kernel) {
  kernel.validate();
  const Var logits = matmul(feature_map(q, kernel.psi_q), transpose(feature_map(k, kernel.psi_k)));
  switch (kernel.phi.kind) {
    case NormalizerKind::kExp:
      return matmul(softmax_rows(logits), v);
    case NormalizerKind::kExpTemperature:
      return matmul(softmax_rows(scale(logits, 1.0 / kernel.phi.theta)), v);
    case NormalizerKind::kIdentity: {
      const Var den = row_sums(logits);
      for (double z : den.value().data()) {
        if (!(z > kernel.epsilon)) throw KernelDomainError("attention denominator is not above epsilon");
      }
      return divide_rows(matmul(logits, v), den);
    }
    case NormalizerKind::kPower:
      break;
  }
  throw DifferentiationError("no traced form for kernel " + kernel.phi.name());
}

Var focused_attention(const Var& q, const Var& k, const Var& v, int p, const Var& taps, const GridSpec& grid) {
  return add(generalized_attention(q, k, v, KernelSpec::focused(p)), depthwise_conv(v, taps, grid));
}

Var window_attention(const Var& q, const Var& k, const Var& v, const WindowSpec& win, const KernelSpec& kernel) {
  const std::size_t n = q.value().rows();
  if (k.value().rows() != n) throw DimensionError("window_attention: self-attention requires as many queries as keys");
  win.check(n);
  std::vector<Var> blocks;
  for (std::size_t b = 0; b < n; b += win.w) {
    blocks.push_back(generalized_attention(slice_rows(q, b, win.w), slice_rows(k, b, win.w),
                                           slice_rows(v, b, win.w), kernel));
  }
  return blocks.size() == 1 ? blocks.front() : concat_rows(blocks);
}

Var homogeneous_mix(const Var& v) { return broadcast_row(mean_rows(v), v.value().rows()); }

Var sema_attention(const Var& q, const Var& k, const Var& v, const WindowSpec& win) {
  return add(window_attention(q, k, v, win), homogeneous_mix(v));
}

Var mila_attention(const Var& q, const Var& k, const Var& v, const Var& taps, const GridSpec& grid, double epsilon) {
  grid.check(q.value().rows());
  const Tensor angles = rope_angles(grid_positions(grid), q.value().cols(), grid.planar);
  const Var fq = elu_plus_one(q);
  const Var fk = elu_plus_one(k);
  const Var num = matmul(rotate(fq, angles), matmul(transpose(rotate(fk, angles)), v));
  const Var den = add_scalar(matmul(fq, transpose(sum_rows(fk))), epsilon);
  return add(divide_rows(num, den), depthwise_conv(v, taps, grid));
}

TracedSemaParams TracedSemaParams::bind(Tape& tape, const SemaAttentionParams& params, bool requires_grad) {
  params.validate();
  TracedSemaParams t;
  t.wq = tape.leaf(params.wq, requires_grad);
  t.wk = tape.leaf(params.wk, requires_grad);
  t.wv = tape.leaf(params.wv, requires_grad);
  t.bq = tape.leaf(params.bq, requires_grad);
  t.bk = tape.leaf(params.bk, requires_grad);
  t.bv = tape.leaf(params.bv, requires_grad);
  t.lepe_taps = tape.leaf(params.lepe.as_tensor(), requires_grad);
  t.heads = params.heads;
  t.qk_scale = params.qk_scale;
  t.rope_on_values = params.rope_on_values;
  t.averaging = params.averaging;
  return t;
}

Var sema_attention_full(const Var& x, const TracedSemaParams& params, const WindowSpec& win, const GridSpec& grid) {
  const std::size_t n = x.value().rows();
  const std::size_t d = params.wq.value().rows();
  if (params.heads == 0 || d % params.heads != 0 || (d / params.heads) % 2 != 0) {
    throw ConfigError("sema_attention_full: heads must split d_model into even head widths");
  }
  grid.check(n);
  const WindowLayout layout = window_layout(grid, win.w);

  const Var q = add_row(matmul(x, params.wq), params.bq);
  const Var k = add_row(matmul(x, params.wk), params.bk);
  const Var v = add_row(matmul(x, params.wv), params.bv);

  const std::size_t hd = d / params.heads;
  const Tensor angles = rope_angles(grid_positions(grid), hd, grid.planar);
  const bool single = params.heads == 1;

  std::vector<Var> heads;
  for (std::size_t h = 0; h < params.heads; ++h) {
    Var qh = rotate(single ? q : slice_cols(q, h * hd, hd), angles);
    const Var kh = rotate(single ? k : slice_cols(k, h * hd, hd), angles);
    Var vh = single ? v : slice_cols(v, h * hd, hd);
    if (params.rope_on_values) vh = rotate(vh, angles);
    if (params.qk_scale != 1.0) qh = scale(qh, params.qk_scale);
    const Var wa = window_attention(gather_rows(qh, layout.order), gather_rows(kh, layout.order),
                                    gather_rows(vh, layout.order), WindowSpec{layout.block});
    heads.push_back(gather_rows(wa, layout.inverse));
  }
  Var out = add(single ? heads.front() : concat_cols(heads), depthwise_conv(v, params.lepe_taps, grid));
  if (params.averaging) out = add(out, homogeneous_mix(v));
  return out;
}

GradcheckReport gradcheck_variant(Variant variant, std::uint64_t seed, double tol) {
  constexpr std::size_t n = 8, d = 4;
  const GridSpec grid = GridSpec::grid(2, 4);
  Rng rng = Rng::keyed(seed, "gradcheck", static_cast<std::uint64_t>(variant));
  std::vector<Tensor> inputs;
  for (int i = 0; i < 3; ++i) inputs.push_back(rng.normal_tensor({n, d}));
  const Tensor taps = rng.normal_tensor({d, 3, 3}, 0.5);

  TracedFn f;
  switch (variant) {
    case Variant::kSoftmax:
      f = [](Tape&, std::span<const Var> in) { return sum(softmax_attention(in[0], in[1], in[2])); };
      break;
    case Variant::kLinear:
      f = [](Tape&, std::span<const Var> in) { return sum(linear_attention(in[0], in[1], in[2])); };
      break;
    case Variant::kFocused:
      // Strictly positive q, k keep every feature row away from the relu kink
      // and the zero row, where the map is not differentiable.
      for (int i = 0; i < 2; ++i)
        for (std::size_t e = 0; e < inputs[i].size(); ++e) inputs[i][e] = std::abs(inputs[i][e]) + 0.1;
      inputs.push_back(taps);
      f = [grid](Tape&, std::span<const Var> in) { return sum(focused_attention(in[0], in[1], in[2], 3, in[3], grid)); };
      break;
    case Variant::kWindow:
      f = [](Tape&, std::span<const Var> in) { return sum(window_attention(in[0], in[1], in[2], WindowSpec{4})); };
      break;
    case Variant::kMila:
      inputs.push_back(taps);
      f = [grid](Tape&, std::span<const Var> in) { return sum(mila_attention(in[0], in[1], in[2], in[3], grid)); };
      break;
    case Variant::kSema: {
      // x, then wq, wk, wv, bq, bk, bv, taps.
      inputs.resize(1);
      for (int i = 0; i < 3; ++i) inputs.push_back(rng.normal_tensor({d, d}, 0.5));
      for (int i = 0; i < 3; ++i) inputs.push_back(rng.normal_tensor({1, d}, 0.5));
      inputs.push_back(taps);
      f = [grid](Tape&, std::span<const Var> in) {
        TracedSemaParams p;
        p.wq = in[1];
        p.wk = in[2];
        p.wv = in[3];
        p.bq = in[4];
        p.bk = in[5];
        p.bv = in[6];
        p.lepe_taps = in[7];
        p.qk_scale = 0.5;
        return sum(sema_attention_full(in[0], p, WindowSpec{2}, grid));
      };
      break;
    }
    default:
      throw ConfigError("gradcheck: no traced form for variant " + to_string(variant));
  }
  return gradcheck(f, inputs, 1e-5, tol, seed);
}

}  // namespace dlab::ad
