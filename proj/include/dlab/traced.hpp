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
#ifndef DLAB_TRACED_HPP_
#define DLAB_TRACED_HPP_

#include <cstddef>

#include "dlab/analysis.hpp"
#include "dlab/attention.hpp"
#include "dlab/autograd.hpp"
#include "dlab/posenc.hpp"

// Differentiable counterparts of the attention entry points. Each one
// computes the same map as its Tensor version, built from taped ops.
namespace dlab::ad {

Var softmax_attention(const Var& q, const Var& k, const Var& v);
// Associative form; the denominator is used as is, without a floor.
Var linear_attention(const Var& q, const Var& k, const Var& v);
// exp, exp-with-temperature and identity kernels.
Var generalized_attention(const Var& q, const Var& k, const Var& v, const KernelSpec& kernel);
Var feature_map(const Var& x, const FeatureMap& map);
Var focus_features(const Var& x, int p);
Var focused_attention(const Var& q, const Var& k, const Var& v, int p, const Var& taps, const GridSpec& grid);
Var window_attention(const Var& q, const Var& k, const Var& v, const WindowSpec& win,
                     const KernelSpec& kernel = KernelSpec::softmax());
Var homogeneous_mix(const Var& v);
Var sema_attention(const Var& q, const Var& k, const Var& v, const WindowSpec& win);
Var mila_attention(const Var& q, const Var& k, const Var& v, const Var& taps, const GridSpec& grid,
                   double epsilon = kMilaEpsilon);

struct TracedSemaParams {
  Var wq, wk, wv;
  Var bq, bk, bv;
  Var lepe_taps;  // d_model x k x k
  std::size_t heads = 1;
  double qk_scale = 1.0;
  bool rope_on_values = false;
  bool averaging = true;

  // Binds every tensor of params as a leaf of tape.
  static TracedSemaParams bind(Tape& tape, const SemaAttentionParams& params, bool requires_grad = true);
};

Var sema_attention_full(const Var& x, const TracedSemaParams& params, const WindowSpec& win, const GridSpec& grid);

// gradcheck of sum(variant(q, k, v)) on seeded 8 x 4 inputs. sema runs the
// full projected pipeline with every parameter as an input; focused, sema and
// mila place the tokens on a 2 x 4 grid and differentiate the LePE taps too.
GradcheckReport gradcheck_variant(Variant variant, std::uint64_t seed = 7, double tol = 1e-5);

}  // namespace dlab::ad

#endif  // DLAB_TRACED_HPP_
