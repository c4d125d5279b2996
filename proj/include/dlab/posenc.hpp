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
#ifndef DLAB_POSENC_HPP_
#define DLAB_POSENC_HPP_

#include <cstddef>
#include <span>
#include <vector>

#include "dlab/tensor.hpp"

namespace dlab {

// Arrangement of n tokens: a 1-D sequence or a row-major height x width grid.
struct GridSpec {
  std::size_t height = 1;
  std::size_t width = 1;
  bool planar = false;

  static GridSpec linear(std::size_t n) { return {1, n, false}; }
  static GridSpec grid(std::size_t h, std::size_t w) { return {h, w, true}; }

  std::size_t tokens() const { return height * width; }
  // Throws DimensionError when the grid does not hold exactly n tokens.
  void check(std::size_t n) const;
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct TokenPosition {
  double row = 0.0;
  double col = 0.0;
};

std::vector<TokenPosition> grid_positions(const GridSpec& grid);

inline constexpr double kRopeBase = 10000.0;

// Rotation angle for every (token, dimension pair): n x d/2.
//
// 1-D: pair t turns by pos * base^(-2t/d). 2-D (axial): the first ceil(d/4)
// pairs follow the row index and the rest the column index, each half using
// the same schedule over its own sub-dimension.
Tensor rope_angles(std::span<const TokenPosition> positions, std::size_t d, bool planar, double base = kRopeBase);
// Rotates each pair (x[2t], x[2t+1]) by the matching angle (or its negative).
Tensor rotate_pairs(const Tensor& x, const Tensor& angles, bool inverse = false);

Tensor rope_apply(const Tensor& x, const GridSpec& grid, double base = kRopeBase);
Tensor rope_apply(const Tensor& x, std::span<const TokenPosition> positions, bool planar, double base = kRopeBase);

// Per-channel k x k filter (cross-correlation, zero padding, same-size out).
struct DepthwiseKernel {
  std::size_t size = 3;
  std::size_t channels = 0;
  std::vector<double> taps;  // [channel][ky][kx]

  static DepthwiseKernel zeros(std::size_t channels, std::size_t size = 3);
  // Center tap 1, others 0.
  static DepthwiseKernel identity(std::size_t channels, std::size_t size = 3);
  static DepthwiseKernel from_tensor(const Tensor& taps);  // channels x k x k

  Tensor as_tensor() const;
  double tap(std::size_t c, std::size_t ky, std::size_t kx) const { return taps[(c * size + ky) * size + kx]; }
  void validate() const;
  friend bool operator==(const DepthwiseKernel&, const DepthwiseKernel&) = default;
};

Tensor lepe(const Tensor& v, const DepthwiseKernel& kernel, const GridSpec& grid);
// Adjoints of lepe: gradient w.r.t. v, and w.r.t. the taps (channels x k x k).
Tensor lepe_grad_input(const Tensor& grad_out, const DepthwiseKernel& kernel, const GridSpec& grid);
Tensor lepe_grad_taps(const Tensor& grad_out, const Tensor& v, std::size_t size, const GridSpec& grid);

}  // namespace dlab

#endif  // DLAB_POSENC_HPP_
