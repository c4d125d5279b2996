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
#include "dlab/posenc.hpp"

#include <cmath>
#include <string>

#include "dlab/errors.hpp"

namespace dlab {

void GridSpec::check(std::size_t n) const {
  if (height == 0 || width == 0 || tokens() != n) {
    throw DimensionError("grid " + std::to_string(height) + "x" + std::to_string(width) + " does not hold " +
                         std::to_string(n) + " tokens");
  }
}

std::vector<TokenPosition> grid_positions(const GridSpec& grid) {
  std::vector<TokenPosition> pos(grid.tokens());
  for (std::size_t r = 0; r < grid.height; ++r)
    for (std::size_t c = 0; c < grid.width; ++c)
      pos[r * grid.width + c] = {static_cast<double>(r), static_cast<double>(c)};
  return pos;
}

Tensor rope_angles(std::span<const TokenPosition> positions, std::size_t d, bool planar, double base) {
  if (d % 2 != 0) throw DimensionError("rope: feature dimension must be even, got " + std::to_string(d));
  const std::size_t pairs = d / 2;
  Tensor angles({positions.size(), pairs});
  const std::size_t row_pairs = planar ? (pairs + 1) / 2 : 0;
  const std::size_t col_pairs = pairs - row_pairs;
  std::vector<double> freq(pairs);
  std::vector<bool> uses_row(pairs, false);
  for (std::size_t t = 0; t < pairs; ++t) {
    if (!planar) {
      freq[t] = std::pow(base, -2.0 * static_cast<double>(t) / static_cast<double>(d));
    } else if (t < row_pairs) {
      freq[t] = std::pow(base, -static_cast<double>(t) / static_cast<double>(row_pairs));
      uses_row[t] = true;
    } else {
      freq[t] = std::pow(base, -static_cast<double>(t - row_pairs) / static_cast<double>(col_pairs));
    }
  }
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t t = 0; t < pairs; ++t)
      angles(i, t) = freq[t] * (uses_row[t] ? positions[i].row : positions[i].col);
  return angles;
}

Tensor rotate_pairs(const Tensor& x, const Tensor& angles, bool inverse) {
  require_matrix(x, "rotate_pairs");
  if (x.cols() % 2 != 0) throw DimensionError("rope: feature dimension must be even, got " + shape_to_string(x.shape()));
  if (angles.rows() != x.rows() || angles.cols() * 2 != x.cols()) {
    throw DimensionError("rotate_pairs: angles " + shape_to_string(angles.shape()) + " do not match " +
                         shape_to_string(x.shape()));
  }
  Tensor out(x.shape());
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t t = 0; t < angles.cols(); ++t) {
      const double a = angles(i, t);
      if (a == 0.0) {
        out(i, 2 * t) = x(i, 2 * t);
        out(i, 2 * t + 1) = x(i, 2 * t + 1);
        continue;
      }
      const double c = std::cos(a), s = sign * std::sin(a);
      const double x0 = x(i, 2 * t), x1 = x(i, 2 * t + 1);
      out(i, 2 * t) = c * x0 - s * x1;
      out(i, 2 * t + 1) = s * x0 + c * x1;
    }
  }
  return out;
}

Tensor rope_apply(const Tensor& x, const GridSpec& grid, double base) {
  require_matrix(x, "rope_apply");
  grid.check(x.rows());
  const auto pos = grid_positions(grid);
  return rope_apply(x, pos, grid.planar, base);
}

Tensor rope_apply(const Tensor& x, std::span<const TokenPosition> positions, bool planar, double base) {
  require_matrix(x, "rope_apply");
  if (positions.size() != x.rows()) throw DimensionError("rope_apply: one position per row required");
  return rotate_pairs(x, rope_angles(positions, x.cols(), planar, base));
}

DepthwiseKernel DepthwiseKernel::zeros(std::size_t channels, std::size_t size) {
  DepthwiseKernel k{size, channels, std::vector<double>(channels * size * size, 0.0)};
  k.validate();
  return k;
}

DepthwiseKernel DepthwiseKernel::identity(std::size_t channels, std::size_t size) {
  auto k = zeros(channels, size);
  const std::size_t h = size / 2;
  for (std::size_t c = 0; c < channels; ++c) k.taps[(c * size + h) * size + h] = 1.0;
  return k;
}

DepthwiseKernel DepthwiseKernel::from_tensor(const Tensor& taps) {
  if (taps.rank() != 3 || taps.dim(1) != taps.dim(2)) {
    throw DimensionError("depthwise taps must be channels x k x k, got " + shape_to_string(taps.shape()));
  }
  DepthwiseKernel k{taps.dim(1), taps.dim(0), taps.values()};
  k.validate();
  return k;
}

Tensor DepthwiseKernel::as_tensor() const { return Tensor({channels, size, size}, taps); }

void DepthwiseKernel::validate() const {
  if (size % 2 == 0) throw DimensionError("depthwise kernel size must be odd, got " + std::to_string(size));
  if (channels == 0) throw DimensionError("depthwise kernel needs at least one channel");
  if (taps.size() != channels * size * size) throw DimensionError("depthwise kernel tap count mismatch");
}

namespace {

// Visits every (output token, input token, ky, kx) pair of the correlation.
template <typename Fn>
void for_each_tap(const GridSpec& grid, std::size_t size, Fn&& fn) {
  const auto h = static_cast<std::ptrdiff_t>(size / 2);
  const auto H = static_cast<std::ptrdiff_t>(grid.height), W = static_cast<std::ptrdiff_t>(grid.width);
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c)
      for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(size); ++ky) {
        const std::ptrdiff_t rr = r + ky - h;
        if (rr < 0 || rr >= H) continue;
        for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(size); ++kx) {
          const std::ptrdiff_t cc = c + kx - h;
          if (cc < 0 || cc >= W) continue;
          fn(static_cast<std::size_t>(r * W + c), static_cast<std::size_t>(rr * W + cc), static_cast<std::size_t>(ky),
             static_cast<std::size_t>(kx));
        }
      }
}

void check_lepe_shapes(const Tensor& v, const DepthwiseKernel& kernel, const GridSpec& grid) {
  require_matrix(v, "lepe");
  kernel.validate();
  grid.check(v.rows());
  if (kernel.channels != v.cols()) {
    throw DimensionError("lepe: kernel has " + std::to_string(kernel.channels) + " channels, values have " +
                         std::to_string(v.cols()));
  }
}

}  // namespace

Tensor lepe(const Tensor& v, const DepthwiseKernel& kernel, const GridSpec& grid) {
  check_lepe_shapes(v, kernel, grid);
  Tensor out(v.shape());
  const std::size_t C = v.cols();
  for_each_tap(grid, kernel.size, [&](std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    for (std::size_t c = 0; c < C; ++c) out(o, c) += kernel.tap(c, ky, kx) * v(i, c);
  });
  return out;
}

Tensor lepe_grad_input(const Tensor& grad_out, const DepthwiseKernel& kernel, const GridSpec& grid) {
  check_lepe_shapes(grad_out, kernel, grid);
  Tensor g(grad_out.shape());
  const std::size_t C = g.cols();
  for_each_tap(grid, kernel.size, [&](std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    for (std::size_t c = 0; c < C; ++c) g(i, c) += kernel.tap(c, ky, kx) * grad_out(o, c);
  });
  return g;
}

Tensor lepe_grad_taps(const Tensor& grad_out, const Tensor& v, std::size_t size, const GridSpec& grid) {
  require_same_shape(grad_out, v, "lepe_grad_taps");
  grid.check(v.rows());
  const std::size_t C = v.cols();
  Tensor g({C, size, size});
  for_each_tap(grid, size, [&](std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    for (std::size_t c = 0; c < C; ++c) g[(c * size + ky) * size + kx] += grad_out(o, c) * v(i, c);
  });
  return g;
}

}  // namespace dlab
