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
#ifndef DLAB_RNG_HPP_
#define DLAB_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

#include "dlab/tensor.hpp"

namespace dlab {

// Seeded generator whose stream is a pure function of (seed, stream name,
// counters). Sweeps derive one Rng per (n, trial) cell so results do not
// depend on scheduling. Uniform and normal draws are computed from raw
// 64-bit outputs, so they are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng keyed(std::uint64_t seed, std::string_view stream, std::uint64_t a = 0, std::uint64_t b = 0);

  std::uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t index(std::size_t n);  // [0, n)

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double stddev = 1.0);
  // n x d matrix whose rows are uniform on the sphere of the given radius.
  Tensor sphere_rows(std::size_t n, std::size_t d, double radius);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace dlab

#endif  // DLAB_RNG_HPP_
