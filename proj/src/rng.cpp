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
#include "dlab/rng.hpp"

#include <cmath>
#include <numbers>

namespace dlab {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::keyed(std::uint64_t seed, std::string_view stream, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the stream name
  for (unsigned char c : stream) h = (h ^ c) * 0x100000001b3ULL;
  std::uint64_t key = mix64(seed);
  key = mix64(key ^ h);
  key = mix64(key ^ a);
  key = mix64(key ^ b);
  return Rng(key);
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

std::size_t Rng::index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = uniform(lo, hi);
  return t;
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = stddev * normal();
  return t;
}

Tensor Rng::sphere_rows(std::size_t n, std::size_t d, double radius) {
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    auto r = t.row(i);
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (auto& x : r) {
        x = normal();
        norm2 += x * x;
      }
    } while (norm2 == 0.0);
    const double s = radius / std::sqrt(norm2);
    for (auto& x : r) x *= s;
  }
  return t;
}

}  // namespace dlab
