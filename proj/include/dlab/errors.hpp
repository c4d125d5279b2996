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
#ifndef DLAB_ERRORS_HPP_
#define DLAB_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace dlab {

// Shapes disagree or an index is out of range.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A normalizer produced a non-positive value or denominator.
class KernelDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// The window size does not divide the token count.
class WindowPartitionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A checked mathematical invariant failed (e.g. a coefficient escaped its
// theoretical bounds). Raised by test oracles, never recovered from.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DifferentiationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace dlab

#endif  // DLAB_ERRORS_HPP_
