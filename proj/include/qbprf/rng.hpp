// Copyright 2026 The qbprf authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you may not use this file except in compliance
// with the License. You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software distributed under the License
// is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express
// or implied. See the License for the specific language governing permissions and limitations under the License.

#pragma once

#include <cstdint>
#include <vector>

namespace qbprf {

// Deterministic generator with hand-rolled distributions. std::*_distribution
// is implementation-defined, so every draw here is spelled out to keep runs
// byte-reproducible for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // [0, 1)
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal (Box-Muller, pair cached).
  double normal();

  // Uniform integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n).
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

  // Independent stream derived from the construction seed; does not depend on
  // how many draws this generator has produced.
  Rng fork(uint64_t stream) const;

 private:
  uint64_t seed_;
  uint64_t state_[4];  // xoshiro256**
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace qbprf
