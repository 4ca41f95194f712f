// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random source.  std::mt19937_64 produces a portable raw
// stream, but the standard *distributions* are implementation-defined, so
// uniform/normal sampling is done by hand here to keep checkpoints and
// benchmarks reproducible across standard libraries.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace moe {

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).  Desk-scale n, so modulo bias is irrelevant
  // next to the portability win.
  uint32_t uniform_int(uint32_t n) {
    return static_cast<uint32_t>(next_u64() % n);
  }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]: keeps the log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace moe
