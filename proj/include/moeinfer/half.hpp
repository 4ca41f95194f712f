// SPDX-License-Identifier: Apache-2.0
//
// Software IEEE binary16 ("half") arithmetic.
//
// Every value is carried as its raw bit pattern so results are comparable
// bit-for-bit across compilers and hosts.  Arithmetic is performed by
// widening to double -- products and sums of binary16 values are exact in
// binary64 -- and narrowing back with a single round-to-nearest-even step,
// which matches hardware half arithmetic including subnormals (no
// flush-to-zero anywhere).

#pragma once

#include <bit>
#include <cassert>
#include <cstdint>

namespace moe {

struct Half {
  uint16_t bits = 0;

  constexpr Half() = default;
  constexpr explicit Half(uint16_t b) : bits(b) {}

  friend constexpr bool operator==(Half a, Half b) { return a.bits == b.bits; }
  friend constexpr bool operator!=(Half a, Half b) { return a.bits != b.bits; }
};

inline constexpr uint16_t kHalfSignMask = 0x8000;
inline constexpr uint16_t kHalfExpMask = 0x7C00;
inline constexpr uint16_t kHalfManMask = 0x03FF;
inline constexpr Half kHalfOne{0x3C00};
inline constexpr Half kHalfInf{0x7C00};
// Canonical quiet NaN: every NaN-producing operation returns this pattern.
inline constexpr Half kHalfNan{0x7E00};
// 1024.0 == 2^10: ORing a 10-bit integer y into its mantissa yields 1024+y.
inline constexpr Half kMagicBase{0x6400};
// Smallest positive subnormal, 2^-24.
inline constexpr Half kHalfMinSubnormal{0x0001};

constexpr bool half_is_nan(Half h) {
  return (h.bits & kHalfExpMask) == kHalfExpMask && (h.bits & kHalfManMask) != 0;
}

constexpr bool half_is_finite(Half h) {
  return (h.bits & kHalfExpMask) != kHalfExpMask;
}

// Bit-compose 1024+y for y in [0, 1024).  Out-of-range y is a contract
// violation; the caller guarantees the operand fits in the mantissa field.
inline Half compose_magic(uint32_t y) {
  assert(y < 1024u && "compose_magic operand must fit in 10 mantissa bits");
  return Half(static_cast<uint16_t>(kMagicBase.bits | y));
}

inline float half_to_f32(Half h) {
  const uint32_t sign = static_cast<uint32_t>(h.bits & kHalfSignMask) << 16;
  const uint32_t exp = (h.bits >> 10) & 0x1F;
  const uint32_t man = h.bits & kHalfManMask;
  uint32_t out;
  if (exp == 0x1F) {
    out = sign | 0x7F800000u | (man << 13);  // inf or NaN (payload preserved)
  } else if (exp != 0) {
    out = sign | ((exp + 112u) << 23) | (man << 13);
  } else if (man != 0) {
    // Subnormal: value is man * 2^-24; renormalize into the f32 format.
    const int msb = 31 - std::countl_zero(man);
    out = sign | (static_cast<uint32_t>(msb + 103) << 23) |
          ((man << (23 - msb)) & 0x007FFFFFu);
  } else {
    out = sign;  // signed zero
  }
  return std::bit_cast<float>(out);
}

inline double half_to_f64(Half h) { return static_cast<double>(half_to_f32(h)); }

// Narrow a double to half with a single round-to-nearest-even step.  Done on
// the bit pattern so the result does not depend on the host's FP environment.
inline Half f64_to_half(double x) {
  const uint64_t u = std::bit_cast<uint64_t>(x);
  const uint16_t sign = static_cast<uint16_t>((u >> 48) & kHalfSignMask);
  const uint32_t exp = static_cast<uint32_t>((u >> 52) & 0x7FF);
  const uint64_t man = u & 0xFFFFFFFFFFFFFull;

  if (exp == 0x7FF) {
    return man != 0 ? kHalfNan : Half(static_cast<uint16_t>(sign | kHalfInf.bits));
  }
  if (exp == 0) {
    return Half(sign);  // double subnormals are far below half's range
  }

  const int e = static_cast<int>(exp) - 1023;
  if (e >= 16) {
    return Half(static_cast<uint16_t>(sign | kHalfInf.bits));
  }

  const uint64_t sig = (1ull << 52) | man;  // full 53-bit significand
  // Keep 11 significand bits for normal results; for subnormal targets shift
  // further so `keep` counts units of 2^-24.
  const int shift = e >= -14 ? 42 : 42 + (-14 - e);
  if (shift > 63) {
    return Half(sign);
  }

  uint64_t keep = sig >> shift;
  const uint64_t rem = sig & ((1ull << shift) - 1);
  const uint64_t halfway = 1ull << (shift - 1);
  if (rem > halfway || (rem == halfway && (keep & 1))) {
    ++keep;
  }

  if (e >= -14) {
    int e2 = e;
    if (keep == 2048) {  // rounding carried into the next binade
      keep = 1024;
      ++e2;
    }
    if (e2 > 15) {
      return Half(static_cast<uint16_t>(sign | kHalfInf.bits));
    }
    return Half(static_cast<uint16_t>(sign | ((e2 + 15) << 10) |
                                      (keep - 1024)));
  }
  // Subnormal target: keep is in [0, 1024]; 1024 lands on the smallest
  // normal, which the plain OR below encodes correctly.
  return Half(static_cast<uint16_t>(sign | keep));
}

inline Half f32_to_half(float x) { return f64_to_half(static_cast<double>(x)); }

// a+b, a-b, a*b with binary16 semantics.  The double intermediate is exact
// (operands have 11-bit significands), so the one narrowing step performs
// the only rounding -- exactly what a native half FPU would do.
inline Half half_add(Half a, Half b) {
  return f64_to_half(half_to_f64(a) + half_to_f64(b));
}

inline Half half_sub(Half a, Half b) {
  return f64_to_half(half_to_f64(a) - half_to_f64(b));
}

inline Half half_mul(Half a, Half b) {
  return f64_to_half(half_to_f64(a) * half_to_f64(b));
}

}  // namespace moe
