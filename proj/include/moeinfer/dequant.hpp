// SPDX-License-Identifier: Apache-2.0
//
// Dequantization of stored weight codes back to FP16.
//
// Two paths with bit-identical results:
//
//  * naive  -- subtract the offset, convert the signed integer to FP16
//              (exact; |q| <= 127), multiply by the channel scale.
//  * fast   -- compose each stored code directly into the mantissa of
//              1024.0 (bit pattern 0x6400), then subtract a constant whose
//              mantissa holds the offset: 1152.0 for 8-bit codes,
//              1032.0 for 4-bit codes.  (1024+v) - (1024+offset) = v-offset
//              is exact integer arithmetic inside FP16, so no int->float
//              conversion instruction is ever needed.
//
// 4-bit codes arrive interleaved (see pack_int4_interleaved): one 32-bit
// word holds 8 codes, and four shift/mask/OR steps yield element pairs
// (0,1), (2,3), (4,5), (6,7) in logical order.
//
// MOE_FAULT_INJECT (read once at first use): "i2f4" corrupts the 4-bit
// debias constant, any other non-empty value corrupts the 8-bit one.  The
// verify command uses this to prove its suites can actually fail.

#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "moeinfer/quantize.hpp"
#include "moeinfer/tensor.hpp"

namespace moe {

// Debias constants, possibly corrupted by MOE_FAULT_INJECT.
Half debias_const_u8();  // 1152.0 == 0x6480 when healthy
Half debias_const_u4();  // 1032.0 == 0x6408 when healthy

// Two 8-bit codes -> two FP16 values holding (code - 128).
inline std::pair<Half, Half> i2f_pair_u8(uint8_t b0, uint8_t b1) {
  const Half c = debias_const_u8();
  return {half_sub(compose_magic(b0), c), half_sub(compose_magic(b1), c)};
}

// Four 8-bit codes, processed as two pairs.
inline std::array<Half, 4> i2f_magic_u8(const uint8_t b[4]) {
  const auto lo = i2f_pair_u8(b[0], b[1]);
  const auto hi = i2f_pair_u8(b[2], b[3]);
  return {lo.first, lo.second, hi.first, hi.second};
}

// Eight interleaved 4-bit codes in one little-endian word -> FP16 values
// holding (code - 8), returned in logical order.
inline std::array<Half, 8> i2f_magic_u4(uint32_t word) {
  const Half c = debias_const_u4();
  std::array<Half, 8> out;
  for (int k = 0; k < 4; ++k) {
    const uint32_t lanes = ((word >> (4 * k)) & 0x000F000Fu) | 0x64006400u;
    out[2 * k] = half_sub(Half(static_cast<uint16_t>(lanes & 0xFFFF)), c);
    out[2 * k + 1] = half_sub(Half(static_cast<uint16_t>(lanes >> 16)), c);
  }
  return out;
}

// Assemble the little-endian word for one packed 8-code group.
inline uint32_t load_u4_word(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

// Full-tensor dequantization, (e, m, n) FP16 out.
HalfTensor3 dequantize_naive(const QuantizedExpertWeights& qw);
HalfTensor3 dequantize_fast(const QuantizedExpertWeights& qw);

// One expert's slab via the fast path; dst must hold m*n values.
void dequantize_fast_expert(const QuantizedExpertWeights& qw, size_t ei,
                            Half* dst);

}  // namespace moe
