// SPDX-License-Identifier: Apache-2.0
//
// Weight-only quantization of per-expert weight tensors.
//
// Symmetric, range-based, one scale per (expert, output channel):
//   scale  = max_m |W[e,m,n]| / qmax   (qmax = 127 for 8-bit, 7 for 4-bit)
//   q      = clamp(round(w / scale), -qmax, qmax)     round half away from 0
//   stored = q + 2^(bits-1)            unsigned, never 0
//
// The divisor is the *FP16-narrowed* scale, which makes
// quantize(dequantize(quantize(w))) a fixed point.  4-bit values are packed
// two per byte in the interleaved order the fused kernels consume directly.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moeinfer/tensor.hpp"

namespace moe {

enum class QuantBits : uint8_t { b4 = 4, b8 = 8 };

inline int quant_qmax(QuantBits bits) { return bits == QuantBits::b8 ? 127 : 7; }
inline int quant_offset(QuantBits bits) { return bits == QuantBits::b8 ? 128 : 8; }

struct QuantizedExpertWeights {
  QuantBits bits = QuantBits::b8;
  size_t e = 0;
  size_t m = 0;
  size_t n = 0;
  std::vector<uint8_t> packed;  // e*m*n bytes (8-bit) or e*m*n/2 (4-bit)
  std::vector<Half> scales;     // one per (expert, column), e*n entries

  Half scale_at(size_t ei, size_t ni) const { return scales[ei * n + ni]; }
  size_t packed_bytes() const { return packed.size(); }
  size_t scale_bytes() const { return scales.size() * sizeof(Half); }
  // Total bytes a consumer must ship for the expert weights.
  size_t payload_bytes() const { return packed_bytes() + scale_bytes(); }
  std::span<const uint8_t> expert_packed(size_t ei) const {
    const size_t per = packed.size() / e;
    return {packed.data() + ei * per, per};
  }
};

// Per-channel scale from the channel's max |w|:  RN16(RN32(maxabs / qmax)).
// A degenerate (all-zero) channel gets scale 1.0; a nonzero channel whose
// scale would round to zero is clamped to the smallest positive subnormal.
Half quant_scale_from_maxabs(float maxabs, int qmax);

// Quantize one value against an FP16 scale; returns the *stored* code.
uint8_t quant_encode(Half w, Half scale, QuantBits bits);

QuantizedExpertWeights quantize(const HalfTensor3& w, QuantBits bits,
                                int threads = 1);

// Interleaved nibble packing.  Each group of 8 logical values [v0..v7] is
// stored as [v0,v2,v4,v6,v1,v3,v5,v7], two nibbles per byte, low nibble
// first, so one 32-bit load feeds the paired dequantize directly.
std::vector<uint8_t> pack_int4_interleaved(std::span<const uint8_t> values);
std::vector<uint8_t> unpack_int4_interleaved(std::span<const uint8_t> packed,
                                             size_t count);

// Logical (de-interleaved) stored codes for one expert, row-major.
std::vector<uint8_t> unpack_expert(const QuantizedExpertWeights& qw,
                                   size_t ei);

}  // namespace moe
