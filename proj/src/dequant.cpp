// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/dequant.hpp"

#include <cstdlib>
#include <string_view>

namespace moe {

namespace {

struct FaultConfig {
  bool corrupt_u8 = false;
  bool corrupt_u4 = false;
  FaultConfig() {
    const char* v = std::getenv("MOE_FAULT_INJECT");
    if (v != nullptr && *v != '\0') {
      if (std::string_view(v) == "i2f4") {
        corrupt_u4 = true;
      } else {
        corrupt_u8 = true;
      }
    }
  }
};

const FaultConfig& fault_config() {
  static const FaultConfig fc;
  return fc;
}

void validate(const QuantizedExpertWeights& qw) {
  require(qw.e > 0 && qw.m > 0 && qw.n > 0, "dequantize: empty tensor");
  require(qw.scales.size() == qw.e * qw.n, "dequantize: scale count mismatch");
  const size_t want = qw.bits == QuantBits::b8 ? qw.e * qw.m * qw.n
                                               : qw.e * qw.m * qw.n / 2;
  require(qw.packed.size() == want, "dequantize: packed size mismatch");
  if (qw.bits == QuantBits::b4) {
    require(qw.n % 8 == 0, "dequantize: 4-bit column count not a multiple of 8");
  }
}

}  // namespace

Half debias_const_u8() {
  // 1152.0; the fault flips the mantissa LSB, making it 1153.0.
  return fault_config().corrupt_u8 ? Half(0x6481) : Half(0x6480);
}

Half debias_const_u4() {
  // 1032.0; faulted form is 1033.0.
  return fault_config().corrupt_u4 ? Half(0x6409) : Half(0x6408);
}

HalfTensor3 dequantize_naive(const QuantizedExpertWeights& qw) {
  validate(qw);
  HalfTensor3 out(qw.e, qw.m, qw.n);
  const int offset = quant_offset(qw.bits);
  for (size_t ei = 0; ei < qw.e; ++ei) {
    const auto codes = unpack_expert(qw, ei);
    for (size_t mi = 0; mi < qw.m; ++mi) {
      for (size_t ni = 0; ni < qw.n; ++ni) {
        const int q = static_cast<int>(codes[mi * qw.n + ni]) - offset;
        const Half qh = f64_to_half(static_cast<double>(q));
        out.at(ei, mi, ni) = half_mul(qh, qw.scale_at(ei, ni));
      }
    }
  }
  return out;
}

void dequantize_fast_expert(const QuantizedExpertWeights& qw, size_t ei,
                            Half* dst) {
  const auto slab = qw.expert_packed(ei);
  const Half* scales = qw.scales.data() + ei * qw.n;
  if (qw.bits == QuantBits::b4) {
    for (size_t mi = 0; mi < qw.m; ++mi) {
      const uint8_t* row = slab.data() + mi * qw.n / 2;
      for (size_t g = 0; g < qw.n / 8; ++g) {
        const auto vals = i2f_magic_u4(load_u4_word(row + g * 4));
        for (size_t j = 0; j < 8; ++j) {
          const size_t ni = g * 8 + j;
          dst[mi * qw.n + ni] = half_mul(vals[j], scales[ni]);
        }
      }
    }
  } else {
    for (size_t mi = 0; mi < qw.m; ++mi) {
      const uint8_t* row = slab.data() + mi * qw.n;
      size_t ni = 0;
      for (; ni + 4 <= qw.n; ni += 4) {
        const auto vals = i2f_magic_u8(row + ni);
        for (size_t j = 0; j < 4; ++j) {
          dst[mi * qw.n + ni + j] = half_mul(vals[j], scales[ni + j]);
        }
      }
      for (; ni < qw.n; ++ni) {  // ragged tail, same arithmetic
        const Half v = half_sub(compose_magic(row[ni]), debias_const_u8());
        dst[mi * qw.n + ni] = half_mul(v, scales[ni]);
      }
    }
  }
}

HalfTensor3 dequantize_fast(const QuantizedExpertWeights& qw) {
  validate(qw);
  HalfTensor3 out(qw.e, qw.m, qw.n);
  for (size_t ei = 0; ei < qw.e; ++ei) {
    dequantize_fast_expert(qw, ei, out.expert(ei).data());
  }
  return out;
}

}  // namespace moe
