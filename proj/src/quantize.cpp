// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "moeinfer/threading.hpp"

namespace moe {

Half quant_scale_from_maxabs(float maxabs, int qmax) {
  if (maxabs == 0.0f) {
    return kHalfOne;
  }
  const float s32 = maxabs / static_cast<float>(qmax);
  const Half s16 = f32_to_half(s32);
  if ((s16.bits & ~kHalfSignMask) == 0) {
    return kHalfMinSubnormal;  // channel is tiny but not empty
  }
  return s16;
}

uint8_t quant_encode(Half w, Half scale, QuantBits bits) {
  const int qmax = quant_qmax(bits);
  // Round half away from zero, exactly what llround does.
  long q = std::llround(half_to_f64(w) / half_to_f64(scale));
  q = std::clamp<long>(q, -qmax, qmax);
  return static_cast<uint8_t>(q + quant_offset(bits));
}

std::vector<uint8_t> pack_int4_interleaved(std::span<const uint8_t> values) {
  require(values.size() % 8 == 0,
          "pack_int4_interleaved: length must be a multiple of 8");
  std::vector<uint8_t> out(values.size() / 2);
  for (size_t g = 0; g * 8 < values.size(); ++g) {
    const uint8_t* v = values.data() + g * 8;
    for (size_t i = 0; i < 8; ++i) {
      require(v[i] < 16, "pack_int4_interleaved: value does not fit a nibble");
    }
    uint8_t* b = out.data() + g * 4;
    b[0] = static_cast<uint8_t>(v[0] | (v[2] << 4));
    b[1] = static_cast<uint8_t>(v[4] | (v[6] << 4));
    b[2] = static_cast<uint8_t>(v[1] | (v[3] << 4));
    b[3] = static_cast<uint8_t>(v[5] | (v[7] << 4));
  }
  return out;
}

std::vector<uint8_t> unpack_int4_interleaved(std::span<const uint8_t> packed,
                                             size_t count) {
  require(count % 8 == 0,
          "unpack_int4_interleaved: count must be a multiple of 8");
  require(packed.size() * 2 == count,
          "unpack_int4_interleaved: packed size does not match count");
  std::vector<uint8_t> out(count);
  for (size_t g = 0; g * 8 < count; ++g) {
    const uint8_t* b = packed.data() + g * 4;
    uint8_t* v = out.data() + g * 8;
    v[0] = b[0] & 0x0F;
    v[2] = b[0] >> 4;
    v[4] = b[1] & 0x0F;
    v[6] = b[1] >> 4;
    v[1] = b[2] & 0x0F;
    v[3] = b[2] >> 4;
    v[5] = b[3] & 0x0F;
    v[7] = b[3] >> 4;
  }
  return out;
}

QuantizedExpertWeights quantize(const HalfTensor3& w, QuantBits bits,
                                int threads) {
  require(w.e > 0 && w.m > 0 && w.n > 0, "quantize: empty weight tensor");
  if (bits == QuantBits::b4) {
    require(w.n % 8 == 0,
            "quantize: 4-bit packing needs the column count divisible by 8");
  }
  for (size_t i = 0; i < w.data.size(); ++i) {
    if (!half_is_finite(w.data[i])) {
      throw std::invalid_argument("quantize: non-finite weight at flat index " +
                                  std::to_string(i));
    }
  }

  const int qmax = quant_qmax(bits);
  QuantizedExpertWeights out;
  out.bits = bits;
  out.e = w.e;
  out.m = w.m;
  out.n = w.n;
  out.scales.resize(w.e * w.n);

  // Quantize channel-by-channel into one byte per element, then pack.  The
  // channel loop is the parallel axis; every channel owns disjoint output.
  std::vector<uint8_t> codes(w.data.size());
  parallel_for(w.e * w.n, threads, [&](size_t begin, size_t end) {
    for (size_t c = begin; c < end; ++c) {
      const size_t ei = c / w.n;
      const size_t ni = c % w.n;
      float maxabs = 0.0f;
      for (size_t mi = 0; mi < w.m; ++mi) {
        maxabs = std::max(maxabs, std::fabs(half_to_f32(w.at(ei, mi, ni))));
      }
      const Half scale = quant_scale_from_maxabs(maxabs, qmax);
      out.scales[c] = scale;
      for (size_t mi = 0; mi < w.m; ++mi) {
        codes[(ei * w.m + mi) * w.n + ni] =
            quant_encode(w.at(ei, mi, ni), scale, bits);
      }
    }
  });

  if (bits == QuantBits::b8) {
    out.packed = std::move(codes);
  } else {
    out.packed = pack_int4_interleaved(codes);
  }
  return out;
}

std::vector<uint8_t> unpack_expert(const QuantizedExpertWeights& qw,
                                   size_t ei) {
  require(ei < qw.e, "unpack_expert: expert index out of range");
  const auto slab = qw.expert_packed(ei);
  if (qw.bits == QuantBits::b8) {
    return {slab.begin(), slab.end()};
  }
  return unpack_int4_interleaved(slab, qw.m * qw.n);
}

}  // namespace moe
