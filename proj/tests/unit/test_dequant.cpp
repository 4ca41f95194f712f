// SPDX-License-Identifier: Apache-2.0
//
// The load-bearing claim: the bit-composition path equals the naive
// int->float path for every stored code and any FP16 scale.  Checked
// exhaustively at the kernel level and on whole tensors.

#include <doctest.h>

#include <cstdint>
#include <vector>

#include "moeinfer/dequant.hpp"
#include "moeinfer/quantize.hpp"
#include "moeinfer/rng.hpp"

using namespace moe;

namespace {

Half random_positive_scale(Rng& rng) {
  // Any positive finite FP16, subnormals through 65504.
  return Half(static_cast<uint16_t>(1 + rng.uniform_int(0x7BFF)));
}

Half naive_one(uint8_t code, Half scale, QuantBits bits) {
  const int q = static_cast<int>(code) - quant_offset(bits);
  return half_mul(f64_to_half(static_cast<double>(q)), scale);
}

}  // namespace

TEST_SUITE("dequant") {

TEST_CASE("mantissa composition anchors") {
  CHECK(debias_const_u8().bits == 0x6480);
  CHECK(debias_const_u4().bits == 0x6408);
  // 131 composed into 1024's mantissa gives 1155; 1155 - 1152 = 3.
  const auto p = i2f_pair_u8(131, 128);
  CHECK(half_to_f64(p.first) == 3.0);
  CHECK(half_to_f64(p.second) == 0.0);
  // Nibble 11 -> 1035; 1035 - 1032 = 3.
  const uint32_t word = 11u;  // logical element 0, all others 0
  const auto v = i2f_magic_u4(word);
  CHECK(half_to_f64(v[0]) == 3.0);
  for (int j = 1; j < 8; ++j) {
    CHECK(half_to_f64(v[j]) == -8.0);
  }
}

TEST_CASE("8-bit composition equals naive for all codes and random scales") {
  Rng rng(0x30C0);
  for (int trial = 0; trial < 1000; ++trial) {
    const Half s = random_positive_scale(rng);
    for (uint32_t code = 0; code < 256; ++code) {
      const auto pair = i2f_pair_u8(static_cast<uint8_t>(code),
                                    static_cast<uint8_t>(255 - code));
      const Half fast = half_mul(pair.first, s);
      const Half want = naive_one(static_cast<uint8_t>(code), s, QuantBits::b8);
      if (fast != want) {
        CAPTURE(code);
        CAPTURE(s.bits);
      }
      REQUIRE(fast == want);
    }
  }
}

TEST_CASE("4-bit composition equals naive for all codes in all positions") {
  Rng rng(0x30C1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Half s = random_positive_scale(rng);
    for (uint32_t code = 0; code < 16; ++code) {
      for (int pos = 0; pos < 8; ++pos) {
        std::vector<uint8_t> logical(8, static_cast<uint8_t>(15 - code));
        logical[pos] = static_cast<uint8_t>(code);
        const auto packed = pack_int4_interleaved(logical);
        const auto vals = i2f_magic_u4(load_u4_word(packed.data()));
        const Half fast = half_mul(vals[pos], s);
        const Half want =
            naive_one(static_cast<uint8_t>(code), s, QuantBits::b4);
        if (fast != want) {
          CAPTURE(code);
          CAPTURE(pos);
          CAPTURE(s.bits);
        }
        REQUIRE(fast == want);
      }
    }
  }
}

TEST_CASE("worked example dequantizes to [1.0, -1.0, 0.50390625]") {
  QuantizedExpertWeights qw;
  qw.bits = QuantBits::b8;
  qw.e = 1;
  qw.m = 3;
  qw.n = 1;
  qw.packed = {255, 1, 192};
  qw.scales = {Half(0x2008)};
  const auto out = dequantize_fast(qw);
  CHECK(out.at(0, 0, 0).bits == 0x3C00);  //  1.0 (127 * scale rounds up)
  CHECK(out.at(0, 1, 0).bits == 0xBC00);  // -1.0
  CHECK(out.at(0, 2, 0).bits == 0x3808);  //  0.50390625 == 64 * scale, exact
  const auto nv = dequantize_naive(qw);
  CHECK(nv.data == out.data);
}

TEST_CASE("fast equals naive on whole tensors") {
  Rng rng(0x30C2);
  const size_t shapes[][3] = {{1, 1, 8}, {2, 5, 16}, {8, 64, 256}, {3, 9, 11}};
  for (const auto& sh : shapes) {
    for (QuantBits bits : {QuantBits::b8, QuantBits::b4}) {
      if (bits == QuantBits::b4 && sh[2] % 8 != 0) {
        continue;
      }
      QuantizedExpertWeights qw;
      qw.bits = bits;
      qw.e = sh[0];
      qw.m = sh[1];
      qw.n = sh[2];
      const size_t count = sh[0] * sh[1] * sh[2];
      std::vector<uint8_t> codes(count);
      const uint32_t hi = bits == QuantBits::b8 ? 256 : 16;
      for (auto& c : codes) {
        c = static_cast<uint8_t>(rng.uniform_int(hi));
      }
      qw.packed = bits == QuantBits::b8 ? codes : pack_int4_interleaved(codes);
      qw.scales.resize(sh[0] * sh[2]);
      for (auto& s : qw.scales) {
        s = random_positive_scale(rng);
      }
      const auto fast = dequantize_fast(qw);
      const auto naive = dequantize_naive(qw);
      REQUIRE(fast.data == naive.data);
    }
  }
}

TEST_CASE("round trip through quantize keeps sign and magnitude order") {
  Rng rng(0x30C3);
  HalfTensor3 w(2, 16, 8);
  for (auto& h : w.data) {
    h = f64_to_half(rng.normal());
  }
  const auto qw = quantize(w, QuantBits::b8);
  const auto back = dequantize_fast(qw);
  for (size_t i = 0; i < w.data.size(); ++i) {
    const double a = half_to_f64(w.data[i]);
    const double b = half_to_f64(back.data[i]);
    if (a > 0.1) {
      CHECK(b > 0.0);
    }
    if (a < -0.1) {
      CHECK(b < 0.0);
    }
  }
}

TEST_CASE("shape validation") {
  QuantizedExpertWeights qw;
  qw.bits = QuantBits::b8;
  qw.e = 1;
  qw.m = 2;
  qw.n = 3;
  qw.packed = {128, 128, 128, 128};  // wrong: should be 6 bytes
  qw.scales = {kHalfOne, kHalfOne, kHalfOne};
  CHECK_THROWS_AS(dequantize_fast(qw), std::invalid_argument);
  qw.packed = {128, 128, 128, 128, 128, 128};
  qw.scales = {kHalfOne};  // wrong: should be 3
  CHECK_THROWS_AS(dequantize_naive(qw), std::invalid_argument);
}

}  // TEST_SUITE
