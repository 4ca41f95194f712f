// SPDX-License-Identifier: Apache-2.0
//
// Transformer layer tests.  Every forward is checked bit for bit against a
// slow recomputation that shares none of the engine's batching, routing or
// panel machinery: attention against a per-row softmax written out in the
// test, the MoE block against a one-token-at-a-time oracle.

#include <cmath>
#include <variant>
#include <vector>

#include "doctest.h"
#include "moeinfer/model.hpp"
#include "moeinfer/reference.hpp"
#include "moeinfer/rng.hpp"

using namespace moe;

namespace {

HalfMat random_x(size_t rows, size_t cols, Rng& rng, double sigma = 0.5) {
  HalfMat x(rows, cols);
  for (auto& h : x.data) {
    h = f32_to_half(static_cast<float>(sigma * rng.normal()));
  }
  return x;
}

std::vector<Half> random_vec(size_t n, Rng& rng, double sigma = 0.1) {
  std::vector<Half> v(n);
  for (auto& h : v) {
    h = f32_to_half(static_cast<float>(sigma * rng.normal()));
  }
  return v;
}

size_t mismatches(const HalfMat& a, const HalfMat& b) {
  REQUIRE(a.rows == b.rows);
  REQUIRE(a.cols == b.cols);
  size_t bad = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    bad += a.data[i].bits != b.data[i].bits;
  }
  return bad;
}

bool bits_equal(std::span<const Half> a, std::span<const Half> b) {
  if (a.size() != b.size()) {
    return false;
  }
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].bits != b[i].bits) {
      return false;
    }
  }
  return true;
}

AttentionWeights random_attn(size_t d, Rng& rng) {
  AttentionWeights w;
  w.ln.gamma.resize(d);
  w.ln.beta.resize(d);
  for (size_t i = 0; i < d; ++i) {
    w.ln.gamma[i] = f32_to_half(static_cast<float>(1.0 + 0.1 * rng.normal()));
    w.ln.beta[i] = f32_to_half(static_cast<float>(0.05 * rng.normal()));
  }
  const double sigma = 1.0 / std::sqrt(static_cast<double>(d));
  w.wq = random_x(d, d, rng, sigma);
  w.wk = random_x(d, d, rng, sigma);
  w.wv = random_x(d, d, rng, sigma);
  w.wo = random_x(d, d, rng, sigma);
  w.bq = random_vec(d, rng, 0.02);
  w.bk = random_vec(d, rng, 0.02);
  w.bv = random_vec(d, rng, 0.02);
  w.bo = random_vec(d, rng, 0.02);
  return w;
}

MoeFfn random_moe(size_t d, size_t d_ffn, size_t n_experts, Rng& rng) {
  MoeFfn w;
  w.ln.gamma.resize(d);
  w.ln.beta.resize(d);
  for (size_t i = 0; i < d; ++i) {
    w.ln.gamma[i] = f32_to_half(static_cast<float>(1.0 + 0.1 * rng.normal()));
    w.ln.beta[i] = f32_to_half(static_cast<float>(0.05 * rng.normal()));
  }
  w.gate_w = random_x(d, n_experts, rng, 0.3);
  w.gate_b = random_vec(n_experts, rng, 0.05);
  w.w1 = HalfTensor3(n_experts, d, d_ffn);
  w.w2 = HalfTensor3(n_experts, d_ffn, d);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(d_ffn));
  for (auto& h : w.w1.data) {
    h = f32_to_half(static_cast<float>(s1 * rng.normal()));
  }
  for (auto& h : w.w2.data) {
    h = f32_to_half(static_cast<float>(s2 * rng.normal()));
  }
  w.b1 = random_x(n_experts, d_ffn, rng, 0.02);
  w.b2 = random_x(n_experts, d, rng, 0.02);
  return w;
}

MoeFfn quantized_copy(const MoeFfn& src, QuantBits bits) {
  MoeFfn q = src;
  q.qw1 = quantize(q.w1, bits);
  q.qw2 = quantize(q.w2, bits);
  q.w1 = HalfTensor3();
  q.w2 = HalfTensor3();
  return q;
}

// Slow full-batch attention written out by hand: per-row layer norm and
// per-head f32 softmax over the allowed keys, then the output projection.
HalfMat naive_attention(const HalfMat& x, const AttentionWeights& w,
                        size_t n_heads, AttnMask mask, size_t segment) {
  const size_t t = x.rows;
  const size_t d = x.cols;
  if (segment == 0) {
    segment = t;
  }
  const HalfMat xn = layer_norm(x, w.ln);
  const HalfMat q = ref::matmul(xn, w.wq.data, d, d, w.bq, false);
  const HalfMat k = ref::matmul(xn, w.wk.data, d, d, w.bk, false);
  const HalfMat v = ref::matmul(xn, w.wv.data, d, d, w.bv, false);

  const size_t dk = d / n_heads;
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
  HalfMat ctx(t, d);
  for (size_t r = 0; r < t; ++r) {
    const size_t seg_begin = (r / segment) * segment;
    const size_t n_keys =
        mask == AttnMask::causal ? r - seg_begin + 1 : segment;
    for (size_t h = 0; h < n_heads; ++h) {
      const size_t h0 = h * dk;
      std::vector<float> sc(n_keys);
      for (size_t j = 0; j < n_keys; ++j) {
        float s = 0.0f;
        for (size_t c = 0; c < dk; ++c) {
          s += half_to_f32(q.at(r, h0 + c)) *
               half_to_f32(k.at(seg_begin + j, h0 + c));
        }
        sc[j] = s * inv_sqrt_dk;
      }
      float mx = sc[0];
      for (size_t j = 1; j < n_keys; ++j) {
        mx = std::max(mx, sc[j]);
      }
      float sum = 0.0f;
      for (size_t j = 0; j < n_keys; ++j) {
        sc[j] = std::exp(sc[j] - mx);
        sum += sc[j];
      }
      for (size_t c = 0; c < dk; ++c) {
        float acc = 0.0f;
        for (size_t j = 0; j < n_keys; ++j) {
          acc += (sc[j] / sum) * half_to_f32(v.at(seg_begin + j, h0 + c));
        }
        ctx.at(r, h0 + c) = f32_to_half(acc);
      }
    }
  }

  const HalfMat o = ref::matmul(ctx, w.wo.data, d, d, w.bo, false);
  HalfMat out(t, d);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = half_add(x.data[i], o.data[i]);
  }
  return out;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("layer_norm matches a scalar recomputation") {
  Rng rng(11);
  const size_t d = 48;
  LayerNormWeights ln;
  ln.gamma = random_vec(d, rng, 0.2);
  ln.beta = random_vec(d, rng, 0.1);
  for (size_t i = 0; i < d; ++i) {
    ln.gamma[i] = half_add(ln.gamma[i], f32_to_half(1.0f));
  }

  const HalfMat x = random_x(9, d, rng, 1.5);
  const HalfMat y = layer_norm(x, ln);
  for (size_t r = 0; r < x.rows; ++r) {
    float mean = 0.0f;
    for (size_t c = 0; c < d; ++c) {
      mean += half_to_f32(x.at(r, c));
    }
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (size_t c = 0; c < d; ++c) {
      const float dx = half_to_f32(x.at(r, c)) - mean;
      var += dx * dx;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + 1e-5f);
    for (size_t c = 0; c < d; ++c) {
      const float want = (half_to_f32(x.at(r, c)) - mean) * inv *
                             half_to_f32(ln.gamma[c]) +
                         half_to_f32(ln.beta[c]);
      CHECK(y.at(r, c).bits == f32_to_half(want).bits);
    }
  }
}

TEST_CASE("layer_norm of a constant row is exactly beta") {
  const size_t d = 16;
  LayerNormWeights ln;
  ln.gamma.assign(d, f32_to_half(1.25f));
  ln.beta.assign(d, f32_to_half(0.375f));
  HalfMat x(2, d);
  for (size_t c = 0; c < d; ++c) {
    x.at(0, c) = f32_to_half(3.0f);
    x.at(1, c) = f32_to_half(-7.5f);
  }
  const HalfMat y = layer_norm(x, ln);
  for (size_t i = 0; i < y.data.size(); ++i) {
    CHECK(y.data[i].bits == f32_to_half(0.375f).bits);
  }
}

TEST_CASE("attention matches the handwritten slow path") {
  Rng rng(202);
  const size_t d = 64;
  const size_t n_heads = 4;
  const AttentionWeights w = random_attn(d, rng);

  SUBCASE("single segment, no mask") {
    const HalfMat x = random_x(10, d, rng);
    const HalfMat got = attention_forward(x, w, n_heads, AttnMask::none, 0);
    CHECK(mismatches(got, naive_attention(x, w, n_heads, AttnMask::none, 0)) ==
          0);
  }
  SUBCASE("three sentences attend only within themselves") {
    const HalfMat x = random_x(15, d, rng);
    const HalfMat got = attention_forward(x, w, n_heads, AttnMask::none, 5);
    CHECK(mismatches(got, naive_attention(x, w, n_heads, AttnMask::none, 5)) ==
          0);

    // Changing sentence 2 must leave sentences 0 and 1 untouched.
    HalfMat x2 = x;
    for (size_t c = 0; c < d; ++c) {
      x2.at(12, c) = f32_to_half(2.0f);
    }
    const HalfMat got2 = attention_forward(x2, w, n_heads, AttnMask::none, 5);
    for (size_t r = 0; r < 10; ++r) {
      CHECK(bits_equal(got.row(r), got2.row(r)));
    }
  }
  SUBCASE("causal segments") {
    const HalfMat x = random_x(12, d, rng);
    const HalfMat got = attention_forward(x, w, n_heads, AttnMask::causal, 6);
    CHECK(mismatches(got,
                     naive_attention(x, w, n_heads, AttnMask::causal, 6)) == 0);
  }
  SUBCASE("thread count never changes bits") {
    const HalfMat x = random_x(21, d, rng);
    const HalfMat a = attention_forward(x, w, n_heads, AttnMask::causal, 7,
                                        nullptr, 1);
    const HalfMat b = attention_forward(x, w, n_heads, AttnMask::causal, 7,
                                        nullptr, 5);
    CHECK(mismatches(a, b) == 0);
  }
  SUBCASE("rows must split evenly into segments") {
    const HalfMat x = random_x(10, d, rng);
    CHECK_THROWS_AS(attention_forward(x, w, n_heads, AttnMask::none, 3),
                    std::invalid_argument);
    CHECK_THROWS_AS(attention_forward(x, w, 3, AttnMask::none, 0),
                    std::invalid_argument);
  }
}

TEST_CASE("dense ffn matches the reference chain") {
  Rng rng(303);
  const size_t d = 32;
  const size_t d_ffn = 56;
  DenseFfn w;
  w.ln.gamma = random_vec(d, rng, 0.1);
  w.ln.beta = random_vec(d, rng, 0.1);
  for (auto& g : w.ln.gamma) {
    g = half_add(g, f32_to_half(1.0f));
  }
  w.w1 = random_x(d, d_ffn, rng, 0.2);
  w.b1 = random_vec(d_ffn, rng, 0.05);
  w.w2 = random_x(d_ffn, d, rng, 0.2);
  w.b2 = random_vec(d, rng, 0.05);

  const HalfMat x = random_x(13, d, rng);
  const HalfMat got = dense_ffn_forward(x, w);

  const HalfMat xn = layer_norm(x, w.ln);
  const HalfMat h = ref::matmul(xn, w.w1.data, d, d_ffn, w.b1, true);
  const HalfMat y = ref::matmul(h, w.w2.data, d_ffn, d, w.b2, false);
  for (size_t i = 0; i < x.data.size(); ++i) {
    CHECK(got.data[i].bits == half_add(x.data[i], y.data[i]).bits);
  }
}

TEST_CASE("moe ffn matches the per-token oracle at every precision") {
  Rng rng(404);
  const size_t d = 64;
  const size_t d_ffn = 96;
  const size_t n_experts = 8;

  for (int trial = 0; trial < 12; ++trial) {
    const MoeFfn w = random_moe(d, d_ffn, n_experts, rng);
    const HalfMat x = random_x(33, d, rng);
    std::vector<uint8_t> finished(x.rows, 0);
    for (size_t r = 0; r < x.rows; ++r) {
      finished[r] = rng.uniform() < 0.25 ? 1 : 0;
    }

    CAPTURE(trial);
    const HalfMat want_f16 = ref::moe_per_token(x, w, finished);
    CHECK(mismatches(moe_ffn_forward(x, w, finished), want_f16) == 0);

    if (trial < 4) {
      const MoeFfn w8 = quantized_copy(w, QuantBits::b8);
      CHECK(mismatches(moe_ffn_forward(x, w8, finished),
                       ref::moe_per_token(x, w8, finished)) == 0);
      const MoeFfn w4 = quantized_copy(w, QuantBits::b4);
      CHECK(mismatches(moe_ffn_forward(x, w4, finished),
                       ref::moe_per_token(x, w4, finished)) == 0);
    }
  }
}

TEST_CASE("moe ffn thread count never changes bits") {
  Rng rng(505);
  const MoeFfn w = random_moe(64, 96, 8, rng);
  const HalfMat x = random_x(41, 64, rng);
  const std::vector<uint8_t> finished(x.rows, 0);
  const HalfMat a = moe_ffn_forward(x, w, finished, nullptr, 1);
  const HalfMat b = moe_ffn_forward(x, w, finished, nullptr, 6);
  CHECK(mismatches(a, b) == 0);
}

TEST_CASE("finished rows pass through exactly and leave live rows alone") {
  Rng rng(606);
  const MoeFfn w = random_moe(64, 96, 8, rng);
  const MoeFfn w4 = quantized_copy(w, QuantBits::b4);
  const HalfMat x = random_x(24, 64, rng);

  std::vector<uint8_t> none(x.rows, 0);
  std::vector<uint8_t> some(x.rows, 0);
  for (size_t r = 0; r < x.rows; r += 3) {
    some[r] = 1;
  }

  for (const MoeFfn* blk : {&w, &w4}) {
    ModelTraffic t_none, t_some;
    const HalfMat all = moe_ffn_forward(x, *blk, none, &t_none);
    const HalfMat got = moe_ffn_forward(x, *blk, some, &t_some);
    for (size_t r = 0; r < x.rows; ++r) {
      if (some[r] != 0) {
        CHECK(bits_equal(got.row(r), x.row(r)));  // exact pass-through
      } else {
        CHECK(bits_equal(got.row(r), all.row(r)));  // batch-invariant
      }
    }
    // Dropping rows must strictly shrink expert traffic.
    CHECK(t_some.expert.total_read() < t_none.expert.total_read());
    CHECK(t_some.expert.bytes_written < t_none.expert.bytes_written);
  }
}

TEST_CASE("random_model is deterministic in the seed") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 3;
  cfg.n_dec_layers = 2;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 32;

  const Model a = random_model(cfg, 1234);
  const Model b = random_model(cfg, 1234);
  const Model c = random_model(cfg, 1235);

  CHECK(bits_equal(a.tok_embed.data, b.tok_embed.data));
  CHECK(bits_equal(a.pos_embed.data, b.pos_embed.data));
  CHECK(bits_equal(a.out_w.data, b.out_w.data));
  CHECK(bits_equal(a.out_b, b.out_b));
  for (size_t i = 0; i < a.encoder.size(); ++i) {
    CHECK(bits_equal(a.encoder[i].self_attn.wq.data,
                     b.encoder[i].self_attn.wq.data));
  }
  for (size_t i = 0; i < a.decoder.size(); ++i) {
    CHECK(bits_equal(a.decoder[i].cross_attn.wv.data,
                     b.decoder[i].cross_attn.wv.data));
  }
  CHECK(!bits_equal(a.tok_embed.data, c.tok_embed.data));
}

TEST_CASE("moe layers sit exactly where moe_every puts them") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 4;
  cfg.n_dec_layers = 3;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 16;

  SUBCASE("every second layer") {
    cfg.moe_every = 2;
    const Model m = random_model(cfg, 9);
    m.validate();
    for (uint32_t i = 0; i < cfg.n_enc_layers; ++i) {
      CHECK(std::holds_alternative<MoeFfn>(m.encoder[i].ffn) == (i % 2 == 0));
    }
    for (uint32_t i = 0; i < cfg.n_dec_layers; ++i) {
      CHECK(std::holds_alternative<MoeFfn>(m.decoder[i].ffn) == (i % 2 == 0));
    }
  }
  SUBCASE("every layer") {
    cfg.moe_every = 1;
    const Model m = random_model(cfg, 9);
    m.validate();
    for (const auto& l : m.encoder) {
      CHECK(std::holds_alternative<MoeFfn>(l.ffn));
    }
    for (const auto& l : m.decoder) {
      CHECK(std::holds_alternative<MoeFfn>(l.ffn));
    }
  }
  SUBCASE("every third layer") {
    cfg.moe_every = 3;
    const Model m = random_model(cfg, 9);
    m.validate();
    CHECK(std::holds_alternative<MoeFfn>(m.encoder[0].ffn));
    CHECK(!std::holds_alternative<MoeFfn>(m.encoder[1].ffn));
    CHECK(!std::holds_alternative<MoeFfn>(m.encoder[2].ffn));
    CHECK(std::holds_alternative<MoeFfn>(m.encoder[3].ffn));
  }
}

TEST_CASE("quantize_model touches expert tensors and nothing else") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 16;

  const Model m = random_model(cfg, 77);
  const Model q = quantize_model(m, QuantBits::b4);
  q.validate();
  CHECK(q.precision == Precision::int4);
  CHECK(bits_equal(q.tok_embed.data, m.tok_embed.data));
  CHECK(bits_equal(q.out_w.data, m.out_w.data));

  const auto& moe_src = std::get<MoeFfn>(m.encoder[0].ffn);
  const auto& moe_q = std::get<MoeFfn>(q.encoder[0].ffn);
  CHECK(moe_q.quantized());
  CHECK(moe_q.w1.size() == 0);
  CHECK(moe_q.w2.size() == 0);
  REQUIRE(moe_q.qw1.has_value());
  CHECK(moe_q.qw1->bits == QuantBits::b4);
  CHECK(moe_q.qw1->e == cfg.n_experts);
  CHECK(moe_q.qw1->m == cfg.d_model);
  CHECK(moe_q.qw1->n == cfg.d_ffn);
  CHECK(bits_equal(moe_q.b1.data, moe_src.b1.data));  // biases stay FP16
  CHECK(bits_equal(moe_q.gate_w.data, moe_src.gate_w.data));

  // Dense layers are untouched.
  const auto& dense_src = std::get<DenseFfn>(m.encoder[1].ffn);
  const auto& dense_q = std::get<DenseFfn>(q.encoder[1].ffn);
  CHECK(bits_equal(dense_q.w1.data, dense_src.w1.data));

  // The quantized codes match the standalone quantizer.
  const auto direct = quantize(moe_src.w1, QuantBits::b4);
  CHECK(moe_q.qw1->packed == direct.packed);
  CHECK(bits_equal(moe_q.qw1->scales, direct.scales));

  CHECK_THROWS_AS(quantize_model(q, QuantBits::b8), std::invalid_argument);
}

TEST_CASE("encoder_forward shape, determinism and validation") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 1;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 16;
  const Model m = random_model(cfg, 5);

  Rng rng(8);
  std::vector<std::vector<int32_t>> src(3, std::vector<int32_t>(9));
  for (auto& s : src) {
    for (auto& t : s) {
      t = static_cast<int32_t>(2 + rng.uniform_int(cfg.vocab_size - 2));
    }
  }

  const HalfMat a = encoder_forward(m, src);
  CHECK(a.rows == 27);
  CHECK(a.cols == cfg.d_model);
  const HalfMat b = encoder_forward(m, src);
  CHECK(mismatches(a, b) == 0);
  const HalfMat c = encoder_forward(m, src, nullptr, 4);
  CHECK(mismatches(a, c) == 0);

  // A sentence's encoding must not depend on its batch mates.
  const HalfMat solo = encoder_forward(m, {src[1]});
  for (size_t p = 0; p < 9; ++p) {
    CHECK(bits_equal(solo.row(p), a.row(9 + p)));
  }

  CHECK_THROWS_AS(encoder_forward(m, {}), std::invalid_argument);
  CHECK_THROWS_AS(encoder_forward(m, {{2, 3}, {2}}), std::invalid_argument);
  CHECK_THROWS_AS(encoder_forward(m, {{2, 99}}), std::invalid_argument);
  CHECK_THROWS_AS(encoder_forward(m, {{2, -1}}), std::invalid_argument);
  CHECK_THROWS_AS(
      encoder_forward(m, {std::vector<int32_t>(cfg.max_seq_len + 1, 2)}),
      std::invalid_argument);
}

TEST_CASE("config validation rejects malformed shapes") {
  ModelConfig cfg;  // defaults are valid
  cfg.validate();

  ModelConfig bad = cfg;
  bad.d_model = 60;  // not a multiple of 8
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.n_heads = 3;  // 64 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.d_ffn = 100;  // not a multiple of 8
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.vocab_size = 3;  // needs BOS, EOS and room for payload tokens
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.moe_every = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.max_seq_len = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("model validation catches flavor and shape drift") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 1;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 16;

  Model m = random_model(cfg, 3);
  m.validate();

  Model wrong_flavor = m;
  std::swap(wrong_flavor.encoder[0].ffn, wrong_flavor.encoder[1].ffn);
  CHECK_THROWS_AS(wrong_flavor.validate(), std::invalid_argument);

  Model wrong_embed = m;
  wrong_embed.tok_embed = HalfMat(cfg.vocab_size, cfg.d_model + 8);
  CHECK_THROWS_AS(wrong_embed.validate(), std::invalid_argument);

  Model stale_masters = m;
  stale_masters.precision = Precision::int8;  // masters still FP16
  CHECK_THROWS_AS(stale_masters.validate(), std::invalid_argument);
}

}  // TEST_SUITE
