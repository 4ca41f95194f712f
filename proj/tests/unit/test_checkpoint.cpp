// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint format tests: canonical byte-identical round trips, header
// validation, checksum integrity, and the payload-size bookkeeping the
// size-reduction claims are measured with.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "doctest.h"
#include "moeinfer/checkpoint.hpp"
#include "moeinfer/model.hpp"

using namespace moe;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 3;
  cfg.n_dec_layers = 2;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 40;
  cfg.moe_every = 2;
  cfg.max_seq_len = 16;
  return cfg;
}

bool vec_bits_equal(const std::vector<Half>& a, const std::vector<Half>& b) {
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

bool attn_equal(const AttentionWeights& a, const AttentionWeights& b) {
  return vec_bits_equal(a.ln.gamma, b.ln.gamma) &&
         vec_bits_equal(a.ln.beta, b.ln.beta) &&
         vec_bits_equal(a.wq.data, b.wq.data) &&
         vec_bits_equal(a.wk.data, b.wk.data) &&
         vec_bits_equal(a.wv.data, b.wv.data) &&
         vec_bits_equal(a.wo.data, b.wo.data) &&
         vec_bits_equal(a.bq, b.bq) && vec_bits_equal(a.bk, b.bk) &&
         vec_bits_equal(a.bv, b.bv) && vec_bits_equal(a.bo, b.bo);
}

bool ffn_equal(const FfnBlock& a, const FfnBlock& b) {
  if (a.index() != b.index()) {
    return false;
  }
  if (const auto* ma = std::get_if<MoeFfn>(&a)) {
    const auto& mb = std::get<MoeFfn>(b);
    bool ok = vec_bits_equal(ma->ln.gamma, mb.ln.gamma) &&
              vec_bits_equal(ma->gate_w.data, mb.gate_w.data) &&
              vec_bits_equal(ma->gate_b, mb.gate_b) &&
              vec_bits_equal(ma->b1.data, mb.b1.data) &&
              vec_bits_equal(ma->b2.data, mb.b2.data) &&
              ma->quantized() == mb.quantized();
    if (ma->quantized()) {
      ok = ok && ma->qw1->packed == mb.qw1->packed &&
           ma->qw2->packed == mb.qw2->packed &&
           vec_bits_equal(ma->qw1->scales, mb.qw1->scales) &&
           vec_bits_equal(ma->qw2->scales, mb.qw2->scales) &&
           ma->qw1->bits == mb.qw1->bits;
    } else {
      ok = ok && vec_bits_equal(ma->w1.data, mb.w1.data) &&
           vec_bits_equal(ma->w2.data, mb.w2.data);
    }
    return ok;
  }
  const auto& da = std::get<DenseFfn>(a);
  const auto& db = std::get<DenseFfn>(b);
  return vec_bits_equal(da.ln.gamma, db.ln.gamma) &&
         vec_bits_equal(da.w1.data, db.w1.data) &&
         vec_bits_equal(da.b1, db.b1) &&
         vec_bits_equal(da.w2.data, db.w2.data) &&
         vec_bits_equal(da.b2, db.b2);
}

bool models_equal(const Model& a, const Model& b) {
  if (!(a.config == b.config) || a.precision != b.precision) {
    return false;
  }
  bool ok = vec_bits_equal(a.tok_embed.data, b.tok_embed.data) &&
            vec_bits_equal(a.pos_embed.data, b.pos_embed.data) &&
            vec_bits_equal(a.enc_ln.gamma, b.enc_ln.gamma) &&
            vec_bits_equal(a.enc_ln.beta, b.enc_ln.beta) &&
            vec_bits_equal(a.dec_ln.gamma, b.dec_ln.gamma) &&
            vec_bits_equal(a.dec_ln.beta, b.dec_ln.beta) &&
            vec_bits_equal(a.out_w.data, b.out_w.data) &&
            vec_bits_equal(a.out_b, b.out_b);
  for (size_t i = 0; ok && i < a.encoder.size(); ++i) {
    ok = attn_equal(a.encoder[i].self_attn, b.encoder[i].self_attn) &&
         ffn_equal(a.encoder[i].ffn, b.encoder[i].ffn);
  }
  for (size_t i = 0; ok && i < a.decoder.size(); ++i) {
    ok = attn_equal(a.decoder[i].self_attn, b.decoder[i].self_attn) &&
         attn_equal(a.decoder[i].cross_attn, b.decoder[i].cross_attn) &&
         ffn_equal(a.decoder[i].ffn, b.decoder[i].ffn);
  }
  return ok;
}

std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("serialize-parse round trip preserves every tensor bit") {
  std::vector<Model> variants;
  variants.push_back(random_model(small_config(), 42));
  variants.push_back(quantize_model(variants[0], QuantBits::b8));
  variants.push_back(quantize_model(variants[0], QuantBits::b4));
  for (const Model& src : variants) {
    const auto bytes = serialize_model(src);
    const Model back = parse_model(bytes);
    CHECK(models_equal(src, back));
    // Canonical form: re-serializing reproduces the identical byte string.
    CHECK(serialize_model(back) == bytes);
  }
}

TEST_CASE("serialization is deterministic") {
  const Model m = random_model(small_config(), 7);
  CHECK(serialize_model(m) == serialize_model(m));
}

TEST_CASE("file save/load round trip") {
  const Model m = random_model(small_config(), 99);
  const Model q = quantize_model(m, QuantBits::b4);
  const std::string path = temp_path("moeinfer_ckpt_test.moec");
  save_model(q, path);
  const Model back = load_model(path);
  CHECK(models_equal(q, back));

  // save(load(f)) writes the identical file.
  const std::string path2 = temp_path("moeinfer_ckpt_test2.moec");
  save_model(back, path2);
  std::ifstream f1(path, std::ios::binary);
  std::ifstream f2(path2, std::ios::binary);
  const std::vector<char> b1((std::istreambuf_iterator<char>(f1)),
                             std::istreambuf_iterator<char>());
  const std::vector<char> b2((std::istreambuf_iterator<char>(f2)),
                             std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("quantized checkpoints decode identically after a round trip") {
  ModelConfig cfg = small_config();
  const Model q = quantize_model(random_model(cfg, 5), QuantBits::b8);
  const auto back = parse_model(serialize_model(q));

  const std::vector<std::vector<int32_t>> src{{2, 3, 4, 5, 6, 7}};
  DecodeOptions opts;
  opts.beam = 2;
  opts.max_len = 8;
  const auto a = beam_search_decode(q, src, opts);
  const auto b = beam_search_decode(back, src, opts);
  CHECK(a.translations == b.translations);
  CHECK(a.traffic == b.traffic);
}

TEST_CASE("malformed inputs are rejected") {
  const Model m = random_model(small_config(), 1);
  const auto good = serialize_model(m);

  SUBCASE("truncated") {
    for (const size_t keep : {size_t{0}, size_t{3}, size_t{11},
                              good.size() / 2, good.size() - 1}) {
      std::vector<uint8_t> cut(good.begin(),
                               good.begin() + static_cast<long>(keep));
      CHECK_THROWS_AS(parse_model(cut), std::runtime_error);
    }
  }
  SUBCASE("bad magic") {
    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(parse_model(bad), std::runtime_error);
  }
  SUBCASE("bad version") {
    auto bad = good;
    bad[4] = 9;
    CHECK_THROWS_AS(parse_model(bad), std::runtime_error);
  }
  SUBCASE("flipped payload byte breaks the checksum") {
    auto bad = good;
    bad[bad.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(parse_model(bad), std::runtime_error);
  }
  SUBCASE("trailing garbage") {
    auto bad = good;
    bad.push_back(0);
    CHECK_THROWS_AS(parse_model(bad), std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_model("/nonexistent/dir/x.moec"),
                    std::runtime_error);
  }
}

TEST_CASE("expert payload accounting") {
  ModelConfig cfg;  // desk-scale defaults: d_ffn = 256 >= 256
  const Model m = random_model(cfg, 11);
  const Model q8 = quantize_model(m, QuantBits::b8);
  const Model q4 = quantize_model(m, QuantBits::b4);

  // Count MoE layers and verify the closed-form byte counts.
  uint64_t n_moe = 0;
  for (uint32_t i = 0; i < cfg.n_enc_layers; ++i) {
    n_moe += cfg.is_moe_layer(i) ? 1 : 0;
  }
  for (uint32_t i = 0; i < cfg.n_dec_layers; ++i) {
    n_moe += cfg.is_moe_layer(i) ? 1 : 0;
  }
  const uint64_t numel =
      n_moe * 2ull * cfg.n_experts * cfg.d_model * cfg.d_ffn;
  CHECK(expert_payload_bytes(m) == numel * 2);
  CHECK(expert_fp32_equivalent_bytes(m) == numel * 4);
  CHECK(expert_fp32_equivalent_bytes(q4) == numel * 4);

  const uint64_t scale_bytes =
      n_moe * cfg.n_experts * (cfg.d_ffn + cfg.d_model) * 2ull;
  CHECK(expert_payload_bytes(q8) == numel + scale_bytes);
  CHECK(expert_payload_bytes(q4) == numel / 2 + scale_bytes);

  // The ratios behind the size-reduction claim, on the desk-scale config.
  const double fp32 = static_cast<double>(expert_fp32_equivalent_bytes(m));
  CHECK(static_cast<double>(expert_payload_bytes(q4)) / fp32 <= 0.13);
  CHECK(static_cast<double>(expert_payload_bytes(q8)) / fp32 <= 0.26);
}

}  // TEST_SUITE
