// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "moeinfer/checkpoint.hpp"
#include "moeinfer/dequant.hpp"
#include "moeinfer/grouped_gemm.hpp"
#include "moeinfer/model.hpp"
#include "moeinfer/quantize.hpp"
#include "moeinfer/reference.hpp"
#include "moeinfer/rng.hpp"
#include "moeinfer/routing.hpp"

namespace moe {

namespace {

struct Ctx {
  SuiteResult r;

  explicit Ctx(const char* name) { r.name = name; }
  void check(bool ok, const std::string& what) {
    ++r.checks;
    if (!ok) {
      ++r.failures;
      if (r.messages.size() < 8) {
        r.messages.push_back(what);
      }
    }
  }
};

Half random_positive_scale(Rng& rng) {
  // Any positive finite FP16, subnormals included.
  return Half(static_cast<uint16_t>(1 + rng.uniform_int(0x7BFF)));
}

bool tensors_equal(const HalfTensor3& a, const HalfTensor3& b) {
  if (a.e != b.e || a.m != b.m || a.n != b.n) {
    return false;
  }
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i].bits != b.data[i].bits) {
      return false;
    }
  }
  return true;
}

bool mats_equal(const HalfMat& a, const HalfMat& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    return false;
  }
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i].bits != b.data[i].bits) {
      return false;
    }
  }
  return true;
}

}  // namespace

SuiteResult verify_dequant() {
  Ctx c("dequant");
  Rng rng(0x5eedDE0ull);

  // Magic composition and debias constants.
  c.check(compose_magic(3).bits == 0x6403 && half_to_f64(Half(0x6403)) == 1027.0,
          "compose_magic(3) != 0x6403 (1027.0)");
  c.check(compose_magic(0).bits == 0x6400 && half_to_f64(Half(0x6400)) == 1024.0,
          "compose_magic(0) != 0x6400 (1024.0)");
  c.check(debias_const_u8().bits == 0x6480 &&
              half_to_f64(debias_const_u8()) == 1152.0,
          "8-bit debias constant is not 1152.0 (0x6480)");
  c.check(debias_const_u4().bits == 0x6408 &&
              half_to_f64(debias_const_u4()) == 1032.0,
          "4-bit debias constant is not 1032.0 (0x6408)");

  // Full-domain signed recovery: every stored code maps to code - offset.
  for (int code = 0; code < 256; ++code) {
    const Half got = half_sub(compose_magic(static_cast<uint16_t>(code)),
                              debias_const_u8());
    c.check(got.bits == f64_to_half(static_cast<double>(code - 128)).bits,
            "8-bit magic subtraction failed for code " + std::to_string(code));
  }
  for (int code = 0; code < 16; ++code) {
    std::vector<uint8_t> logical(8, static_cast<uint8_t>(15 - code));
    for (size_t lane = 0; lane < 8; ++lane) {
      logical[lane] = static_cast<uint8_t>(code);
      const auto packed = pack_int4_interleaved(logical);
      const auto vals = i2f_magic_u4(load_u4_word(packed.data()));
      bool ok = true;
      for (size_t j = 0; j < 8; ++j) {
        const int want = static_cast<int>(logical[j]) - 8;
        ok = ok &&
             vals[j].bits == f64_to_half(static_cast<double>(want)).bits;
      }
      c.check(ok, "4-bit magic subtraction failed for code " +
                      std::to_string(code) + " lane " + std::to_string(lane));
      logical[lane] = static_cast<uint8_t>(15 - code);
    }
  }

  // Worked example: scale 0x2008, stored codes 255, 1, 192.
  {
    QuantizedExpertWeights qw;
    qw.bits = QuantBits::b8;
    qw.e = 1;
    qw.m = 3;
    qw.n = 1;
    qw.packed = {255, 1, 192};
    qw.scales = {Half(0x2008)};
    const HalfTensor3 out = dequantize_fast(qw);
    c.check(out.data[0].bits == 0x3C00 && out.data[1].bits == 0xBC00 &&
                out.data[2].bits == 0x3808,
            "worked dequantization example produced wrong bits");
  }

  // Optimized vs naive over every code at many scales.
  {
    QuantizedExpertWeights qw;
    qw.bits = QuantBits::b8;
    qw.e = 1;
    qw.m = 256;
    qw.n = 4;
    qw.packed.resize(qw.m * qw.n);
    for (size_t mi = 0; mi < qw.m; ++mi) {
      for (size_t ni = 0; ni < qw.n; ++ni) {
        qw.packed[mi * qw.n + ni] = static_cast<uint8_t>((mi + 61 * ni) & 0xFF);
      }
    }
    for (int trial = 0; trial < 250; ++trial) {
      qw.scales.assign(qw.n, Half(0));
      for (auto& s : qw.scales) {
        s = random_positive_scale(rng);
      }
      c.check(tensors_equal(dequantize_fast(qw), dequantize_naive(qw)),
              "8-bit fast/naive dequantization mismatch");
    }
  }
  {
    const size_t m = 16;
    const size_t n = 8;
    std::vector<uint8_t> logical(m * n);
    for (size_t mi = 0; mi < m; ++mi) {
      for (size_t ni = 0; ni < n; ++ni) {
        logical[mi * n + ni] = static_cast<uint8_t>((mi + ni) & 0xF);
      }
    }
    QuantizedExpertWeights qw;
    qw.bits = QuantBits::b4;
    qw.e = 1;
    qw.m = m;
    qw.n = n;
    qw.packed = pack_int4_interleaved(logical);
    for (int trial = 0; trial < 250; ++trial) {
      qw.scales.assign(n, Half(0));
      for (auto& s : qw.scales) {
        s = random_positive_scale(rng);
      }
      c.check(tensors_equal(dequantize_fast(qw), dequantize_naive(qw)),
              "4-bit fast/naive dequantization mismatch");
    }
  }
  return c.r;
}

SuiteResult verify_routing() {
  Ctx c("routing");
  Rng rng(0x5eed0002ull);

  for (int inst = 0; inst < 10000; ++inst) {
    const size_t rows = 1 + rng.uniform_int(64);
    const size_t n_experts = 1 + rng.uniform_int(8);
    std::vector<float> logits(rows * n_experts);
    for (auto& l : logits) {
      l = static_cast<float>(rng.uniform() * 6.0 - 3.0);
    }
    std::vector<uint8_t> finished(rows, 0);
    for (auto& f : finished) {
      f = rng.uniform() < 0.125 ? 1 : 0;
    }

    const auto decisions = gate_top1(logits, rows, n_experts);
    const auto plan = build_routing_plan(decisions, finished, n_experts);

    // Bijectivity.
    std::vector<uint32_t> sorted = plan.permutation;
    std::sort(sorted.begin(), sorted.end());
    bool bijective = sorted.size() == rows;
    for (size_t i = 0; bijective && i < rows; ++i) {
      bijective = sorted[i] == i;
    }
    c.check(bijective, "permutation is not a bijection");
    bool inverse_ok = plan.inverse_permutation.size() == rows;
    for (size_t i = 0; inverse_ok && i < rows; ++i) {
      inverse_ok = plan.inverse_permutation[plan.permutation[i]] == i;
    }
    c.check(inverse_ok, "inverse permutation inconsistent");

    // Offsets partition the active region.
    size_t n_finished = 0;
    for (const auto f : finished) {
      n_finished += f;
    }
    bool offsets_ok = plan.expert_offsets.size() == n_experts + 1 &&
                      plan.expert_offsets.front() == 0 &&
                      plan.expert_offsets.back() == plan.active_rows &&
                      plan.active_rows == rows - n_finished;
    for (size_t e = 0; offsets_ok && e < n_experts; ++e) {
      offsets_ok = plan.expert_offsets[e] <= plan.expert_offsets[e + 1];
    }
    c.check(offsets_ok, "expert offsets do not partition the active rows");

    // Every sorted position holds the right kind of row, stably ordered.
    bool content_ok = true;
    for (size_t e = 0; content_ok && e < n_experts; ++e) {
      uint32_t prev = 0;
      bool first = true;
      for (uint32_t i = plan.expert_offsets[e]; i < plan.expert_offsets[e + 1];
           ++i) {
        const uint32_t r = plan.permutation[i];
        content_ok = content_ok && decisions[r].expert == e && !finished[r];
        content_ok = content_ok && (first || r > prev);
        prev = r;
        first = false;
      }
    }
    c.check(content_ok, "expert slice holds wrong or unstable rows");
    bool tail_ok = true;
    uint32_t prev = 0;
    bool first = true;
    for (size_t i = plan.active_rows; i < rows; ++i) {
      const uint32_t r = plan.permutation[i];
      tail_ok = tail_ok && finished[r] != 0 && (first || r > prev);
      prev = r;
      first = false;
    }
    c.check(tail_ok, "finished rows not parked stably at the tail");

    // permute then unpermute (unit scales) reproduces active rows exactly.
    if (inst % 10 == 0) {
      HalfMat x(rows, 4);
      for (auto& h : x.data) {
        h = f32_to_half(static_cast<float>(rng.normal()));
      }
      auto unit = decisions;
      for (auto& d : unit) {
        d.scale = Half(0x3C00);  // 1.0
      }
      const HalfMat back =
          unpermute_and_scale(permute_rows(x, plan), plan, unit);
      bool id_ok = true;
      for (size_t r = 0; r < rows; ++r) {
        for (size_t col = 0; col < x.cols; ++col) {
          const uint16_t want =
              finished[r] != 0 ? uint16_t{0} : x.at(r, col).bits;
          id_ok = id_ok && back.at(r, col).bits == want;
        }
      }
      c.check(id_ok, "permute/unpermute round trip altered rows");
    }
  }
  return c.r;
}

SuiteResult verify_gemm() {
  Ctx c("gemm");
  Rng rng(0x9e3779b9ull);

  for (int inst = 0; inst < 200; ++inst) {
    const size_t n_experts = 1 + rng.uniform_int(8);
    const size_t rows = 1 + rng.uniform_int(64);
    const size_t m = 1 + rng.uniform_int(64);
    size_t n = 1 + rng.uniform_int(64);
    n = (n + 7) / 8 * 8;  // keep every instance 4-bit packable
    const Activation act = inst % 2 == 0 ? Activation::relu : Activation::none;

    // Random expert assignment with some finished rows.
    std::vector<GateDecision> decisions(rows);
    std::vector<uint8_t> finished(rows, 0);
    for (size_t r = 0; r < rows; ++r) {
      decisions[r] = {static_cast<uint32_t>(r),
                      static_cast<uint32_t>(rng.uniform_int(n_experts)),
                      Half(0x3C00)};
      finished[r] = rng.uniform() < 0.125 ? 1 : 0;
    }
    const auto plan = build_routing_plan(decisions, finished, n_experts);
    const auto problems = make_grouped_problems(plan);

    HalfMat x(rows, m);
    for (auto& h : x.data) {
      h = f32_to_half(static_cast<float>(rng.normal()));
    }
    HalfTensor3 w(n_experts, m, n);
    for (auto& h : w.data) {
      h = f32_to_half(static_cast<float>(0.25 * rng.normal()));
    }
    HalfMat bias(n_experts, n);
    for (auto& h : bias.data) {
      h = f32_to_half(static_cast<float>(0.05 * rng.normal()));
    }

    // Oracle: per-problem naive triple loop.
    HalfMat want(rows, n);
    for (const auto& p : problems) {
      HalfMat slice(p.row_end - p.row_begin, m);
      for (size_t r = 0; r < slice.rows; ++r) {
        std::copy(x.row(p.row_begin + r).begin(), x.row(p.row_begin + r).end(),
                  slice.row(r).begin());
      }
      const HalfMat y = ref::matmul(slice, w.expert(p.expert), m, n,
                                    bias.row(p.expert),
                                    act == Activation::relu);
      for (size_t r = 0; r < slice.rows; ++r) {
        std::copy(y.row(r).begin(), y.row(r).end(),
                  want.row(p.row_begin + r).begin());
      }
    }

    const HalfMat got = grouped_gemm_f16(x, problems, w, bias, act);
    c.check(mats_equal(got, want), "grouped f16 GEMM diverged from oracle");

    if (inst % 4 != 0) {
      continue;
    }

    // Quantized path: fused kernel vs naive-dequantize-then-oracle.
    const QuantBits bits = inst % 8 == 0 ? QuantBits::b4 : QuantBits::b8;
    const auto qw = quantize(w, bits);
    const HalfTensor3 wdq = dequantize_naive(qw);
    HalfMat want_q(rows, n);
    for (const auto& p : problems) {
      HalfMat slice(p.row_end - p.row_begin, m);
      for (size_t r = 0; r < slice.rows; ++r) {
        std::copy(x.row(p.row_begin + r).begin(), x.row(p.row_begin + r).end(),
                  slice.row(r).begin());
      }
      const HalfMat y = ref::matmul(slice, wdq.expert(p.expert), m, n,
                                    bias.row(p.expert),
                                    act == Activation::relu);
      for (size_t r = 0; r < slice.rows; ++r) {
        std::copy(y.row(r).begin(), y.row(r).end(),
                  want_q.row(p.row_begin + r).begin());
      }
    }

    TrafficCounter fused_tc, sep_tc, f16_tc;
    const HalfMat fused =
        grouped_gemm_quant(x, problems, qw, bias, act, &fused_tc);
    c.check(mats_equal(fused, want_q),
            "fused quantized GEMM diverged from the naive-dequant oracle");

    const HalfMat sep = grouped_gemm_quant(x, problems, qw, bias, act, &sep_tc,
                                           1, DequantMode::separate_pass);
    c.check(mats_equal(sep, fused),
            "separate-pass dequantization changed GEMM results");
    if (!problems.empty()) {
      c.check(fused_tc.total_read() < sep_tc.total_read() &&
                  fused_tc.bytes_written < sep_tc.bytes_written,
              "fused kernel did not reduce traffic vs separate pass");
    }

    // Weight-byte ordering for the same problem set.  Per touched expert the
    // counts are 2mn (f16), mn + 2n (int8 codes + f16 scales) and mn/2 + 2n
    // (int4), so f16 > int8 needs m > 2 to amortize the per-column scales;
    // int8 > int4 holds for any m.  Production matrices are far above that
    // boundary, so the strict check applies only where the claim is claimed.
    grouped_gemm_f16(x, problems, w, bias, act, &f16_tc);
    const auto qw8 = quantize(w, QuantBits::b8);
    const auto qw4 = quantize(w, QuantBits::b4);
    TrafficCounter tc8, tc4;
    grouped_gemm_quant(x, problems, qw8, bias, act, &tc8);
    grouped_gemm_quant(x, problems, qw4, bias, act, &tc4);
    if (!problems.empty() && m > 2) {
      c.check(f16_tc.weight_bytes_read > tc8.weight_bytes_read &&
                  tc8.weight_bytes_read > tc4.weight_bytes_read,
              "weight traffic does not fall with precision");
    }
  }
  return c.r;
}

SuiteResult verify_e2e() {
  Ctx c("e2e");
  Rng rng(0xabcdefull);

  // MoE layer vs the per-token oracle across precisions.
  {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.d_ffn = 48;
    cfg.n_experts = 4;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.n_heads = 2;
    cfg.vocab_size = 8;
    cfg.max_seq_len = 4;
    for (int inst = 0; inst < 20; ++inst) {
      const Model donor = random_model(cfg, 9000 + inst);
      const MoeFfn* blk = nullptr;
      for (const auto& l : donor.encoder) {
        if (const auto* moe = std::get_if<MoeFfn>(&l.ffn)) {
          blk = moe;
          break;
        }
      }
      MoeFfn w = *blk;
      if (inst % 3 == 1) {
        w.qw1 = quantize(w.w1, QuantBits::b8);
        w.qw2 = quantize(w.w2, QuantBits::b8);
        w.w1 = HalfTensor3();
        w.w2 = HalfTensor3();
      } else if (inst % 3 == 2) {
        w.qw1 = quantize(w.w1, QuantBits::b4);
        w.qw2 = quantize(w.w2, QuantBits::b4);
        w.w1 = HalfTensor3();
        w.w2 = HalfTensor3();
      }
      HalfMat x(17, cfg.d_model);
      for (auto& h : x.data) {
        h = f32_to_half(static_cast<float>(0.5 * rng.normal()));
      }
      std::vector<uint8_t> finished(x.rows, 0);
      for (auto& f : finished) {
        f = rng.uniform() < 0.2 ? 1 : 0;
      }
      c.check(mats_equal(moe_ffn_forward(x, w, finished),
                         ref::moe_per_token(x, w, finished)),
              "moe_ffn_forward diverged from the per-token oracle");
    }
  }

  // Decoding: cached+incremental vs from-scratch, pruning transparency,
  // checkpoint round trip.
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_ffn = 48;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.n_experts = 4;
  cfg.n_heads = 2;
  cfg.vocab_size = 24;
  cfg.moe_every = 1;
  cfg.max_seq_len = 24;

  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    Model m = random_model(cfg, seed);
    if (seed == 2) {
      m = quantize_model(m, QuantBits::b8);
    } else if (seed == 3) {
      m = quantize_model(m, QuantBits::b4);
    }

    std::vector<int32_t> sentence(6);
    for (auto& t : sentence) {
      t = static_cast<int32_t>(2 + rng.uniform_int(cfg.vocab_size - 2));
    }
    DecodeOptions opts;
    opts.beam = 1;
    opts.max_len = 8;
    const auto got = beam_search_decode(m, {sentence}, opts);
    c.check(got.translations[0] == ref::decode_nocache(m, sentence, 8),
            "incremental decode diverged from full recomputation");

    // Prune on/off parity on a small batch.
    std::vector<std::vector<int32_t>> batch(3, sentence);
    for (auto& s : batch) {
      for (auto& t : s) {
        t = static_cast<int32_t>(2 + rng.uniform_int(cfg.vocab_size - 2));
      }
    }
    DecodeOptions on = opts;
    on.beam = 2;
    on.prune = true;
    DecodeOptions off = on;
    off.prune = false;
    const auto a = beam_search_decode(m, batch, on);
    const auto b = beam_search_decode(m, batch, off);
    c.check(a.translations == b.translations && a.steps == b.steps,
            "pruning changed decode output");
    c.check(a.traffic.expert.total_read() <= b.traffic.expert.total_read(),
            "pruning increased expert traffic");

    // Serialization round trip preserves behaviour and bytes.
    const auto bytes = serialize_model(m);
    const Model back = parse_model(bytes);
    c.check(serialize_model(back) == bytes,
            "checkpoint round trip not byte-identical");
    const auto again = beam_search_decode(back, batch, on);
    c.check(again.translations == a.translations &&
                again.traffic == a.traffic,
            "reloaded checkpoint decodes differently");
  }
  return c.r;
}

std::vector<SuiteResult> run_suites(const std::string& which) {
  std::vector<SuiteResult> out;
  if (which == "dequant" || which == "all") {
    out.push_back(verify_dequant());
  }
  if (which == "routing" || which == "all") {
    out.push_back(verify_routing());
  }
  if (which == "gemm" || which == "all") {
    out.push_back(verify_gemm());
  }
  if (which == "e2e" || which == "all") {
    out.push_back(verify_e2e());
  }
  if (out.empty()) {
    throw std::invalid_argument("unknown verification suite '" + which +
                                "' (want dequant|routing|gemm|e2e|all)");
  }
  return out;
}

}  // namespace moe
