// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "attn_inner.hpp"
#include "moeinfer/rng.hpp"
#include "moeinfer/threading.hpp"

namespace moe {

void ModelConfig::validate() const {
  require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
          "config: d_model must be a positive multiple of n_heads");
  require(d_ffn > 0 && d_ffn % 8 == 0,
          "config: d_ffn must be a positive multiple of 8");
  require(d_model % 8 == 0,
          "config: d_model must be a multiple of 8");
  require(n_enc_layers > 0 && n_dec_layers > 0, "config: need layers");
  require(n_experts > 0, "config: need at least one expert");
  require(vocab_size >= 4, "config: vocab must cover BOS, EOS and payload");
  require(moe_every >= 1, "config: moe_every must be >= 1");
  require(max_seq_len >= 2, "config: max_seq_len too small");
}

const char* precision_name(Precision p) {
  switch (p) {
    case Precision::f16:
      return "fp16";
    case Precision::int8:
      return "int8";
    case Precision::int4:
      return "int4";
  }
  return "?";
}

namespace {

LayerNormWeights random_ln(size_t d, Rng& rng) {
  LayerNormWeights ln;
  ln.gamma.resize(d);
  ln.beta.resize(d);
  for (auto& g : ln.gamma) {
    g = f64_to_half(1.0 + 0.1 * rng.normal());
  }
  for (auto& b : ln.beta) {
    b = f64_to_half(0.05 * rng.normal());
  }
  return ln;
}

HalfMat random_mat(size_t r, size_t c, double sigma, Rng& rng) {
  HalfMat m(r, c);
  for (auto& h : m.data) {
    h = f64_to_half(sigma * rng.normal());
  }
  return m;
}

std::vector<Half> random_vec(size_t n, double sigma, Rng& rng) {
  std::vector<Half> v(n);
  for (auto& h : v) {
    h = f64_to_half(sigma * rng.normal());
  }
  return v;
}

AttentionWeights random_attn(size_t d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionWeights w;
  w.ln = random_ln(d, rng);
  w.wq = random_mat(d, d, s, rng);
  w.bq = random_vec(d, 0.02, rng);
  w.wk = random_mat(d, d, s, rng);
  w.bk = random_vec(d, 0.02, rng);
  w.wv = random_mat(d, d, s, rng);
  w.bv = random_vec(d, 0.02, rng);
  w.wo = random_mat(d, d, s, rng);
  w.bo = random_vec(d, 0.02, rng);
  return w;
}

FfnBlock random_ffn(const ModelConfig& cfg, uint32_t layer, Rng& rng) {
  const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.d_ffn));
  if (!cfg.is_moe_layer(layer)) {
    DenseFfn f;
    f.ln = random_ln(cfg.d_model, rng);
    f.w1 = random_mat(cfg.d_model, cfg.d_ffn, s1, rng);
    f.b1 = random_vec(cfg.d_ffn, 0.02, rng);
    f.w2 = random_mat(cfg.d_ffn, cfg.d_model, s2, rng);
    f.b2 = random_vec(cfg.d_model, 0.02, rng);
    return f;
  }
  MoeFfn f;
  f.ln = random_ln(cfg.d_model, rng);
  f.gate_w = random_mat(cfg.d_model, cfg.n_experts, s1, rng);
  f.gate_b = random_vec(cfg.n_experts, 0.02, rng);
  f.w1 = HalfTensor3(cfg.n_experts, cfg.d_model, cfg.d_ffn);
  for (auto& h : f.w1.data) {
    h = f64_to_half(s1 * rng.normal());
  }
  f.b1 = random_mat(cfg.n_experts, cfg.d_ffn, 0.02, rng);
  f.w2 = HalfTensor3(cfg.n_experts, cfg.d_ffn, cfg.d_model);
  for (auto& h : f.w2.data) {
    h = f64_to_half(s2 * rng.normal());
  }
  f.b2 = random_mat(cfg.n_experts, cfg.d_model, 0.02, rng);
  return f;
}

void accumulate_copy_traffic(TrafficCounter* tc, uint64_t read,
                             uint64_t written) {
  if (tc != nullptr) {
    tc->activation_bytes_read += read;
    tc->bytes_written += written;
  }
}

}  // namespace

Model random_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Model m;
  m.config = cfg;
  m.precision = Precision::f16;
  m.tok_embed = random_mat(cfg.vocab_size, cfg.d_model, 1.0, rng);
  m.pos_embed = random_mat(cfg.max_seq_len, cfg.d_model, 0.1, rng);
  m.encoder.reserve(cfg.n_enc_layers);
  for (uint32_t i = 0; i < cfg.n_enc_layers; ++i) {
    m.encoder.push_back({random_attn(cfg.d_model, rng),
                         random_ffn(cfg, i, rng)});
  }
  m.decoder.reserve(cfg.n_dec_layers);
  for (uint32_t i = 0; i < cfg.n_dec_layers; ++i) {
    DecoderLayer l{random_attn(cfg.d_model, rng),
                   random_attn(cfg.d_model, rng), random_ffn(cfg, i, rng)};
    m.decoder.push_back(std::move(l));
  }
  m.enc_ln = random_ln(cfg.d_model, rng);
  m.dec_ln = random_ln(cfg.d_model, rng);
  m.out_w = random_mat(cfg.d_model, cfg.vocab_size,
                       1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
  m.out_b = random_vec(cfg.vocab_size, 0.02, rng);
  return m;
}

Model quantize_model(const Model& m, QuantBits bits, int threads) {
  require(m.precision == Precision::f16,
          "quantize_model: source must be an fp16 model");
  Model out = m;
  out.precision = bits == QuantBits::b8 ? Precision::int8 : Precision::int4;
  auto do_block = [&](FfnBlock& blk) {
    if (auto* moe = std::get_if<MoeFfn>(&blk)) {
      moe->qw1 = quantize(moe->w1, bits, threads);
      moe->qw2 = quantize(moe->w2, bits, threads);
      moe->w1 = HalfTensor3();
      moe->w2 = HalfTensor3();
    }
  };
  for (auto& l : out.encoder) {
    do_block(l.ffn);
  }
  for (auto& l : out.decoder) {
    do_block(l.ffn);
  }
  return out;
}

void layer_norm_row(std::span<const Half> x, const LayerNormWeights& ln,
                    std::span<Half> out) {
  const size_t n = x.size();
  float mean = 0.0f;
  for (size_t i = 0; i < n; ++i) {
    mean += half_to_f32(x[i]);
  }
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (size_t i = 0; i < n; ++i) {
    const float d = half_to_f32(x[i]) - mean;
    var += d * d;
  }
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + 1e-5f);
  for (size_t i = 0; i < n; ++i) {
    const float y = (half_to_f32(x[i]) - mean) * inv * half_to_f32(ln.gamma[i]) +
                    half_to_f32(ln.beta[i]);
    out[i] = f32_to_half(y);
  }
}

HalfMat layer_norm(const HalfMat& x, const LayerNormWeights& ln) {
  require(ln.gamma.size() == x.cols && ln.beta.size() == x.cols,
          "layer_norm: parameter size mismatch");
  HalfMat out(x.rows, x.cols);
  for (size_t r = 0; r < x.rows; ++r) {
    layer_norm_row(x.row(r), ln, out.row(r));
  }
  return out;
}

HalfMat attention_forward(const HalfMat& x, const AttentionWeights& w,
                          size_t n_heads, AttnMask mask, size_t segment,
                          ModelTraffic* tr, int threads) {
  const size_t t = x.rows;
  const size_t d = x.cols;
  require(n_heads > 0 && d % n_heads == 0,
          "attention: d_model not divisible by n_heads");
  if (segment == 0) {
    segment = t;
  }
  require(segment > 0 && t % segment == 0,
          "attention: rows not divisible into segments");
  TrafficCounter* other = tr != nullptr ? &tr->other : nullptr;

  const HalfMat xn = layer_norm(x, w.ln);
  accumulate_copy_traffic(other, (t * d + 2 * d) * 2, t * d * 2);
  const HalfMat q = gemm_f16(xn, w.wq, w.bq, Activation::none, other, threads);
  const HalfMat k = gemm_f16(xn, w.wk, w.bk, Activation::none, other, threads);
  const HalfMat v = gemm_f16(xn, w.wv, w.bv, Activation::none, other, threads);

  const size_t dk = d / n_heads;
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
  HalfMat ctx(t, d);
  uint64_t key_reads = 0;
  parallel_for(t, threads, [&](size_t r0, size_t r1) {
    std::vector<float> scores;
    for (size_t r = r0; r < r1; ++r) {
      const size_t seg_begin = (r / segment) * segment;
      const size_t n_keys =
          mask == AttnMask::causal ? r - seg_begin + 1 : segment;
      for (size_t h = 0; h < n_heads; ++h) {
        detail::attend_one(q.row(r).data(), k, v, seg_begin, n_keys, h * dk,
                           dk, inv_sqrt_dk, scores, ctx.row(r).data());
      }
    }
  });
  for (size_t r = 0; r < t; ++r) {
    const size_t seg_begin = (r / segment) * segment;
    key_reads += mask == AttnMask::causal ? r - seg_begin + 1 : segment;
  }
  accumulate_copy_traffic(other, (2 * key_reads * d + t * d) * 2, t * d * 2);

  const HalfMat o = gemm_f16(ctx, w.wo, w.bo, Activation::none, other, threads);
  HalfMat out(t, d);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = half_add(x.data[i], o.data[i]);
  }
  accumulate_copy_traffic(other, 2 * t * d * 2, t * d * 2);
  return out;
}

HalfMat dense_ffn_forward(const HalfMat& x, const DenseFfn& w,
                          ModelTraffic* tr, int threads) {
  TrafficCounter* other = tr != nullptr ? &tr->other : nullptr;
  const HalfMat xn = layer_norm(x, w.ln);
  accumulate_copy_traffic(other, (x.size() + 2 * x.cols) * 2, x.size() * 2);
  const HalfMat h = gemm_f16(xn, w.w1, w.b1, Activation::relu, other, threads);
  const HalfMat y = gemm_f16(h, w.w2, w.b2, Activation::none, other, threads);
  HalfMat out(x.rows, x.cols);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = half_add(x.data[i], y.data[i]);
  }
  accumulate_copy_traffic(other, 2 * x.size() * 2, x.size() * 2);
  return out;
}

std::vector<float> gate_logits_f32(const HalfMat& xn, const HalfMat& gate_w,
                                   std::span<const Half> gate_b,
                                   TrafficCounter* tc) {
  require(xn.cols == gate_w.rows, "gate: dimension mismatch");
  require(gate_b.size() == gate_w.cols, "gate: bias size mismatch");
  const size_t t = xn.rows;
  const size_t e = gate_w.cols;
  std::vector<float> out(t * e);
  for (size_t r = 0; r < t; ++r) {
    const Half* xr = xn.row(r).data();
    for (size_t j = 0; j < e; ++j) {
      float acc = 0.0f;
      for (size_t kk = 0; kk < xn.cols; ++kk) {
        acc += half_to_f32(xr[kk]) * half_to_f32(gate_w.at(kk, j));
      }
      out[r * e + j] = acc + half_to_f32(gate_b[j]);
    }
  }
  if (tc != nullptr) {
    tc->weight_bytes_read += gate_w.size() * 2;
    tc->activation_bytes_read += (t * xn.cols + e) * 2;
    tc->bytes_written += t * e * 4;
  }
  return out;
}

HalfMat moe_ffn_forward(const HalfMat& x, const MoeFfn& w,
                        std::span<const uint8_t> finished, ModelTraffic* tr,
                        int threads) {
  require(finished.size() == x.rows, "moe_ffn: finished flag count mismatch");
  const size_t n_experts = w.gate_w.cols;
  TrafficCounter* other = tr != nullptr ? &tr->other : nullptr;
  TrafficCounter* expert = tr != nullptr ? &tr->expert : nullptr;

  const HalfMat xn = layer_norm(x, w.ln);
  accumulate_copy_traffic(other, (x.size() + 2 * x.cols) * 2, x.size() * 2);

  const auto logits = gate_logits_f32(xn, w.gate_w, w.gate_b, other);
  const auto decisions = gate_top1(logits, x.rows, n_experts);
  const auto plan = build_routing_plan(decisions, finished, n_experts);
  const auto problems = make_grouped_problems(plan);

  const HalfMat xp = permute_rows(xn, plan);
  accumulate_copy_traffic(other, xn.size() * 2, xn.size() * 2);

  HalfMat h, y;
  if (w.quantized()) {
    h = grouped_gemm_quant(xp, problems, *w.qw1, w.b1, Activation::relu,
                           expert, threads);
    y = grouped_gemm_quant(h, problems, *w.qw2, w.b2, Activation::none,
                           expert, threads);
  } else {
    h = grouped_gemm_f16(xp, problems, w.w1, w.b1, Activation::relu, expert,
                         threads);
    y = grouped_gemm_f16(h, problems, w.w2, w.b2, Activation::none, expert,
                         threads);
  }

  const HalfMat scattered = unpermute_and_scale(y, plan, decisions);
  accumulate_copy_traffic(other, y.size() * 2, y.size() * 2);

  HalfMat out(x.rows, x.cols);
  for (size_t r = 0; r < x.rows; ++r) {
    const auto xr = x.row(r);
    auto orow = out.row(r);
    if (finished[r] != 0) {
      std::copy(xr.begin(), xr.end(), orow.begin());  // exact pass-through
      continue;
    }
    const auto sr = scattered.row(r);
    for (size_t c = 0; c < x.cols; ++c) {
      orow[c] = half_add(xr[c], sr[c]);
    }
  }
  accumulate_copy_traffic(other, 2 * x.size() * 2, x.size() * 2);
  return out;
}

HalfMat encoder_forward(const Model& m,
                        const std::vector<std::vector<int32_t>>& src,
                        ModelTraffic* tr, int threads) {
  m.config.validate();
  require(!src.empty(), "encoder: empty batch");
  const size_t len = src[0].size();
  require(len >= 1 && len <= m.config.max_seq_len,
          "encoder: source length out of range");
  for (const auto& s : src) {
    require(s.size() == len, "encoder: ragged source batch");
    for (const int32_t tok : s) {
      require(tok >= 0 && static_cast<uint32_t>(tok) < m.config.vocab_size,
              "encoder: token id out of range");
    }
  }

  const size_t d = m.config.d_model;
  HalfMat x(src.size() * len, d);
  for (size_t s = 0; s < src.size(); ++s) {
    for (size_t p = 0; p < len; ++p) {
      auto row = x.row(s * len + p);
      const auto te = m.tok_embed.row(src[s][p]);
      const auto pe = m.pos_embed.row(p);
      for (size_t c = 0; c < d; ++c) {
        row[c] = half_add(te[c], pe[c]);
      }
    }
  }
  if (tr != nullptr) {
    accumulate_copy_traffic(&tr->other, 2 * x.size() * 2, x.size() * 2);
  }

  const std::vector<uint8_t> none(x.rows, 0);
  for (const auto& layer : m.encoder) {
    x = attention_forward(x, layer.self_attn, m.config.n_heads, AttnMask::none,
                          len, tr, threads);
    if (const auto* moe = std::get_if<MoeFfn>(&layer.ffn)) {
      x = moe_ffn_forward(x, *moe, none, tr, threads);
    } else {
      x = dense_ffn_forward(x, std::get<DenseFfn>(layer.ffn), tr, threads);
    }
  }
  HalfMat out = layer_norm(x, m.enc_ln);
  if (tr != nullptr) {
    accumulate_copy_traffic(&tr->other, (x.size() + 2 * d) * 2, x.size() * 2);
  }
  return out;
}

void Model::validate() const {
  config.validate();
  require(tok_embed.rows == config.vocab_size && tok_embed.cols == config.d_model,
          "model: token embedding shape mismatch");
  require(pos_embed.rows == config.max_seq_len && pos_embed.cols == config.d_model,
          "model: position embedding shape mismatch");
  require(encoder.size() == config.n_enc_layers &&
              decoder.size() == config.n_dec_layers,
          "model: layer count mismatch");
  require(out_w.rows == config.d_model && out_w.cols == config.vocab_size &&
              out_b.size() == config.vocab_size,
          "model: output projection shape mismatch");
  auto check_ffn = [&](const FfnBlock& blk, uint32_t idx) {
    require(std::holds_alternative<MoeFfn>(blk) == config.is_moe_layer(idx),
            "model: FFN flavor does not match moe_every placement");
    if (const auto* moe = std::get_if<MoeFfn>(&blk)) {
      const bool has_q = moe->qw1.has_value() && moe->qw2.has_value();
      require(has_q == (precision != Precision::f16),
              "model: expert representation does not match precision");
    }
  };
  for (uint32_t i = 0; i < encoder.size(); ++i) {
    check_ffn(encoder[i].ffn, i);
  }
  for (uint32_t i = 0; i < decoder.size(); ++i) {
    check_ffn(decoder[i].ffn, i);
  }
}

}  // namespace moe
