// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "moeinfer/dequant.hpp"

namespace moe::ref {

namespace {

// Round |x| (x > 0, finite) to a grid of spacing 2^ulp_exp via floor
// arithmetic; ties to even.  Power-of-two scaling is exact in binary64.
double round_to_grid(double ax, int ulp_exp) {
  const double grid = std::ldexp(1.0, ulp_exp);
  const double n = ax / grid;
  double ni = std::floor(n);
  const double frac = n - ni;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(ni, 2.0) == 1.0)) {
    ni += 1.0;
  }
  return ni * grid;
}

double round_binary(double x, int min_normal_exp, int mantissa_bits,
                    double max_finite, double overflow_threshold) {
  if (std::isnan(x)) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  if (x == 0.0 || std::isinf(x)) {
    return x;
  }
  const double sign = x < 0.0 ? -1.0 : 1.0;
  const double ax = std::fabs(x);
  if (ax >= overflow_threshold) {
    return sign * std::numeric_limits<double>::infinity();
  }
  int k = 0;
  std::frexp(ax, &k);  // ax = f * 2^k, f in [0.5, 1) => exponent is k-1
  const int e = std::max(k - 1, min_normal_exp);
  double r = round_to_grid(ax, e - mantissa_bits);
  if (r > max_finite) {  // rounding carried past the top binade
    r = std::numeric_limits<double>::infinity();
  }
  return sign * r;
}

}  // namespace

double f16_round(double x) {
  // Overflow threshold 65520 = midpoint between 65504 and 2^16 (ties toward
  // the even 2^16, which is out of range).
  return round_binary(x, -14, 10, 65504.0, 65520.0);
}

double f32_round(double x) {
  const double max_f = 3.4028234663852886e38;          // (2 - 2^-23) * 2^127
  const double thresh = 3.4028235677973366e38;         // (2 - 2^-24) * 2^127
  return round_binary(x, -126, 23, max_f, thresh);
}

QuantChannel quantize_channel(const std::vector<double>& column, int qmax,
                              int offset) {
  QuantChannel out;
  double maxabs = 0.0;
  for (double v : column) {
    maxabs = std::max(maxabs, std::fabs(v));
  }
  if (maxabs == 0.0) {
    out.scale = 1.0;
  } else {
    out.scale = f16_round(f32_round(maxabs / qmax));
    if (out.scale == 0.0) {
      out.scale = std::ldexp(1.0, -24);  // smallest positive FP16 subnormal
    }
  }
  out.q.reserve(column.size());
  out.stored.reserve(column.size());
  for (double v : column) {
    const double t = std::fabs(v) / out.scale;
    double qa = std::floor(t + 0.5);  // round half away from zero on |v|
    qa = std::min(qa, static_cast<double>(qmax));
    const int q = v < 0.0 ? -static_cast<int>(qa) : static_cast<int>(qa);
    out.q.push_back(q);
    out.stored.push_back(static_cast<uint8_t>(q + offset));
  }
  return out;
}

QuantResult quantize(const HalfTensor3& w, QuantBits bits) {
  const int qmax = quant_qmax(bits);
  const int offset = quant_offset(bits);
  QuantResult out;
  out.stored.resize(w.e * w.m * w.n);
  out.scales.resize(w.e * w.n);
  std::vector<double> column(w.m);
  for (size_t ei = 0; ei < w.e; ++ei) {
    for (size_t ni = 0; ni < w.n; ++ni) {
      for (size_t mi = 0; mi < w.m; ++mi) {
        column[mi] = half_to_f64(w.at(ei, mi, ni));
      }
      const QuantChannel ch = quantize_channel(column, qmax, offset);
      out.scales[ei * w.n + ni] = ch.scale;
      for (size_t mi = 0; mi < w.m; ++mi) {
        out.stored[(ei * w.m + mi) * w.n + ni] = ch.stored[mi];
      }
    }
  }
  return out;
}

RoutingPlan routing_plan(std::span<const uint32_t> experts,
                         std::span<const uint8_t> finished, size_t n_experts) {
  const size_t t = experts.size();
  std::vector<uint32_t> order(t);
  std::iota(order.begin(), order.end(), 0);
  const auto key = [&](uint32_t r) {
    return finished[r] != 0 ? n_experts : static_cast<size_t>(experts[r]);
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](uint32_t a, uint32_t b) { return key(a) < key(b); });

  RoutingPlan plan;
  plan.permutation = order;
  plan.inverse_permutation.assign(t, 0);
  for (size_t i = 0; i < t; ++i) {
    plan.inverse_permutation[order[i]] = static_cast<uint32_t>(i);
  }
  plan.expert_offsets.assign(n_experts + 1, 0);
  uint32_t active = 0;
  for (size_t r = 0; r < t; ++r) {
    if (finished[r] == 0) {
      ++active;
      ++plan.expert_offsets[experts[r] + 1];
    }
  }
  for (size_t e = 1; e <= n_experts; ++e) {
    plan.expert_offsets[e] += plan.expert_offsets[e - 1];
  }
  plan.active_rows = active;
  return plan;
}

HalfMat matmul(const HalfMat& x, std::span<const Half> w, size_t m, size_t n,
               std::span<const Half> bias, bool relu) {
  HalfMat out(x.rows, n);
  for (size_t r = 0; r < x.rows; ++r) {
    for (size_t c = 0; c < n; ++c) {
      float acc = 0.0f;
      for (size_t k = 0; k < m; ++k) {
        acc += half_to_f32(x.at(r, k)) * half_to_f32(w[k * n + c]);
      }
      float h = acc + half_to_f32(bias[c]);
      if (relu && !(h > 0.0f)) {
        h = 0.0f;
      }
      out.at(r, c) = f32_to_half(h);
    }
  }
  return out;
}

HalfMat moe_per_token(const HalfMat& x, const MoeFfn& w,
                      std::span<const uint8_t> finished) {
  require(finished.size() == x.rows, "moe_per_token: finished size mismatch");
  const size_t d = x.cols;
  const size_t n_experts = w.gate_w.cols;
  const HalfTensor3 w1 = w.quantized() ? dequantize_naive(*w.qw1) : w.w1;
  const HalfTensor3 w2 = w.quantized() ? dequantize_naive(*w.qw2) : w.w2;
  const size_t d_ffn = w1.n;

  HalfMat out(x.rows, d);
  HalfMat xn(1, d);
  for (size_t r = 0; r < x.rows; ++r) {
    const auto xr = x.row(r);
    auto orow = out.row(r);
    if (finished[r] != 0) {
      std::copy(xr.begin(), xr.end(), orow.begin());
      continue;
    }

    // LayerNorm in f32.
    float mean = 0.0f;
    for (size_t c = 0; c < d; ++c) {
      mean += half_to_f32(xr[c]);
    }
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (size_t c = 0; c < d; ++c) {
      const float dx = half_to_f32(xr[c]) - mean;
      var += dx * dx;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + 1e-5f);
    for (size_t c = 0; c < d; ++c) {
      xn.at(0, c) = f32_to_half((half_to_f32(xr[c]) - mean) * inv *
                                    half_to_f32(w.ln.gamma[c]) +
                                half_to_f32(w.ln.beta[c]));
    }

    // Gate: f32 logits, top-1 by strict comparison (ties -> lowest index),
    // probability from the max-subtracted softmax.
    std::vector<float> logits(n_experts);
    for (size_t j = 0; j < n_experts; ++j) {
      float acc = 0.0f;
      for (size_t kk = 0; kk < d; ++kk) {
        acc += half_to_f32(xn.at(0, kk)) * half_to_f32(w.gate_w.at(kk, j));
      }
      logits[j] = acc + half_to_f32(w.gate_b[j]);
    }
    size_t best = 0;
    float mx = logits[0];
    for (size_t j = 1; j < n_experts; ++j) {
      if (logits[j] > mx) {
        mx = logits[j];
        best = j;
      }
    }
    float sum = 0.0f;
    for (size_t j = 0; j < n_experts; ++j) {
      sum += std::exp(logits[j] - mx);
    }
    const Half scale = f32_to_half(std::exp(logits[best] - mx) / sum);

    // Run this row alone through its expert, scale, add the residual.
    const HalfMat h =
        matmul(xn, w1.expert(best), d, d_ffn, w.b1.row(best), true);
    const HalfMat y =
        matmul(h, w2.expert(best), d_ffn, d, w.b2.row(best), false);
    for (size_t c = 0; c < d; ++c) {
      orow[c] = half_add(xr[c], half_mul(y.at(0, c), scale));
    }
  }
  return out;
}

namespace {

// Softmax attention for one query row over key rows [kb, kb + nk), all
// heads.  Same evaluation order as the engine's core, written out afresh.
void attend_row(const Half* qrow, const HalfMat& k, const HalfMat& v,
                size_t kb, size_t nk, size_t n_heads, Half* ctx) {
  const size_t d = k.cols;
  const size_t dk = d / n_heads;
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
  std::vector<float> sc(nk);
  for (size_t h = 0; h < n_heads; ++h) {
    const size_t h0 = h * dk;
    for (size_t j = 0; j < nk; ++j) {
      float s = 0.0f;
      for (size_t c = 0; c < dk; ++c) {
        s += half_to_f32(qrow[h0 + c]) * half_to_f32(k.at(kb + j, h0 + c));
      }
      sc[j] = s * inv_sqrt_dk;
    }
    float mx = sc[0];
    for (size_t j = 1; j < nk; ++j) {
      mx = std::max(mx, sc[j]);
    }
    float sum = 0.0f;
    for (size_t j = 0; j < nk; ++j) {
      sc[j] = std::exp(sc[j] - mx);
      sum += sc[j];
    }
    for (size_t c = 0; c < dk; ++c) {
      float acc = 0.0f;
      for (size_t j = 0; j < nk; ++j) {
        acc += (sc[j] / sum) * half_to_f32(v.at(kb + j, h0 + c));
      }
      ctx[h0 + c] = f32_to_half(acc);
    }
  }
}

// x + MHA(LN(x)), causal over x itself.
HalfMat self_attention(const HalfMat& x, const AttentionWeights& w,
                       size_t n_heads) {
  const HalfMat xn = layer_norm(x, w.ln);
  const HalfMat q = gemm_f16(xn, w.wq, w.bq, Activation::none);
  const HalfMat k = gemm_f16(xn, w.wk, w.bk, Activation::none);
  const HalfMat v = gemm_f16(xn, w.wv, w.bv, Activation::none);
  HalfMat ctx(x.rows, x.cols);
  for (size_t r = 0; r < x.rows; ++r) {
    attend_row(q.row(r).data(), k, v, 0, r + 1, n_heads, ctx.row(r).data());
  }
  const HalfMat o = gemm_f16(ctx, w.wo, w.bo, Activation::none);
  HalfMat out(x.rows, x.cols);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = half_add(x.data[i], o.data[i]);
  }
  return out;
}

// x + MHA(LN(x)) with keys/values drawn from the full encoder output.
HalfMat cross_attention(const HalfMat& x, const AttentionWeights& w,
                        size_t n_heads, const HalfMat& enc) {
  const HalfMat xn = layer_norm(x, w.ln);
  const HalfMat q = gemm_f16(xn, w.wq, w.bq, Activation::none);
  const HalfMat k = gemm_f16(enc, w.wk, w.bk, Activation::none);
  const HalfMat v = gemm_f16(enc, w.wv, w.bv, Activation::none);
  HalfMat ctx(x.rows, x.cols);
  for (size_t r = 0; r < x.rows; ++r) {
    attend_row(q.row(r).data(), k, v, 0, enc.rows, n_heads,
               ctx.row(r).data());
  }
  const HalfMat o = gemm_f16(ctx, w.wo, w.bo, Activation::none);
  HalfMat out(x.rows, x.cols);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = half_add(x.data[i], o.data[i]);
  }
  return out;
}

}  // namespace

std::vector<float> next_token_logits(const Model& m, const HalfMat& enc,
                                     std::span<const int32_t> hist) {
  const size_t d = m.config.d_model;
  const size_t vocab = m.config.vocab_size;

  // Rebuild the whole prefix from scratch: BOS then everything generated.
  const size_t t_rows = hist.size() + 1;
  HalfMat x(t_rows, d);
  for (size_t t = 0; t < t_rows; ++t) {
    const int32_t tok = t == 0 ? kBosToken : hist[t - 1];
    const auto te = m.tok_embed.row(tok);
    const auto pe = m.pos_embed.row(t);
    for (size_t c = 0; c < d; ++c) {
      x.at(t, c) = half_add(te[c], pe[c]);
    }
  }

  const std::vector<uint8_t> none(t_rows, 0);
  for (const DecoderLayer& layer : m.decoder) {
    x = self_attention(x, layer.self_attn, m.config.n_heads);
    x = cross_attention(x, layer.cross_attn, m.config.n_heads, enc);
    if (const auto* moe = std::get_if<MoeFfn>(&layer.ffn)) {
      x = moe_ffn_forward(x, *moe, none);
    } else {
      x = dense_ffn_forward(x, std::get<DenseFfn>(layer.ffn));
    }
  }

  const HalfMat xf = layer_norm(x, m.dec_ln);
  const HalfMat logits = gemm_f16(xf, m.out_w, m.out_b, Activation::none);
  const auto lrow = logits.row(t_rows - 1);
  std::vector<float> out(vocab);
  for (size_t tkn = 0; tkn < vocab; ++tkn) {
    out[tkn] = half_to_f32(lrow[tkn]);
  }
  return out;
}

std::vector<float> next_token_logprobs(const Model& m, const HalfMat& enc,
                                       std::span<const int32_t> hist) {
  std::vector<float> logp = next_token_logits(m, enc, hist);
  const size_t vocab = logp.size();
  float mx = logp[0];
  for (size_t tkn = 1; tkn < vocab; ++tkn) {
    mx = std::max(mx, logp[tkn]);
  }
  float sum = 0.0f;
  for (size_t tkn = 0; tkn < vocab; ++tkn) {
    sum += std::exp(logp[tkn] - mx);
  }
  const float lse = std::log(sum);
  for (size_t tkn = 0; tkn < vocab; ++tkn) {
    logp[tkn] = logp[tkn] - mx - lse;
  }
  return logp;
}

std::vector<int32_t> decode_nocache(const Model& m,
                                    const std::vector<int32_t>& src,
                                    uint32_t max_len) {
  m.validate();
  const HalfMat enc = encoder_forward(m, {src});
  const size_t vocab = m.config.vocab_size;

  std::vector<int32_t> hist;
  float score = 0.0f;
  for (uint32_t step = 0; step < max_len; ++step) {
    const auto logp = next_token_logprobs(m, enc, hist);

    // Greedy pick on cumulative log-probability; strict > keeps the lowest
    // token on ties, matching the beam candidate order at width 1.
    size_t best = 0;
    float best_score = -std::numeric_limits<float>::infinity();
    for (size_t tkn = 0; tkn < vocab; ++tkn) {
      const float cand = score + logp[tkn];
      if (cand > best_score) {
        best_score = cand;
        best = tkn;
      }
    }
    if (static_cast<int32_t>(best) == kEosToken) {
      hist.push_back(kEosToken);
      return hist;
    }
    hist.push_back(static_cast<int32_t>(best));
    score = best_score;
  }
  return hist;  // ran out of steps; unfinished on purpose
}

}  // namespace moe::ref
