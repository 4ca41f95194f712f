// SPDX-License-Identifier: Apache-2.0
//
// Incremental beam-search decoding.
//
// Row layout is fixed for the whole decode: row r = sentence (r / beam),
// beam (r % beam).  Each row owns a contiguous stripe of the self-attention
// KV cache, so rows never read each other's state and a finished sentence
// cannot perturb live ones -- that independence is what makes batch pruning
// output-transparent.
//
// Candidate rule per sentence and step: rank all (beam, token) pairs by
// cumulative log-probability (ties: lower beam, then lower token id).  If
// the top candidate is EOS the sentence finishes with that beam's history;
// otherwise the best beam_width non-EOS candidates become the new beams.
// Step 0 expands only beam 0, since all beams start identical.

#include <algorithm>
#include <cmath>
#include <limits>

#include "attn_inner.hpp"
#include "moeinfer/model.hpp"
#include "moeinfer/threading.hpp"

namespace moe {

namespace {

struct LayerCache {
  HalfMat self_k, self_v;    // (rows * max_len, d); row r step t at r*max_len+t
  HalfMat cross_k, cross_v;  // (batch * src_len, d), fixed after prefill
};

struct Candidate {
  float score;
  uint32_t beam;
  int32_t token;
};

bool candidate_less(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) {
    return a.score > b.score;
  }
  if (a.beam != b.beam) {
    return a.beam < b.beam;
  }
  return a.token < b.token;
}

// x + MHA(LN(x)) where each row r attends to key rows
// [key_base(r), key_base(r) + keys(r)) of k/v.
template <typename KeyBase, typename KeyCount>
HalfMat attend_rows(const HalfMat& x, const AttentionWeights& w,
                    const HalfMat& q, const HalfMat& k, const HalfMat& v,
                    size_t n_heads, KeyBase key_base, KeyCount keys,
                    ModelTraffic* tr, int threads) {
  const size_t d = x.cols;
  const size_t dk = d / n_heads;
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
  TrafficCounter* other = tr != nullptr ? &tr->other : nullptr;

  HalfMat ctx(x.rows, d);
  parallel_for(x.rows, threads, [&](size_t r0, size_t r1) {
    std::vector<float> scores;
    for (size_t r = r0; r < r1; ++r) {
      for (size_t h = 0; h < n_heads; ++h) {
        detail::attend_one(q.row(r).data(), k, v, key_base(r), keys(r),
                           h * dk, dk, inv_sqrt_dk, scores, ctx.row(r).data());
      }
    }
  });
  if (other != nullptr) {
    uint64_t key_reads = 0;
    for (size_t r = 0; r < x.rows; ++r) {
      key_reads += keys(r);
    }
    other->activation_bytes_read += (2 * key_reads * d + x.rows * d) * 2;
    other->bytes_written += x.rows * d * 2;
  }

  const HalfMat o = gemm_f16(ctx, w.wo, w.bo, Activation::none, other, threads);
  HalfMat out(x.rows, d);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = half_add(x.data[i], o.data[i]);
  }
  if (other != nullptr) {
    other->activation_bytes_read += 2 * x.size() * 2;
    other->bytes_written += x.size() * 2;
  }
  return out;
}

HalfMat ffn_forward(const HalfMat& x, const FfnBlock& blk,
                    std::span<const uint8_t> finished, ModelTraffic* tr,
                    int threads) {
  if (const auto* moe = std::get_if<MoeFfn>(&blk)) {
    return moe_ffn_forward(x, *moe, finished, tr, threads);
  }
  return dense_ffn_forward(x, std::get<DenseFfn>(blk), tr, threads);
}

}  // namespace

DecodeResult beam_search_decode(const Model& m,
                                const std::vector<std::vector<int32_t>>& src,
                                const DecodeOptions& opts) {
  m.validate();
  require(opts.beam >= 1 && opts.beam <= 4, "decode: beam width out of range");
  require(opts.max_len >= 1 && opts.max_len <= m.config.max_seq_len,
          "decode: max_len exceeds the position table");

  DecodeResult res;
  ModelTraffic& tr = res.traffic;
  const HalfMat enc_out = encoder_forward(m, src, &tr, opts.threads);

  const size_t batch = src.size();
  const size_t src_len = src[0].size();
  const size_t beam = opts.beam;
  const size_t rows = batch * beam;
  const size_t d = m.config.d_model;
  const size_t n_layers = m.decoder.size();

  // Prefill caches: cross K/V straight off the encoder output, empty
  // per-row self stripes.
  std::vector<LayerCache> caches(n_layers);
  for (size_t li = 0; li < n_layers; ++li) {
    const auto& ca = m.decoder[li].cross_attn;
    caches[li].cross_k = gemm_f16(enc_out, ca.wk, ca.bk, Activation::none,
                                  &tr.other, opts.threads);
    caches[li].cross_v = gemm_f16(enc_out, ca.wv, ca.bv, Activation::none,
                                  &tr.other, opts.threads);
    caches[li].self_k = HalfMat(rows * opts.max_len, d);
    caches[li].self_v = HalfMat(rows * opts.max_len, d);
  }

  std::vector<std::vector<int32_t>> history(rows);
  std::vector<float> score(rows, -std::numeric_limits<float>::infinity());
  for (size_t s = 0; s < batch; ++s) {
    score[s * beam] = 0.0f;
  }
  std::vector<uint8_t> finished_rows(rows, 0);
  const std::vector<uint8_t> no_rows_finished(rows, 0);
  std::vector<uint8_t> sentence_done(batch, 0);
  res.translations.assign(batch, {});
  size_t done = 0;

  for (uint32_t step = 0; step < opts.max_len && done < batch; ++step) {
    res.steps = step + 1;

    // Feed: BOS on the first step, each beam's latest token after that;
    // finished sentences keep feeding EOS so their rows stay well-formed.
    HalfMat x(rows, d);
    for (size_t r = 0; r < rows; ++r) {
      const int32_t tok = step == 0               ? kBosToken
                          : finished_rows[r] != 0 ? kEosToken
                                                  : history[r].back();
      const auto te = m.tok_embed.row(tok);
      const auto pe = m.pos_embed.row(step);
      auto row = x.row(r);
      for (size_t c = 0; c < d; ++c) {
        row[c] = half_add(te[c], pe[c]);
      }
    }
    tr.other.activation_bytes_read += 2 * rows * d * 2;
    tr.other.bytes_written += rows * d * 2;

    const std::span<const uint8_t> route_finished =
        opts.prune ? std::span<const uint8_t>(finished_rows)
                   : std::span<const uint8_t>(no_rows_finished);

    for (size_t li = 0; li < n_layers; ++li) {
      const DecoderLayer& layer = m.decoder[li];
      LayerCache& cache = caches[li];

      {  // self-attention: project, append position `step`, attend over
         // this row's stripe [0, step].
        const auto& aw = layer.self_attn;
        const HalfMat xn = layer_norm(x, aw.ln);
        tr.other.activation_bytes_read += (x.size() + 2 * d) * 2;
        tr.other.bytes_written += x.size() * 2;
        const HalfMat q =
            gemm_f16(xn, aw.wq, aw.bq, Activation::none, &tr.other, opts.threads);
        const HalfMat kn =
            gemm_f16(xn, aw.wk, aw.bk, Activation::none, &tr.other, opts.threads);
        const HalfMat vn =
            gemm_f16(xn, aw.wv, aw.bv, Activation::none, &tr.other, opts.threads);
        for (size_t r = 0; r < rows; ++r) {
          const size_t slot = r * opts.max_len + step;
          std::copy(kn.row(r).begin(), kn.row(r).end(),
                    cache.self_k.row(slot).begin());
          std::copy(vn.row(r).begin(), vn.row(r).end(),
                    cache.self_v.row(slot).begin());
        }
        tr.other.activation_bytes_read += 2 * rows * d * 2;
        tr.other.bytes_written += 2 * rows * d * 2;
        x = attend_rows(
            x, aw, q, cache.self_k, cache.self_v, m.config.n_heads,
            [&](size_t r) { return r * opts.max_len; },
            [&](size_t) { return static_cast<size_t>(step) + 1; }, &tr,
            opts.threads);
      }

      {  // cross-attention over this sentence's encoder rows
        const auto& aw = layer.cross_attn;
        const HalfMat xn = layer_norm(x, aw.ln);
        tr.other.activation_bytes_read += (x.size() + 2 * d) * 2;
        tr.other.bytes_written += x.size() * 2;
        const HalfMat q =
            gemm_f16(xn, aw.wq, aw.bq, Activation::none, &tr.other, opts.threads);
        x = attend_rows(
            x, aw, q, cache.cross_k, cache.cross_v, m.config.n_heads,
            [&](size_t r) { return (r / beam) * src_len; },
            [&](size_t) { return src_len; }, &tr, opts.threads);
      }

      x = ffn_forward(x, layer.ffn, route_finished, &tr, opts.threads);
    }

    const HalfMat xf = layer_norm(x, m.dec_ln);
    tr.other.activation_bytes_read += (x.size() + 2 * d) * 2;
    tr.other.bytes_written += x.size() * 2;
    const HalfMat logits =
        gemm_f16(xf, m.out_w, m.out_b, Activation::none, &tr.other, opts.threads);

    // Per-sentence beam bookkeeping.
    const size_t vocab = m.config.vocab_size;
    std::vector<float> logp(beam * vocab);
    std::vector<Candidate> cands;
    for (size_t s = 0; s < batch; ++s) {
      if (sentence_done[s] != 0) {
        continue;
      }
      const size_t expand = step == 0 ? 1 : beam;
      for (size_t b = 0; b < expand; ++b) {
        const auto lrow = logits.row(s * beam + b);
        float mx = half_to_f32(lrow[0]);
        for (size_t tkn = 1; tkn < vocab; ++tkn) {
          mx = std::max(mx, half_to_f32(lrow[tkn]));
        }
        float sum = 0.0f;
        for (size_t tkn = 0; tkn < vocab; ++tkn) {
          sum += std::exp(half_to_f32(lrow[tkn]) - mx);
        }
        const float lse = std::log(sum);
        for (size_t tkn = 0; tkn < vocab; ++tkn) {
          logp[b * vocab + tkn] = half_to_f32(lrow[tkn]) - mx - lse;
        }
      }

      cands.clear();
      for (size_t b = 0; b < expand; ++b) {
        for (size_t tkn = 0; tkn < vocab; ++tkn) {
          cands.push_back({score[s * beam + b] + logp[b * vocab + tkn],
                           static_cast<uint32_t>(b),
                           static_cast<int32_t>(tkn)});
        }
      }
      std::sort(cands.begin(), cands.end(), candidate_less);

      if (cands.front().token == kEosToken) {
        // Rank-0 EOS: the sentence is done; its rows leave the expert
        // workload from the next step on.
        auto& out = res.translations[s];
        out = history[s * beam + cands.front().beam];
        out.push_back(kEosToken);
        sentence_done[s] = 1;
        ++done;
        for (size_t b = 0; b < beam; ++b) {
          finished_rows[s * beam + b] = 1;
        }
        continue;
      }

      // Top beam_width non-EOS candidates become the new beams.
      std::vector<Candidate> chosen;
      for (const auto& c : cands) {
        if (c.token != kEosToken) {
          chosen.push_back(c);
          if (chosen.size() == beam) {
            break;
          }
        }
      }

      // Reorder histories, scores and cache stripes (positions [0, step]).
      std::vector<std::vector<int32_t>> nh(beam);
      std::vector<float> ns(beam);
      for (size_t j = 0; j < beam; ++j) {
        nh[j] = history[s * beam + chosen[j].beam];
        nh[j].push_back(chosen[j].token);
        ns[j] = chosen[j].score;
      }
      for (size_t j = 0; j < beam; ++j) {
        history[s * beam + j] = std::move(nh[j]);
        score[s * beam + j] = ns[j];
      }
      bool identity = true;
      for (size_t j = 0; j < beam; ++j) {
        identity = identity && chosen[j].beam == j;
      }
      if (!identity) {
        const size_t filled = step + 1;
        for (auto& cache : caches) {
          for (HalfMat* mat : {&cache.self_k, &cache.self_v}) {
            HalfMat tmp(beam * filled, d);
            for (size_t j = 0; j < beam; ++j) {
              const size_t src_row = (s * beam + chosen[j].beam) * opts.max_len;
              for (size_t tstep = 0; tstep < filled; ++tstep) {
                std::copy(mat->row(src_row + tstep).begin(),
                          mat->row(src_row + tstep).end(),
                          tmp.row(j * filled + tstep).begin());
              }
            }
            for (size_t j = 0; j < beam; ++j) {
              const size_t dst_row = (s * beam + j) * opts.max_len;
              for (size_t tstep = 0; tstep < filled; ++tstep) {
                std::copy(tmp.row(j * filled + tstep).begin(),
                          tmp.row(j * filled + tstep).end(),
                          mat->row(dst_row + tstep).begin());
              }
            }
          }
        }
      }
    }
  }

  // Sentences that ran out of steps return their best live beam, unfinished.
  for (size_t s = 0; s < batch; ++s) {
    if (sentence_done[s] != 0) {
      continue;
    }
    size_t best = 0;
    for (size_t b = 1; b < beam; ++b) {
      if (score[s * beam + b] > score[s * beam + best]) {
        best = b;
      }
    }
    res.translations[s] = history[s * beam + best];
  }
  for (const auto& t : res.translations) {
    res.generated_tokens += t.size();
  }
  return res;
}

}  // namespace moe
