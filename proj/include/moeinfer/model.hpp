// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale encoder-decoder transformer with MoE FFN blocks.
//
// Architecture notes (kept deliberately boring so the kernels are the star):
//   * pre-norm residual blocks: y = x + f(LN(x))
//   * standard multi-head attention with learned absolute position
//     embeddings added to the token embeddings
//   * every layer whose index i satisfies i % moe_every == 0 carries a
//     top-1 MoE FFN; the rest carry a dense FFN of the same shape
//   * decoding is incremental with per-row KV caches and beam search
//     (width 1 or 2); sentences attend strictly within themselves
//
// All hidden state is FP16; attention scores, softmax, LayerNorm and GEMM
// accumulation run in f32 with fixed evaluation order, so every forward is
// bit-reproducible for any thread count and batch composition.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "moeinfer/grouped_gemm.hpp"
#include "moeinfer/quantize.hpp"
#include "moeinfer/routing.hpp"
#include "moeinfer/tensor.hpp"

namespace moe {

inline constexpr int32_t kBosToken = 0;
inline constexpr int32_t kEosToken = 1;

struct ModelConfig {
  uint32_t d_model = 64;
  uint32_t d_ffn = 256;
  uint32_t n_enc_layers = 4;
  uint32_t n_dec_layers = 2;
  uint32_t n_experts = 8;
  uint32_t n_heads = 4;
  uint32_t vocab_size = 256;
  uint32_t moe_every = 2;
  uint32_t max_seq_len = 128;

  bool is_moe_layer(uint32_t layer) const { return layer % moe_every == 0; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Precision : uint8_t { f16 = 0, int8 = 1, int4 = 2 };
const char* precision_name(Precision p);

struct LayerNormWeights {
  std::vector<Half> gamma, beta;
};

struct AttentionWeights {
  LayerNormWeights ln;          // pre-norm of this attention block
  HalfMat wq, wk, wv, wo;       // (d_model, d_model)
  std::vector<Half> bq, bk, bv, bo;
};

struct DenseFfn {
  LayerNormWeights ln;
  HalfMat w1;                   // (d_model, d_ffn)
  std::vector<Half> b1;
  HalfMat w2;                   // (d_ffn, d_model)
  std::vector<Half> b2;
};

struct MoeFfn {
  LayerNormWeights ln;
  HalfMat gate_w;               // (d_model, n_experts)
  std::vector<Half> gate_b;
  HalfTensor3 w1;               // (E, d_model, d_ffn); empty when quantized
  HalfTensor3 w2;               // (E, d_ffn, d_model); empty when quantized
  HalfMat b1;                   // (E, d_ffn)   -- biases stay FP16
  HalfMat b2;                   // (E, d_model)
  std::optional<QuantizedExpertWeights> qw1, qw2;

  bool quantized() const { return qw1.has_value(); }
};

using FfnBlock = std::variant<DenseFfn, MoeFfn>;

struct EncoderLayer {
  AttentionWeights self_attn;
  FfnBlock ffn;
};

struct DecoderLayer {
  AttentionWeights self_attn;
  AttentionWeights cross_attn;
  FfnBlock ffn;
};

struct Model {
  ModelConfig config;
  Precision precision = Precision::f16;
  HalfMat tok_embed;            // (vocab, d_model)
  HalfMat pos_embed;            // (max_seq_len, d_model)
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  LayerNormWeights enc_ln, dec_ln;
  HalfMat out_w;                // (d_model, vocab)
  std::vector<Half> out_b;

  void validate() const;
};

// Deterministically seeded toy model (FP16 master weights).
Model random_model(const ModelConfig& cfg, uint64_t seed);

// Copy of m with every expert weight tensor quantized; everything else,
// biases included, stays FP16.  m must be an f16 model.
Model quantize_model(const Model& m, QuantBits bits, int threads = 1);

// Byte traffic split along the quantization boundary: `expert` counts only
// the grouped expert GEMMs (the sole tensors quantization and pruning act
// on, so precision/prune ratios are meaningful only there); `other` is
// attention, gates, dense FFNs, projections and row shuffles.
struct ModelTraffic {
  TrafficCounter expert;
  TrafficCounter other;
  ModelTraffic& operator+=(const ModelTraffic& o) {
    expert += o.expert;
    other += o.other;
    return *this;
  }
  friend bool operator==(const ModelTraffic&, const ModelTraffic&) = default;
};

// --- layer-level forwards (exposed for tests and the verify suites) ---

// y = (x - mean) / sqrt(var + 1e-5) * gamma + beta, f32 math per row.
void layer_norm_row(std::span<const Half> x, const LayerNormWeights& ln,
                    std::span<Half> out);
HalfMat layer_norm(const HalfMat& x, const LayerNormWeights& ln);

enum class AttnMask : uint8_t { none, causal };

// x + MHA(LN(x)) over each `segment`-row slice independently (segment == 0
// means a single slice).  Full (non-incremental) form.
HalfMat attention_forward(const HalfMat& x, const AttentionWeights& w,
                          size_t n_heads, AttnMask mask, size_t segment,
                          ModelTraffic* tr = nullptr, int threads = 1);

// x + FFN(LN(x)) for the two FFN flavors.  For the MoE flavor, rows with
// finished[r] != 0 bypass the experts entirely and pass through unchanged.
HalfMat dense_ffn_forward(const HalfMat& x, const DenseFfn& w,
                          ModelTraffic* tr = nullptr, int threads = 1);
HalfMat moe_ffn_forward(const HalfMat& x, const MoeFfn& w,
                        std::span<const uint8_t> finished,
                        ModelTraffic* tr = nullptr, int threads = 1);

// Gate logits in f32 (never narrowed; the router consumes them directly).
std::vector<float> gate_logits_f32(const HalfMat& xn, const HalfMat& gate_w,
                                   std::span<const Half> gate_b,
                                   TrafficCounter* tc = nullptr);

// Encoder stack over a batch of equal-length sentences; returns the final
// hidden rows (batch * src_len, d_model).
HalfMat encoder_forward(const Model& m,
                        const std::vector<std::vector<int32_t>>& src,
                        ModelTraffic* tr = nullptr, int threads = 1);

// --- decoding ---

struct DecodeOptions {
  uint32_t beam = 1;
  bool prune = true;      // drop finished sentences' rows from expert GEMMs
  uint32_t max_len = 32;  // decode steps bound (excludes the BOS feed)
  int threads = 1;
};

struct DecodeResult {
  std::vector<std::vector<int32_t>> translations;  // EOS-terminated if done
  uint32_t steps = 0;               // decoder steps actually executed
  uint64_t generated_tokens = 0;    // sum of translation lengths
  ModelTraffic traffic;             // encoder + all decode steps
};

DecodeResult beam_search_decode(const Model& m,
                                const std::vector<std::vector<int32_t>>& src,
                                const DecodeOptions& opts);

}  // namespace moe
