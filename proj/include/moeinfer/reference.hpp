// SPDX-License-Identifier: Apache-2.0
//
// Slow, obviously-correct reference implementations.
//
// Everything here exists to check the production kernels and deliberately
// avoids sharing their machinery: rounding is done with ordinary floating
// arithmetic (frexp/floor) instead of bit surgery, reductions use plain
// loops, sorting defers to std::stable_sort.  Used by the test suites and
// by the CLI's verify command; never on the hot path.

#pragma once

#include <cstdint>
#include <vector>

#include "moeinfer/model.hpp"
#include "moeinfer/quantize.hpp"
#include "moeinfer/routing.hpp"
#include "moeinfer/tensor.hpp"

namespace moe::ref {

// Round a double to the binary16 grid (round-to-nearest-even, subnormals,
// +-inf on overflow), returning the rounded value as a double.
double f16_round(double x);

// Round a double to the binary32 grid the same way.
double f32_round(double x);

struct QuantChannel {
  double scale = 0.0;             // FP16-exact scale value
  std::vector<int> q;             // signed codes, |q| <= qmax
  std::vector<uint8_t> stored;    // q + offset
};

// Quantize one output channel (a column of a single expert's weight matrix).
QuantChannel quantize_channel(const std::vector<double>& column, int qmax,
                              int offset);

// Full-tensor reference quantizer; returns logical (unpacked) codes in
// row-major (e, m, n) order plus per-(e, n) scales as doubles.
struct QuantResult {
  std::vector<uint8_t> stored;    // e*m*n logical codes
  std::vector<double> scales;     // e*n
};
QuantResult quantize(const HalfTensor3& w, QuantBits bits);

// Routing plan built with std::stable_sort instead of a counting sort.
RoutingPlan routing_plan(std::span<const uint32_t> experts,
                         std::span<const uint8_t> finished, size_t n_experts);

// act(x @ w + bias) as a plain f32 triple loop with strictly k-sequential
// accumulation; w is an (m, n) row-major slab.
HalfMat matmul(const HalfMat& x, std::span<const Half> w, size_t m, size_t n,
               std::span<const Half> bias, bool relu);

// MoE FFN applied one token at a time with no routing machinery: gate the
// row, run it alone through its expert (quantized experts are materialized
// with dequantize_naive first), scale, add the residual.  Finished rows pass
// through untouched.
HalfMat moe_per_token(const HalfMat& x, const MoeFfn& w,
                      std::span<const uint8_t> finished);

// Raw next-token logits (f32) after `hist`, recomputed from scratch over
// the whole prefix (BOS then hist) with a causal mask and no KV cache.
// `enc` is this sentence's encoder output.
std::vector<float> next_token_logits(const Model& m, const HalfMat& enc,
                                     std::span<const int32_t> hist);

// The same, log-softmaxed.
std::vector<float> next_token_logprobs(const Model& m, const HalfMat& enc,
                                       std::span<const int32_t> hist);

// Greedy decode of a single sentence with no KV cache and no pruning: every
// step re-runs the decoder from scratch over the full prefix with a causal
// mask.  Matches beam_search_decode(beam=1) bit for bit.
std::vector<int32_t> decode_nocache(const Model& m,
                                    const std::vector<int32_t>& src,
                                    uint32_t max_len);

}  // namespace moe::ref
