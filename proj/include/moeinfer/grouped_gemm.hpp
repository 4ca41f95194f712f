// SPDX-License-Identifier: Apache-2.0
//
// Grouped per-expert GEMM.
//
// One kernel launch walks a list of (expert, row range) problems over the
// expert-sorted activation matrix, so each expert's weights are read once
// per step no matter how many tokens routed to it.  Accumulation is f32,
// strictly k-sequential per output element, with bias + optional ReLU
// applied in f32 and a single narrowing to FP16 -- the result is therefore
// bit-identical for any thread count or panel width.
//
// Quantized weights are dequantized inside the kernel ("fused"): stored
// codes go through the same mantissa-composition path as dequantize_fast,
// so the fused product equals running the f16 kernel on a materialized
// dequantized tensor, bit for bit.  A separate-pass mode actually
// materializes that tensor per problem to make the extra traffic of the
// unfused strategy measurable.
//
// Traffic counters are analytic: every problem accounts its weight bytes
// (packed codes + scales; bias rows count as activation traffic), its
// activation reads, and its output writes exactly once.  Experts with no
// rows never appear as problems and contribute nothing.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moeinfer/quantize.hpp"
#include "moeinfer/routing.hpp"
#include "moeinfer/tensor.hpp"

namespace moe {

struct GroupedProblem {
  uint32_t expert = 0;
  uint32_t row_begin = 0;  // rows in the *sorted* activation matrix
  uint32_t row_end = 0;
};

struct TrafficCounter {
  uint64_t weight_bytes_read = 0;
  uint64_t activation_bytes_read = 0;
  uint64_t bytes_written = 0;

  uint64_t total_read() const { return weight_bytes_read + activation_bytes_read; }
  TrafficCounter& operator+=(const TrafficCounter& o) {
    weight_bytes_read += o.weight_bytes_read;
    activation_bytes_read += o.activation_bytes_read;
    bytes_written += o.bytes_written;
    return *this;
  }
  friend bool operator==(const TrafficCounter&, const TrafficCounter&) = default;
};

enum class Activation : uint8_t { none, relu };
enum class DequantMode : uint8_t { fused, separate_pass };

// Problems from a routing plan; experts with empty row ranges are dropped.
std::vector<GroupedProblem> make_grouped_problems(const RoutingPlan& plan);

// Plain dense GEMM, same inner arithmetic: out = act(x @ w + bias).
// w is (m, n) row-major with x.cols == m; bias has n entries.
HalfMat gemm_f16(const HalfMat& x, const HalfMat& w, std::span<const Half> bias,
                 Activation act, TrafficCounter* tc = nullptr, int threads = 1);

// Grouped GEMM over FP16 expert weights (e, m, n) with bias (e, n).
// Rows not covered by any problem stay zero.
HalfMat grouped_gemm_f16(const HalfMat& x_perm,
                         std::span<const GroupedProblem> problems,
                         const HalfTensor3& w, const HalfMat& bias,
                         Activation act, TrafficCounter* tc = nullptr,
                         int threads = 1);

// Grouped GEMM over quantized expert weights with in-kernel dequantization.
HalfMat grouped_gemm_quant(const HalfMat& x_perm,
                           std::span<const GroupedProblem> problems,
                           const QuantizedExpertWeights& qw,
                           const HalfMat& bias, Activation act,
                           TrafficCounter* tc = nullptr, int threads = 1,
                           DequantMode mode = DequantMode::fused);

}  // namespace moe
