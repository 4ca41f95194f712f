// SPDX-License-Identifier: Apache-2.0
//
// Top-1 token routing.
//
// Every row picks the expert with the highest gate probability, then rows
// are gathered into expert-contiguous order by a stable counting sort so
// each expert's tokens form one dense slice.  Rows whose sentence already
// finished decoding are keyed past the last expert and parked at the tail
// of the sorted order; the active region is rows [0, active_rows).

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moeinfer/tensor.hpp"

namespace moe {

struct GateDecision {
  uint32_t row = 0;         // original row index
  uint32_t expert = 0;      // argmax expert (ties -> lowest index)
  Half scale{0};            // softmax probability of that expert, FP16
};

struct RoutingPlan {
  // permutation[i] = original row sitting at sorted position i.
  std::vector<uint32_t> permutation;
  // inverse_permutation[r] = sorted position of original row r.
  std::vector<uint32_t> inverse_permutation;
  // Sorted positions [expert_offsets[e], expert_offsets[e+1]) hold expert
  // e's rows; expert_offsets[n_experts] == active_rows.
  std::vector<uint32_t> expert_offsets;
  uint32_t active_rows = 0;
};

// Softmax (f32, max-subtracted) over each row of (rows, n_experts) logits;
// returns the argmax expert and its probability narrowed to FP16.
std::vector<GateDecision> gate_top1(std::span<const float> logits, size_t rows,
                                    size_t n_experts);

RoutingPlan build_routing_plan(std::span<const GateDecision> decisions,
                               std::span<const uint8_t> finished,
                               size_t n_experts);

// Gather rows of x into sorted order (finished rows land at the tail).
HalfMat permute_rows(const HalfMat& x, const RoutingPlan& plan);

// Scatter expert outputs back to original row order, multiplying each active
// row by its gate scale.  Finished rows come back zero-filled; the caller
// handles their pass-through.
HalfMat unpermute_and_scale(const HalfMat& y_perm, const RoutingPlan& plan,
                            std::span<const GateDecision> decisions);

}  // namespace moe
