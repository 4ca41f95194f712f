// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/routing.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace moe {

std::vector<GateDecision> gate_top1(std::span<const float> logits, size_t rows,
                                    size_t n_experts) {
  require(rows > 0 && n_experts > 0, "gate_top1: empty input");
  require(logits.size() == rows * n_experts, "gate_top1: logits shape mismatch");
  for (size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      throw std::invalid_argument("gate_top1: non-finite logit at row " +
                                  std::to_string(i / n_experts));
    }
  }
  std::vector<GateDecision> out(rows);
  for (size_t r = 0; r < rows; ++r) {
    const float* l = logits.data() + r * n_experts;
    size_t best = 0;
    float mx = l[0];
    for (size_t j = 1; j < n_experts; ++j) {
      if (l[j] > mx) {  // strict: ties keep the lowest index
        mx = l[j];
        best = j;
      }
    }
    float sum = 0.0f;
    for (size_t j = 0; j < n_experts; ++j) {
      sum += std::exp(l[j] - mx);
    }
    // The winner's numerator is exp(0) == 1, so its probability is 1/sum.
    out[r] = {static_cast<uint32_t>(r), static_cast<uint32_t>(best),
              f32_to_half(1.0f / sum)};
  }
  return out;
}

RoutingPlan build_routing_plan(std::span<const GateDecision> decisions,
                               std::span<const uint8_t> finished,
                               size_t n_experts) {
  const size_t t = decisions.size();
  require(t > 0, "build_routing_plan: no rows");
  require(finished.size() == t, "build_routing_plan: finished size mismatch");
  for (const GateDecision& d : decisions) {
    require(d.expert < n_experts, "build_routing_plan: expert out of range");
  }

  // Stable counting sort on key = expert, with key n_experts for finished
  // rows so they sink to the tail.
  std::vector<uint32_t> counts(n_experts + 1, 0);
  const auto key = [&](size_t r) {
    return finished[r] != 0 ? n_experts : decisions[r].expert;
  };
  for (size_t r = 0; r < t; ++r) {
    ++counts[key(r)];
  }

  RoutingPlan plan;
  plan.expert_offsets.resize(n_experts + 1);
  uint32_t run = 0;
  for (size_t e = 0; e < n_experts; ++e) {
    plan.expert_offsets[e] = run;
    run += counts[e];
  }
  plan.expert_offsets[n_experts] = run;
  plan.active_rows = run;

  std::vector<uint32_t> cursor(n_experts + 1, 0);
  uint32_t acc = 0;
  for (size_t e = 0; e <= n_experts; ++e) {
    cursor[e] = acc;
    acc += counts[e];
  }
  plan.permutation.assign(t, 0);
  plan.inverse_permutation.assign(t, 0);
  for (size_t r = 0; r < t; ++r) {
    const uint32_t pos = cursor[key(r)]++;
    plan.permutation[pos] = static_cast<uint32_t>(r);
    plan.inverse_permutation[r] = pos;
  }
  return plan;
}

HalfMat permute_rows(const HalfMat& x, const RoutingPlan& plan) {
  require(x.rows == plan.permutation.size(), "permute_rows: row count mismatch");
  HalfMat out(x.rows, x.cols);
  for (size_t i = 0; i < x.rows; ++i) {
    const auto src = x.row(plan.permutation[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

HalfMat unpermute_and_scale(const HalfMat& y_perm, const RoutingPlan& plan,
                            std::span<const GateDecision> decisions) {
  require(y_perm.rows == plan.permutation.size(),
          "unpermute_and_scale: row count mismatch");
  require(decisions.size() == y_perm.rows,
          "unpermute_and_scale: decision count mismatch");
  HalfMat out(y_perm.rows, y_perm.cols);  // zero-initialized
  for (size_t i = 0; i < plan.active_rows; ++i) {
    const uint32_t r = plan.permutation[i];
    const Half s = decisions[r].scale;
    const auto src = y_perm.row(i);
    auto dst = out.row(r);
    for (size_t c = 0; c < y_perm.cols; ++c) {
      dst[c] = half_mul(src[c], s);
    }
  }
  return out;
}

}  // namespace moe
