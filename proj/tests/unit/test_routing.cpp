// SPDX-License-Identifier: Apache-2.0
//
// Router checks: gating math on worked rows, and the counting-sort plan
// against a std::stable_sort oracle over ten thousand random instances.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "moeinfer/reference.hpp"
#include "moeinfer/rng.hpp"
#include "moeinfer/routing.hpp"

using namespace moe;

namespace {

// Scalar softmax probability of the argmax entry, written independently of
// gate_top1's batched loop (same f32 discipline, same libm exp).
Half scalar_gate_scale(const std::vector<float>& row) {
  float mx = row[0];
  for (float v : row) {
    mx = std::max(mx, v);
  }
  float sum = 0.0f;
  for (float v : row) {
    sum += std::exp(v - mx);
  }
  return f32_to_half(std::exp(0.0f) / sum);
}

std::vector<uint8_t> random_finished(Rng& rng, size_t t, int mode) {
  std::vector<uint8_t> f(t, 0);
  if (mode == 1) {
    for (auto& b : f) {
      b = rng.uniform_int(10) < 3 ? 1 : 0;
    }
  } else if (mode == 2) {
    f.assign(t, 1);
  }
  return f;
}

}  // namespace

TEST_SUITE("routing") {

TEST_CASE("worked gating rows") {
  // Row [1, 2, 0.5]: expert 1 wins with softmax probability ~0.6285.
  const std::vector<float> row1 = {1.0f, 2.0f, 0.5f};
  auto d = gate_top1(row1, 1, 3);
  CHECK(d[0].expert == 1);
  CHECK(d[0].row == 0);
  CHECK(half_to_f64(d[0].scale) ==
        doctest::Approx(0.62853).epsilon(2e-4));
  CHECK(d[0].scale == scalar_gate_scale(row1));

  // A dominant logit saturates the probability.
  const std::vector<float> row2 = {10.0f, 0.0f, 0.0f};
  d = gate_top1(row2, 1, 3);
  CHECK(d[0].expert == 0);
  CHECK(half_to_f64(d[0].scale) >= 0.999);
  CHECK(d[0].scale == scalar_gate_scale(row2));

  // Ties go to the lowest expert index.
  const std::vector<float> row3 = {5.0f, 5.0f, 1.0f};
  d = gate_top1(row3, 1, 3);
  CHECK(d[0].expert == 0);

  // Batched rows decide independently.
  const std::vector<float> batch = {1.0f, 2.0f, 0.5f, 9.0f, 1.0f, 1.0f};
  d = gate_top1(batch, 2, 3);
  CHECK(d[0].expert == 1);
  CHECK(d[1].expert == 0);
  CHECK(d[1].row == 1);
}

TEST_CASE("gate probabilities always land in (0, 1]") {
  Rng rng(0x40D0);
  for (int trial = 0; trial < 2000; ++trial) {
    const size_t e = 1 + rng.uniform_int(16);
    std::vector<float> logits(e);
    for (auto& v : logits) {
      v = static_cast<float>(rng.normal() * 8.0);
    }
    const auto d = gate_top1(logits, 1, e);
    const double p = half_to_f64(d[0].scale);
    REQUIRE(p > 0.0);
    REQUIRE(p <= 1.0);
    REQUIRE(p >= 1.0 / static_cast<double>(e) - 1e-3);
  }
}

TEST_CASE("gate rejects non-finite logits") {
  std::vector<float> bad = {1.0f, std::nanf(""), 0.0f};
  CHECK_THROWS_AS(gate_top1(bad, 1, 3), std::invalid_argument);
  bad[1] = INFINITY;
  CHECK_THROWS_AS(gate_top1(bad, 1, 3), std::invalid_argument);
  CHECK_THROWS_AS(gate_top1(std::vector<float>{1.0f}, 1, 3),
                  std::invalid_argument);
}

TEST_CASE("worked routing plan") {
  std::vector<GateDecision> d(4);
  const uint32_t experts[] = {2, 0, 2, 1};
  for (uint32_t r = 0; r < 4; ++r) {
    d[r] = {r, experts[r], kHalfOne};
  }
  const std::vector<uint8_t> finished = {0, 0, 1, 0};
  const auto plan = build_routing_plan(d, finished, 3);
  CHECK(plan.active_rows == 3);
  CHECK(plan.permutation == std::vector<uint32_t>({1, 3, 0, 2}));
  CHECK(plan.inverse_permutation == std::vector<uint32_t>({2, 0, 3, 1}));
  CHECK(plan.expert_offsets == std::vector<uint32_t>({0, 1, 2, 3}));
}

TEST_CASE("plan matches the stable-sort oracle on 10^4 random instances") {
  Rng rng(0x40D1);
  for (int trial = 0; trial < 10000; ++trial) {
    const size_t t = 1 + rng.uniform_int(64);
    const size_t e = 1 + rng.uniform_int(16);
    std::vector<GateDecision> d(t);
    std::vector<uint32_t> experts(t);
    for (size_t r = 0; r < t; ++r) {
      experts[r] = rng.uniform_int(static_cast<uint32_t>(e));
      d[r] = {static_cast<uint32_t>(r), experts[r], kHalfOne};
    }
    const auto finished = random_finished(rng, t, trial % 3);
    const auto got = build_routing_plan(d, finished, e);
    const auto want = ref::routing_plan(experts, finished, e);
    REQUIRE(got.permutation == want.permutation);
    REQUIRE(got.inverse_permutation == want.inverse_permutation);
    REQUIRE(got.expert_offsets == want.expert_offsets);
    REQUIRE(got.active_rows == want.active_rows);
  }
}

TEST_CASE("plan structural invariants") {
  Rng rng(0x40D2);
  for (int trial = 0; trial < 500; ++trial) {
    const size_t t = 1 + rng.uniform_int(48);
    const size_t e = 1 + rng.uniform_int(8);
    std::vector<GateDecision> d(t);
    for (size_t r = 0; r < t; ++r) {
      d[r] = {static_cast<uint32_t>(r),
              rng.uniform_int(static_cast<uint32_t>(e)), kHalfOne};
    }
    const auto finished = random_finished(rng, t, 1);
    const auto plan = build_routing_plan(d, finished, e);

    // Bijection: inverse(permutation) is the identity.
    std::vector<bool> seen(t, false);
    for (size_t i = 0; i < t; ++i) {
      const uint32_t r = plan.permutation[i];
      REQUIRE(r < t);
      REQUIRE(!seen[r]);
      seen[r] = true;
      REQUIRE(plan.inverse_permutation[r] == i);
    }
    // Offsets partition the active region into expert slices.
    REQUIRE(plan.expert_offsets.front() == 0);
    REQUIRE(plan.expert_offsets.back() == plan.active_rows);
    for (size_t ex = 0; ex < e; ++ex) {
      REQUIRE(plan.expert_offsets[ex] <= plan.expert_offsets[ex + 1]);
      for (uint32_t i = plan.expert_offsets[ex];
           i < plan.expert_offsets[ex + 1]; ++i) {
        REQUIRE(d[plan.permutation[i]].expert == ex);
        REQUIRE(finished[plan.permutation[i]] == 0);
      }
      // Stability: original indices ascend within the slice.
      for (uint32_t i = plan.expert_offsets[ex] + 1;
           i < plan.expert_offsets[ex + 1]; ++i) {
        REQUIRE(plan.permutation[i - 1] < plan.permutation[i]);
      }
    }
    // Finished rows sit at the tail, also in original order.
    for (size_t i = plan.active_rows; i < t; ++i) {
      REQUIRE(finished[plan.permutation[i]] == 1);
      if (i > plan.active_rows) {
        REQUIRE(plan.permutation[i - 1] < plan.permutation[i]);
      }
    }
  }
}

TEST_CASE("permute gathers and unpermute scatters with scaling") {
  Rng rng(0x40D3);
  const size_t t = 12, cols = 5, e = 4;
  HalfMat x(t, cols);
  for (auto& h : x.data) {
    h = f64_to_half(rng.normal());
  }
  std::vector<GateDecision> d(t);
  for (size_t r = 0; r < t; ++r) {
    d[r] = {static_cast<uint32_t>(r),
            rng.uniform_int(static_cast<uint32_t>(e)),
            f64_to_half(0.25 + 0.5 * rng.uniform())};
  }
  std::vector<uint8_t> finished(t, 0);
  finished[3] = finished[7] = 1;
  const auto plan = build_routing_plan(d, finished, e);

  const auto xp = permute_rows(x, plan);
  for (size_t i = 0; i < t; ++i) {
    REQUIRE(std::equal(xp.row(i).begin(), xp.row(i).end(),
                       x.row(plan.permutation[i]).begin()));
  }

  const auto back = unpermute_and_scale(xp, plan, d);
  for (size_t r = 0; r < t; ++r) {
    for (size_t c = 0; c < cols; ++c) {
      const Half want = finished[r] ? Half(0x0000)
                                    : half_mul(x.at(r, c), d[r].scale);
      REQUIRE(back.at(r, c) == want);
    }
  }
}

TEST_CASE("plan validation") {
  std::vector<GateDecision> d = {{0, 5, kHalfOne}};
  std::vector<uint8_t> fin = {0};
  CHECK_THROWS_AS(build_routing_plan(d, fin, 3), std::invalid_argument);
  d[0].expert = 1;
  std::vector<uint8_t> wrong = {0, 0};
  CHECK_THROWS_AS(build_routing_plan(d, wrong, 3), std::invalid_argument);
}

}  // TEST_SUITE
