// SPDX-License-Identifier: Apache-2.0
//
// Shared single-query attention core (internal header).  Both the full
// (training-shaped) attention and the incremental cached decoder path call
// this, which is what makes cached and recomputed attention bit-identical.

#pragma once

#include <cmath>
#include <vector>

#include "moeinfer/tensor.hpp"

namespace moe::detail {

// Attend one query row against keys/values in rows
// [key_begin, key_begin + n_keys) of k/v for one head spanning columns
// [h0, h0 + dk).  Scores and the probability-weighted sum run in f32 in key
// order; the context is narrowed to FP16 per element.
inline void attend_one(const Half* qrow, const HalfMat& k, const HalfMat& v,
                       size_t key_begin, size_t n_keys, size_t h0, size_t dk,
                       float inv_sqrt_dk, std::vector<float>& scores,
                       Half* ctx) {
  scores.resize(n_keys);
  for (size_t j = 0; j < n_keys; ++j) {
    const Half* kr = k.row(key_begin + j).data();
    float s = 0.0f;
    for (size_t c = 0; c < dk; ++c) {
      s += half_to_f32(qrow[h0 + c]) * half_to_f32(kr[h0 + c]);
    }
    scores[j] = s * inv_sqrt_dk;
  }
  float mx = scores[0];
  for (size_t j = 1; j < n_keys; ++j) {
    mx = std::max(mx, scores[j]);
  }
  float sum = 0.0f;
  for (size_t j = 0; j < n_keys; ++j) {
    scores[j] = std::exp(scores[j] - mx);
    sum += scores[j];
  }
  for (size_t c = 0; c < dk; ++c) {
    float acc = 0.0f;
    for (size_t j = 0; j < n_keys; ++j) {
      const float p = scores[j] / sum;
      acc += p * half_to_f32(v.at(key_begin + j, h0 + c));
    }
    ctx[h0 + c] = f32_to_half(acc);
  }
}

}  // namespace moe::detail
