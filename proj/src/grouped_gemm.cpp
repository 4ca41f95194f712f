// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/grouped_gemm.hpp"

#include <array>
#include <cstring>

#include "moeinfer/dequant.hpp"
#include "moeinfer/threading.hpp"

namespace moe {

namespace {

constexpr size_t kPanel = 8;  // staged column-group width

// Multiply rows [r0, r1) of x against a staged f32 column panel.
// colbuf[k * width + j] holds column (n0 + j) of the weight matrix.
void panel_dot(const HalfMat& x, size_t r0, size_t r1, const float* colbuf,
               size_t m, size_t n0, size_t width, const Half* bias,
               Activation act, HalfMat& out) {
  std::array<float, kPanel> acc;
  for (size_t r = r0; r < r1; ++r) {
    acc.fill(0.0f);
    const Half* xr = x.row(r).data();
    for (size_t k = 0; k < m; ++k) {
      const float xv = half_to_f32(xr[k]);
      for (size_t j = 0; j < width; ++j) {
        acc[j] += xv * colbuf[k * width + j];
      }
    }
    for (size_t j = 0; j < width; ++j) {
      float h = acc[j] + half_to_f32(bias[n0 + j]);
      if (act == Activation::relu && !(h > 0.0f)) {
        h = 0.0f;
      }
      out.at(r, n0 + j) = f32_to_half(h);
    }
  }
}

// act(x[r0:r1] @ w + bias) for an f16 weight slab (m, n) row-major.
void run_panel_f16(const HalfMat& x, size_t r0, size_t r1, const Half* w,
                   size_t m, size_t n, const Half* bias, Activation act,
                   HalfMat& out) {
  std::vector<float> colbuf(m * kPanel);
  for (size_t n0 = 0; n0 < n; n0 += kPanel) {
    const size_t width = std::min(kPanel, n - n0);
    for (size_t k = 0; k < m; ++k) {
      for (size_t j = 0; j < width; ++j) {
        colbuf[k * width + j] = half_to_f32(w[k * n + n0 + j]);
      }
    }
    panel_dot(x, r0, r1, colbuf.data(), m, n0, width, bias, act, out);
  }
}

// Same, but the panel is staged straight from quantized codes through the
// mantissa-composition dequantizer.
void run_panel_quant(const HalfMat& x, size_t r0, size_t r1,
                     const uint8_t* slab, const Half* scales, QuantBits bits,
                     size_t m, size_t n, const Half* bias, Activation act,
                     HalfMat& out) {
  std::vector<float> colbuf(m * kPanel);
  if (bits == QuantBits::b4) {
    for (size_t n0 = 0; n0 < n; n0 += 8) {  // n % 8 == 0 by construction
      for (size_t k = 0; k < m; ++k) {
        const auto vals = i2f_magic_u4(load_u4_word(slab + (k * n + n0) / 2));
        for (size_t j = 0; j < 8; ++j) {
          colbuf[k * 8 + j] = half_to_f32(half_mul(vals[j], scales[n0 + j]));
        }
      }
      panel_dot(x, r0, r1, colbuf.data(), m, n0, 8, bias, act, out);
    }
    return;
  }
  for (size_t n0 = 0; n0 < n; n0 += 4) {
    const size_t width = std::min<size_t>(4, n - n0);
    for (size_t k = 0; k < m; ++k) {
      const uint8_t* codes = slab + k * n + n0;
      if (width == 4) {
        const auto vals = i2f_magic_u8(codes);
        for (size_t j = 0; j < 4; ++j) {
          colbuf[k * 4 + j] = half_to_f32(half_mul(vals[j], scales[n0 + j]));
        }
      } else {
        for (size_t j = 0; j < width; ++j) {  // ragged tail, same arithmetic
          const Half v = half_sub(compose_magic(codes[j]), debias_const_u8());
          colbuf[k * width + j] = half_to_f32(half_mul(v, scales[n0 + j]));
        }
      }
    }
    panel_dot(x, r0, r1, colbuf.data(), m, n0, width, bias, act, out);
  }
}

void validate_problems(const HalfMat& x, std::span<const GroupedProblem> ps,
                       size_t n_experts, size_t m) {
  require(x.cols == m, "grouped_gemm: activation width != weight rows");
  for (const auto& p : ps) {
    require(p.expert < n_experts, "grouped_gemm: expert out of range");
    require(p.row_begin <= p.row_end && p.row_end <= x.rows,
            "grouped_gemm: problem rows out of range");
  }
}

}  // namespace

std::vector<GroupedProblem> make_grouped_problems(const RoutingPlan& plan) {
  std::vector<GroupedProblem> out;
  const size_t n_experts = plan.expert_offsets.size() - 1;
  out.reserve(n_experts);
  for (size_t e = 0; e < n_experts; ++e) {
    const uint32_t b = plan.expert_offsets[e];
    const uint32_t t = plan.expert_offsets[e + 1];
    if (b < t) {
      out.push_back({static_cast<uint32_t>(e), b, t});
    }
  }
  return out;
}

HalfMat gemm_f16(const HalfMat& x, const HalfMat& w, std::span<const Half> bias,
                 Activation act, TrafficCounter* tc, int threads) {
  require(x.cols == w.rows, "gemm_f16: inner dimensions differ");
  require(bias.size() == w.cols, "gemm_f16: bias size mismatch");
  HalfMat out(x.rows, w.cols);
  parallel_for(x.rows, threads, [&](size_t r0, size_t r1) {
    run_panel_f16(x, r0, r1, w.data.data(), w.rows, w.cols, bias.data(), act,
                  out);
  });
  if (tc != nullptr) {
    tc->weight_bytes_read += w.size() * sizeof(Half);
    tc->activation_bytes_read += (x.size() + bias.size()) * sizeof(Half);
    tc->bytes_written += out.size() * sizeof(Half);
  }
  return out;
}

HalfMat grouped_gemm_f16(const HalfMat& x_perm,
                         std::span<const GroupedProblem> problems,
                         const HalfTensor3& w, const HalfMat& bias,
                         Activation act, TrafficCounter* tc, int threads) {
  validate_problems(x_perm, problems, w.e, w.m);
  require(bias.rows == w.e && bias.cols == w.n,
          "grouped_gemm_f16: bias shape mismatch");
  HalfMat out(x_perm.rows, w.n);
  for (const auto& p : problems) {
    const Half* slab = w.expert(p.expert).data();
    const Half* brow = bias.row(p.expert).data();
    parallel_for(p.row_end - p.row_begin, threads, [&](size_t c0, size_t c1) {
      run_panel_f16(x_perm, p.row_begin + c0, p.row_begin + c1, slab, w.m, w.n,
                    brow, act, out);
    });
    if (tc != nullptr) {
      const uint64_t rows = p.row_end - p.row_begin;
      tc->weight_bytes_read += w.m * w.n * sizeof(Half);
      tc->activation_bytes_read += (rows * w.m + w.n) * sizeof(Half);
      tc->bytes_written += rows * w.n * sizeof(Half);
    }
  }
  return out;
}

HalfMat grouped_gemm_quant(const HalfMat& x_perm,
                           std::span<const GroupedProblem> problems,
                           const QuantizedExpertWeights& qw,
                           const HalfMat& bias, Activation act,
                           TrafficCounter* tc, int threads, DequantMode mode) {
  validate_problems(x_perm, problems, qw.e, qw.m);
  require(bias.rows == qw.e && bias.cols == qw.n,
          "grouped_gemm_quant: bias shape mismatch");
  require(qw.scales.size() == qw.e * qw.n,
          "grouped_gemm_quant: scale count mismatch");
  const size_t code_bytes = qw.bits == QuantBits::b8 ? qw.m * qw.n
                                                     : qw.m * qw.n / 2;
  require(qw.packed.size() == code_bytes * qw.e,
          "grouped_gemm_quant: packed size mismatch");

  HalfMat out(x_perm.rows, qw.n);
  std::vector<Half> wdq;  // separate-pass staging only
  for (const auto& p : problems) {
    const uint8_t* slab = qw.expert_packed(p.expert).data();
    const Half* scales = qw.scales.data() + p.expert * qw.n;
    const Half* brow = bias.row(p.expert).data();
    if (mode == DequantMode::fused) {
      parallel_for(p.row_end - p.row_begin, threads, [&](size_t c0, size_t c1) {
        run_panel_quant(x_perm, p.row_begin + c0, p.row_begin + c1, slab,
                        scales, qw.bits, qw.m, qw.n, brow, act, out);
      });
    } else {
      // Materialize the expert's dequantized weights, then run the f16
      // kernel over them -- numerically identical, measurably more traffic.
      wdq.resize(qw.m * qw.n);
      dequantize_fast_expert(qw, p.expert, wdq.data());
      parallel_for(p.row_end - p.row_begin, threads, [&](size_t c0, size_t c1) {
        run_panel_f16(x_perm, p.row_begin + c0, p.row_begin + c1, wdq.data(),
                      qw.m, qw.n, brow, act, out);
      });
    }
    if (tc != nullptr) {
      const uint64_t rows = p.row_end - p.row_begin;
      const uint64_t wdq_bytes = qw.m * qw.n * sizeof(Half);
      tc->weight_bytes_read += code_bytes + qw.n * sizeof(Half);
      tc->activation_bytes_read += (rows * qw.m + qw.n) * sizeof(Half);
      tc->bytes_written += rows * qw.n * sizeof(Half);
      if (mode == DequantMode::separate_pass) {
        tc->weight_bytes_read += wdq_bytes;  // re-read what was spilled
        tc->bytes_written += wdq_bytes;
      }
    }
  }
  return out;
}

}  // namespace moe
