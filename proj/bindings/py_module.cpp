// SPDX-License-Identifier: Apache-2.0
//
// _moeinfer: python bindings for the inference engine.
//
// FP16 matrices cross the boundary as numpy float16 arrays — the dtype's
// buffer holds the exact IEEE binary16 bit patterns the engine works on, so
// python-side comparisons via .view(np.uint16) are bit-exact.  Everything
// here copies at the boundary; nothing aliases numpy memory.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "moeinfer/checkpoint.hpp"
#include "moeinfer/dequant.hpp"
#include "moeinfer/grouped_gemm.hpp"
#include "moeinfer/half.hpp"
#include "moeinfer/model.hpp"
#include "moeinfer/quantize.hpp"
#include "moeinfer/routing.hpp"
#include "moeinfer/verify.hpp"

namespace py = pybind11;
using namespace moe;

namespace {

// --- numpy <-> engine copies ---

const uint16_t* f16_data(const py::array& a, py::ssize_t ndim,
                         const char* what) {
  if (!a.dtype().is(py::dtype("float16"))) {
    throw std::invalid_argument(std::string(what) +
                                ": expected a float16 array");
  }
  if (a.ndim() != ndim) {
    throw std::invalid_argument(std::string(what) + ": expected " +
                                std::to_string(ndim) + " dimensions");
  }
  if (!(a.flags() & py::array::c_style)) {
    throw std::invalid_argument(std::string(what) +
                                ": array must be C-contiguous");
  }
  return static_cast<const uint16_t*>(a.data());
}

HalfMat mat_from(const py::array& a, const char* what) {
  const uint16_t* src = f16_data(a, 2, what);
  HalfMat m(static_cast<size_t>(a.shape(0)), static_cast<size_t>(a.shape(1)));
  std::memcpy(m.data.data(), src, m.data.size() * sizeof(Half));
  return m;
}

HalfTensor3 tensor_from(const py::array& a, const char* what) {
  const uint16_t* src = f16_data(a, 3, what);
  HalfTensor3 t(static_cast<size_t>(a.shape(0)),
                static_cast<size_t>(a.shape(1)),
                static_cast<size_t>(a.shape(2)));
  std::memcpy(t.data.data(), src, t.data.size() * sizeof(Half));
  return t;
}

std::vector<Half> vec_from(const py::array& a, const char* what) {
  const uint16_t* src = f16_data(a, 1, what);
  std::vector<Half> v(static_cast<size_t>(a.shape(0)));
  std::memcpy(v.data(), src, v.size() * sizeof(Half));
  return v;
}

py::array mat_to(const HalfMat& m) {
  py::array out(py::dtype("float16"),
                {static_cast<py::ssize_t>(m.rows),
                 static_cast<py::ssize_t>(m.cols)});
  std::memcpy(out.mutable_data(), m.data.data(), m.data.size() * sizeof(Half));
  return out;
}

py::array tensor_to(const HalfTensor3& t) {
  py::array out(py::dtype("float16"),
                {static_cast<py::ssize_t>(t.e), static_cast<py::ssize_t>(t.m),
                 static_cast<py::ssize_t>(t.n)});
  std::memcpy(out.mutable_data(), t.data.data(), t.data.size() * sizeof(Half));
  return out;
}

template <typename T>
py::array_t<T> vec_to(const std::vector<T>& v) {
  py::array_t<T> out(static_cast<py::ssize_t>(v.size()));
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(T));
  return out;
}

QuantBits bits_from_int(int bits) {
  if (bits == 4) {
    return QuantBits::b4;
  }
  if (bits == 8) {
    return QuantBits::b8;
  }
  throw std::invalid_argument("bits must be 4 or 8");
}

Activation act_from_bool(bool relu) {
  return relu ? Activation::relu : Activation::none;
}

std::vector<uint8_t> u8_vec_from(const py::array& a, const char* what) {
  py::array_t<uint8_t, py::array::c_style | py::array::forcecast> arr(a);
  if (arr.ndim() != 1) {
    throw std::invalid_argument(std::string(what) + ": expected a 1-D array");
  }
  return {arr.data(), arr.data() + arr.shape(0)};
}

}  // namespace

PYBIND11_MODULE(_moeinfer, mod) {
  mod.doc() =
      "Desk-scale MoE encoder-decoder inference engine: FP16 reference "
      "arithmetic, sort-based token routing, grouped expert GEMM, and "
      "weight-only int8/int4 quantization with bit-exact fused "
      "dequantization.";
  mod.attr("__version__") = "1.0.0";

  // --- FP16 scalar helpers (operate on raw bit patterns) ---
  mod.def(
      "f32_to_half", [](float x) { return f32_to_half(x).bits; },
      py::arg("x"), "Round x to IEEE binary16; returns the 16-bit pattern.");
  mod.def(
      "half_to_f32", [](uint16_t b) { return half_to_f32(Half{b}); },
      py::arg("bits"), "Widen a binary16 bit pattern to f32 exactly.");
  mod.def(
      "half_add",
      [](uint16_t a, uint16_t b) { return half_add(Half{a}, Half{b}).bits; },
      py::arg("a"), py::arg("b"));
  mod.def(
      "half_mul",
      [](uint16_t a, uint16_t b) { return half_mul(Half{a}, Half{b}).bits; },
      py::arg("a"), py::arg("b"));
  mod.def(
      "compose_magic", [](uint32_t y) { return compose_magic(y).bits; },
      py::arg("y"),
      "OR an integer payload y in [0, 1023] into the 1024.0 mantissa.");
  mod.def("debias_const_u8", [] { return debias_const_u8().bits; });
  mod.def("debias_const_u4", [] { return debias_const_u4().bits; });

  // --- quantization ---
  py::class_<QuantizedExpertWeights>(mod, "QuantizedWeights",
                                     "Per-expert weight codes plus one FP16 "
                                     "scale per (expert, column).")
      .def_property_readonly(
          "bits",
          [](const QuantizedExpertWeights& q) { return int(q.bits); })
      .def_property_readonly("shape",
                             [](const QuantizedExpertWeights& q) {
                               return py::make_tuple(q.e, q.m, q.n);
                             })
      .def_property_readonly(
          "packed",
          [](const QuantizedExpertWeights& q) { return vec_to(q.packed); })
      .def_property_readonly("scales",
                             [](const QuantizedExpertWeights& q) {
                               py::array out(
                                   py::dtype("float16"),
                                   {static_cast<py::ssize_t>(q.e),
                                    static_cast<py::ssize_t>(q.n)});
                               std::memcpy(out.mutable_data(),
                                           q.scales.data(),
                                           q.scales.size() * sizeof(Half));
                               return out;
                             })
      .def_property_readonly("packed_bytes",
                             &QuantizedExpertWeights::packed_bytes)
      .def_property_readonly("scale_bytes",
                             &QuantizedExpertWeights::scale_bytes)
      .def_property_readonly("payload_bytes",
                             &QuantizedExpertWeights::payload_bytes)
      .def(
          "unpack_expert",
          [](const QuantizedExpertWeights& q, size_t ei) {
            if (ei >= q.e) {
              throw std::out_of_range("expert index out of range");
            }
            auto codes = unpack_expert(q, ei);
            py::array_t<uint8_t> out({static_cast<py::ssize_t>(q.m),
                                      static_cast<py::ssize_t>(q.n)});
            std::memcpy(out.mutable_data(), codes.data(), codes.size());
            return out;
          },
          py::arg("expert"),
          "Logical (de-interleaved) stored codes of one expert, row-major.");

  mod.def(
      "quantize",
      [](const py::array& w, int bits, int threads) {
        return quantize(tensor_from(w, "quantize"), bits_from_int(bits),
                        threads);
      },
      py::arg("w"), py::arg("bits"), py::arg("threads") = 1,
      "Quantize an (E, m, n) float16 tensor to 8- or 4-bit codes.");
  mod.def(
      "dequantize_naive",
      [](const QuantizedExpertWeights& q) {
        return tensor_to(dequantize_naive(q));
      },
      py::arg("qw"), "Scalar reference dequantization.");
  mod.def(
      "dequantize_fast",
      [](const QuantizedExpertWeights& q) {
        return tensor_to(dequantize_fast(q));
      },
      py::arg("qw"),
      "Magic-constant dequantization; bit-identical to dequantize_naive.");
  mod.def(
      "pack_int4_interleaved",
      [](const py::array& values) {
        return vec_to(
            pack_int4_interleaved(u8_vec_from(values, "pack_int4")));
      },
      py::arg("values"));
  mod.def(
      "unpack_int4_interleaved",
      [](const py::array& packed, size_t count) {
        return vec_to(
            unpack_int4_interleaved(u8_vec_from(packed, "unpack_int4"), count));
      },
      py::arg("packed"), py::arg("count"));

  // --- routing ---
  py::class_<GateDecision>(mod, "GateDecision")
      .def_readonly("row", &GateDecision::row)
      .def_readonly("expert", &GateDecision::expert)
      .def_property_readonly(
          "scale", [](const GateDecision& d) { return half_to_f32(d.scale); })
      .def_property_readonly(
          "scale_bits", [](const GateDecision& d) { return d.scale.bits; })
      .def("__repr__", [](const GateDecision& d) {
        return "GateDecision(row=" + std::to_string(d.row) +
               ", expert=" + std::to_string(d.expert) +
               ", scale=" + std::to_string(half_to_f32(d.scale)) + ")";
      });

  py::class_<RoutingPlan>(mod, "RoutingPlan")
      .def_property_readonly(
          "permutation",
          [](const RoutingPlan& p) { return vec_to(p.permutation); })
      .def_property_readonly(
          "inverse_permutation",
          [](const RoutingPlan& p) { return vec_to(p.inverse_permutation); })
      .def_property_readonly(
          "expert_offsets",
          [](const RoutingPlan& p) { return vec_to(p.expert_offsets); })
      .def_readonly("active_rows", &RoutingPlan::active_rows);

  mod.def(
      "gate_top1",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>&
             logits) {
        if (logits.ndim() != 2) {
          throw std::invalid_argument("gate_top1: logits must be (rows, E)");
        }
        const size_t rows = static_cast<size_t>(logits.shape(0));
        const size_t experts = static_cast<size_t>(logits.shape(1));
        return gate_top1({logits.data(), rows * experts}, rows, experts);
      },
      py::arg("logits"),
      "Row-wise softmax argmax; returns one GateDecision per row.");
  mod.def(
      "build_routing_plan",
      [](const std::vector<GateDecision>& decisions, const py::array& finished,
         size_t n_experts) {
        const auto fin = u8_vec_from(finished, "build_routing_plan");
        return build_routing_plan(decisions, fin, n_experts);
      },
      py::arg("decisions"), py::arg("finished"), py::arg("n_experts"));
  mod.def(
      "permute_rows",
      [](const py::array& x, const RoutingPlan& plan) {
        return mat_to(permute_rows(mat_from(x, "permute_rows"), plan));
      },
      py::arg("x"), py::arg("plan"));
  mod.def(
      "unpermute_and_scale",
      [](const py::array& y, const RoutingPlan& plan,
         const std::vector<GateDecision>& decisions) {
        return mat_to(unpermute_and_scale(mat_from(y, "unpermute_and_scale"),
                                          plan, decisions));
      },
      py::arg("y"), py::arg("plan"), py::arg("decisions"));

  // --- GEMM ---
  py::class_<TrafficCounter>(mod, "TrafficCounter")
      .def_readonly("weight_bytes_read", &TrafficCounter::weight_bytes_read)
      .def_readonly("activation_bytes_read",
                    &TrafficCounter::activation_bytes_read)
      .def_readonly("bytes_written", &TrafficCounter::bytes_written)
      .def_property_readonly("total_read", &TrafficCounter::total_read)
      .def("__eq__",
           [](const TrafficCounter& a, const TrafficCounter& b) {
             return a == b;
           })
      .def("__repr__", [](const TrafficCounter& t) {
        return "TrafficCounter(weight=" + std::to_string(t.weight_bytes_read) +
               ", activation=" + std::to_string(t.activation_bytes_read) +
               ", written=" + std::to_string(t.bytes_written) + ")";
      });

  py::class_<ModelTraffic>(mod, "ModelTraffic")
      .def_readonly("expert", &ModelTraffic::expert)
      .def_readonly("other", &ModelTraffic::other)
      .def("__eq__", [](const ModelTraffic& a, const ModelTraffic& b) {
        return a == b;
      });

  mod.def(
      "gemm",
      [](const py::array& x, const py::array& w, const py::array& bias,
         bool relu, int threads) {
        TrafficCounter tc;
        const HalfMat y =
            gemm_f16(mat_from(x, "gemm x"), mat_from(w, "gemm w"),
                     vec_from(bias, "gemm bias"), act_from_bool(relu), &tc,
                     threads);
        return py::make_tuple(mat_to(y), tc);
      },
      py::arg("x"), py::arg("w"), py::arg("bias"), py::arg("relu") = false,
      py::arg("threads") = 1,
      "Dense FP16 GEMM: act(x @ w + bias).  Returns (y, traffic).");
  mod.def(
      "grouped_gemm",
      [](const py::array& x_sorted, const RoutingPlan& plan,
         const py::array& w, const py::array& bias, bool relu, int threads) {
        TrafficCounter tc;
        const auto problems = make_grouped_problems(plan);
        const HalfMat y = grouped_gemm_f16(
            mat_from(x_sorted, "grouped_gemm x"), problems,
            tensor_from(w, "grouped_gemm w"), mat_from(bias, "grouped_gemm "
                                                             "bias"),
            act_from_bool(relu), &tc, threads);
        return py::make_tuple(mat_to(y), tc);
      },
      py::arg("x_sorted"), py::arg("plan"), py::arg("w"), py::arg("bias"),
      py::arg("relu") = true, py::arg("threads") = 1,
      "Grouped per-expert GEMM over expert-sorted rows.  Returns (y, "
      "traffic).");
  mod.def(
      "grouped_gemm_quant",
      [](const py::array& x_sorted, const RoutingPlan& plan,
         const QuantizedExpertWeights& qw, const py::array& bias, bool relu,
         bool fused, int threads) {
        TrafficCounter tc;
        const auto problems = make_grouped_problems(plan);
        const HalfMat y = grouped_gemm_quant(
            mat_from(x_sorted, "grouped_gemm_quant x"), problems, qw,
            mat_from(bias, "grouped_gemm_quant bias"), act_from_bool(relu),
            &tc, threads,
            fused ? DequantMode::fused : DequantMode::separate_pass);
        return py::make_tuple(mat_to(y), tc);
      },
      py::arg("x_sorted"), py::arg("plan"), py::arg("qw"), py::arg("bias"),
      py::arg("relu") = true, py::arg("fused") = true, py::arg("threads") = 1,
      "Grouped GEMM over quantized weights with in-kernel (fused) or "
      "separate-pass dequantization.  Returns (y, traffic).");

  // --- model / decode ---
  py::class_<ModelConfig>(mod, "ModelConfig")
      .def(py::init([](uint32_t d_model, uint32_t d_ffn, uint32_t n_enc_layers,
                       uint32_t n_dec_layers, uint32_t n_experts,
                       uint32_t n_heads, uint32_t vocab_size,
                       uint32_t moe_every, uint32_t max_seq_len) {
             ModelConfig c{d_model,   d_ffn,      n_enc_layers,
                           n_dec_layers, n_experts, n_heads,
                           vocab_size, moe_every,  max_seq_len};
             c.validate();
             return c;
           }),
           py::arg("d_model") = 64, py::arg("d_ffn") = 256,
           py::arg("n_enc_layers") = 4, py::arg("n_dec_layers") = 2,
           py::arg("n_experts") = 8, py::arg("n_heads") = 4,
           py::arg("vocab_size") = 256, py::arg("moe_every") = 2,
           py::arg("max_seq_len") = 128)
      .def_readonly("d_model", &ModelConfig::d_model)
      .def_readonly("d_ffn", &ModelConfig::d_ffn)
      .def_readonly("n_enc_layers", &ModelConfig::n_enc_layers)
      .def_readonly("n_dec_layers", &ModelConfig::n_dec_layers)
      .def_readonly("n_experts", &ModelConfig::n_experts)
      .def_readonly("n_heads", &ModelConfig::n_heads)
      .def_readonly("vocab_size", &ModelConfig::vocab_size)
      .def_readonly("moe_every", &ModelConfig::moe_every)
      .def_readonly("max_seq_len", &ModelConfig::max_seq_len);

  py::class_<DecodeResult>(mod, "DecodeResult")
      .def_readonly("translations", &DecodeResult::translations)
      .def_readonly("steps", &DecodeResult::steps)
      .def_readonly("generated_tokens", &DecodeResult::generated_tokens)
      .def_readonly("traffic", &DecodeResult::traffic);

  py::class_<Model>(mod, "Model")
      .def_property_readonly(
          "config", [](const Model& m) { return m.config; })
      .def_property_readonly(
          "precision",
          [](const Model& m) { return std::string(precision_name(m.precision)); })
      .def_property_readonly("expert_payload_bytes",
                             [](const Model& m) {
                               return expert_payload_bytes(m);
                             })
      .def_property_readonly("expert_fp32_equivalent_bytes",
                             [](const Model& m) {
                               return expert_fp32_equivalent_bytes(m);
                             })
      .def(
          "quantize",
          [](const Model& m, int bits, int threads) {
            return quantize_model(m, bits_from_int(bits), threads);
          },
          py::arg("bits"), py::arg("threads") = 1)
      .def(
          "save", [](const Model& m, const std::string& path) {
            save_model(m, path);
          },
          py::arg("path"))
      .def(
          "encode",
          [](const Model& m, const std::vector<std::vector<int32_t>>& src,
             int threads) {
            return mat_to(encoder_forward(m, src, nullptr, threads));
          },
          py::arg("src"), py::arg("threads") = 1,
          "Encoder hidden states, (batch * src_len, d_model) float16.")
      .def(
          "decode",
          [](const Model& m, const std::vector<std::vector<int32_t>>& src,
             uint32_t beam, bool prune, uint32_t max_len, int threads) {
            DecodeOptions o;
            o.beam = beam;
            o.prune = prune;
            o.max_len = max_len;
            o.threads = threads;
            return beam_search_decode(m, src, o);
          },
          py::arg("src"), py::arg("beam") = 1, py::arg("prune") = true,
          py::arg("max_len") = 32, py::arg("threads") = 1);

  mod.def(
      "random_model",
      [](const ModelConfig& cfg, uint64_t seed) {
        return random_model(cfg, seed);
      },
      py::arg("config"), py::arg("seed"),
      "Deterministically seeded FP16 toy model.");
  mod.def(
      "load_model", [](const std::string& path) { return load_model(path); },
      py::arg("path"));

  // --- verification suites ---
  py::class_<SuiteResult>(mod, "SuiteResult")
      .def_readonly("name", &SuiteResult::name)
      .def_readonly("checks", &SuiteResult::checks)
      .def_readonly("failures", &SuiteResult::failures)
      .def_readonly("messages", &SuiteResult::messages)
      .def_property_readonly("ok", &SuiteResult::ok)
      .def("__repr__", [](const SuiteResult& r) {
        return "SuiteResult(name='" + r.name +
               "', checks=" + std::to_string(r.checks) +
               ", failures=" + std::to_string(r.failures) + ")";
      });
  mod.def("run_suites", &run_suites, py::arg("which") = "all",
          "Run verification suites: dequant|routing|gemm|e2e|all.");
}
