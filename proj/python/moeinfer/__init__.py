# SPDX-License-Identifier: Apache-2.0
"""Desk-scale MoE encoder-decoder inference engine.

Thin python surface over the C++ core.  FP16 tensors cross the boundary as
numpy float16 arrays whose buffers hold the engine's exact IEEE binary16 bit
patterns, so bit-level comparisons work from python:

    >>> import numpy as np, moeinfer as mi
    >>> w = np.random.randn(4, 16, 32).astype(np.float16)
    >>> qw = mi.quantize(w, bits=8)
    >>> fast, naive = mi.dequantize_fast(qw), mi.dequantize_naive(qw)
    >>> bool(np.array_equal(fast.view(np.uint16), naive.view(np.uint16)))
    True
"""

from ._moeinfer import (
    DecodeResult,
    GateDecision,
    Model,
    ModelConfig,
    ModelTraffic,
    QuantizedWeights,
    RoutingPlan,
    SuiteResult,
    TrafficCounter,
    __version__,
    build_routing_plan,
    compose_magic,
    debias_const_u4,
    debias_const_u8,
    dequantize_fast,
    dequantize_naive,
    f32_to_half,
    gate_top1,
    gemm,
    grouped_gemm,
    grouped_gemm_quant,
    half_add,
    half_mul,
    half_to_f32,
    load_model,
    pack_int4_interleaved,
    permute_rows,
    quantize,
    random_model,
    run_suites,
    unpack_int4_interleaved,
    unpermute_and_scale,
)

__all__ = [
    "DecodeResult",
    "GateDecision",
    "Model",
    "ModelConfig",
    "ModelTraffic",
    "QuantizedWeights",
    "RoutingPlan",
    "SuiteResult",
    "TrafficCounter",
    "__version__",
    "build_routing_plan",
    "compose_magic",
    "debias_const_u4",
    "debias_const_u8",
    "dequantize_fast",
    "dequantize_naive",
    "f32_to_half",
    "gate_top1",
    "gemm",
    "grouped_gemm",
    "grouped_gemm_quant",
    "half_add",
    "half_mul",
    "half_to_f32",
    "load_model",
    "pack_int4_interleaved",
    "permute_rows",
    "quantize",
    "random_model",
    "run_suites",
    "unpack_int4_interleaved",
    "unpermute_and_scale",
]
