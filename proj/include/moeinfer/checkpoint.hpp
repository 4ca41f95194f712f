// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint serialization.
//
// Binary layout (all integers little-endian):
//   magic      "MOEC" (4 bytes)
//   version    u32 == 1
//   config     9 x u32: d_model, d_ffn, n_enc_layers, n_dec_layers,
//              n_experts, n_heads, vocab_size, moe_every, max_seq_len
//   precision  u8: 0 = fp16, 1 = int8, 2 = int4
//   n_records  u32
//   records    see below, in a fixed traversal order of the model
//   checksum   u64 FNV-1a over every preceding byte
//
// Each record:
//   name       u16 length + ASCII bytes (e.g. "enc.0.attn.wq")
//   dtype      u8: 0 = f16, 1 = u8-offset codes, 2 = u4 codes
//   layout     u8: 0 = dense row-major, 1 = int4 interleaved
//              (dtype 2 must carry layout 1; everything else layout 0)
//   ndim       u8, then ndim x u64 dims
//   payload    f16: prod(dims) x 2 bytes of IEEE binary16 bits
//              quantized: packed code bytes (prod(dims) for u8, half that
//              for u4), then u64 scale count + that many f16 scales
//
// The loader walks the same traversal the writer used, so name, dtype and
// shape of every record are fully determined by config + precision; any
// deviation, a bad checksum, or trailing bytes is a hard error.  A loaded
// model re-serializes to the identical byte string.

#pragma once

#include <cstdint>
#include <string>

#include "moeinfer/model.hpp"

namespace moe {

inline constexpr uint32_t kCheckpointVersion = 1;

void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

// Serialize/parse against an in-memory buffer (the file API wraps these).
std::vector<uint8_t> serialize_model(const Model& m);
Model parse_model(const std::vector<uint8_t>& bytes);

// Bytes a consumer must ship for the expert weight tensors (w1/w2 of every
// MoE block): packed codes + scales when quantized, raw f16 otherwise.
// Biases and every non-expert tensor are excluded.
uint64_t expert_payload_bytes(const Model& m);

// The same tensors' size if they were held as fp32 (numel x 4), the
// baseline the size-reduction ratios are quoted against.
uint64_t expert_fp32_equivalent_bytes(const Model& m);

}  // namespace moe
