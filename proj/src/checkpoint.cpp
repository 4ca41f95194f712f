// SPDX-License-Identifier: Apache-2.0

#include "moeinfer/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <variant>

namespace moe {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'E', 'C'};

constexpr uint8_t kDtypeF16 = 0;
constexpr uint8_t kDtypeU8 = 1;
constexpr uint8_t kDtypeU4 = 2;
constexpr uint8_t kLayoutDense = 0;
constexpr uint8_t kLayoutInterleaved = 1;

uint64_t fnv1a(const uint8_t* p, size_t n) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("checkpoint: " + what);
}

// --- writer ---

struct Writer {
  std::vector<uint8_t> out;

  void u8(uint8_t v) { out.push_back(v); }
  void u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) {
      out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
  }
  void halves(std::span<const Half> h) {
    for (const Half x : h) {
      u16(x.bits);
    }
  }
  void bytes(std::span<const uint8_t> b) {
    out.insert(out.end(), b.begin(), b.end());
  }

  void name(const std::string& s) {
    if (s.size() > 0xFFFF) {
      fail("record name too long");
    }
    u16(static_cast<uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }

  void rec_vec(const std::string& n, std::span<const Half> v) {
    name(n);
    u8(kDtypeF16);
    u8(kLayoutDense);
    u8(1);
    u64(v.size());
    halves(v);
  }
  void rec_mat(const std::string& n, const HalfMat& m) {
    name(n);
    u8(kDtypeF16);
    u8(kLayoutDense);
    u8(2);
    u64(m.rows);
    u64(m.cols);
    halves(m.data);
  }
  void rec_t3(const std::string& n, const HalfTensor3& t) {
    name(n);
    u8(kDtypeF16);
    u8(kLayoutDense);
    u8(3);
    u64(t.e);
    u64(t.m);
    u64(t.n);
    halves(t.data);
  }
  void rec_quant(const std::string& n, const QuantizedExpertWeights& q) {
    name(n);
    const bool is4 = q.bits == QuantBits::b4;
    u8(is4 ? kDtypeU4 : kDtypeU8);
    u8(is4 ? kLayoutInterleaved : kLayoutDense);
    u8(3);
    u64(q.e);
    u64(q.m);
    u64(q.n);
    bytes(q.packed);
    u64(q.scales.size());
    halves(q.scales);
  }
};

// --- reader ---

struct Reader {
  const std::vector<uint8_t>& in;
  size_t pos = 0;

  explicit Reader(const std::vector<uint8_t>& b) : in(b) {}

  void need(size_t n) const {
    if (pos + n > in.size()) {
      fail("truncated file");
    }
  }
  uint8_t u8() {
    need(1);
    return in[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) {
      v |= static_cast<uint16_t>(in[pos++]) << (8 * i);
    }
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(in[pos++]) << (8 * i);
    }
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(in[pos++]) << (8 * i);
    }
    return v;
  }
  void halves(std::span<Half> dst) {
    for (Half& h : dst) {
      h = Half(u16());
    }
  }
  void bytes(std::span<uint8_t> dst) {
    need(dst.size());
    std::memcpy(dst.data(), in.data() + pos, dst.size());
    pos += dst.size();
  }

  void expect_name(const std::string& want) {
    const uint16_t len = u16();
    need(len);
    const std::string got(reinterpret_cast<const char*>(in.data() + pos), len);
    pos += len;
    if (got != want) {
      fail("unexpected record '" + got + "', wanted '" + want + "'");
    }
  }
  void expect_dims(uint8_t want_ndim, std::span<const uint64_t> want) {
    const uint8_t nd = u8();
    if (nd != want_ndim) {
      fail("record rank mismatch");
    }
    for (const uint64_t w : want) {
      if (u64() != w) {
        fail("record shape mismatch");
      }
    }
  }

  void rec_vec(const std::string& n, std::vector<Half>& v, uint64_t len) {
    expect_name(n);
    if (u8() != kDtypeF16 || u8() != kLayoutDense) {
      fail("record '" + n + "' has wrong dtype");
    }
    const uint64_t dims[] = {len};
    expect_dims(1, dims);
    v.resize(len);
    halves(v);
  }
  void rec_mat(const std::string& n, HalfMat& m, uint64_t r, uint64_t c) {
    expect_name(n);
    if (u8() != kDtypeF16 || u8() != kLayoutDense) {
      fail("record '" + n + "' has wrong dtype");
    }
    const uint64_t dims[] = {r, c};
    expect_dims(2, dims);
    m = HalfMat(r, c);
    halves(m.data);
  }
  void rec_t3(const std::string& n, HalfTensor3& t, uint64_t e, uint64_t mm,
              uint64_t nn) {
    expect_name(n);
    if (u8() != kDtypeF16 || u8() != kLayoutDense) {
      fail("record '" + n + "' has wrong dtype");
    }
    const uint64_t dims[] = {e, mm, nn};
    expect_dims(3, dims);
    t = HalfTensor3(e, mm, nn);
    halves(t.data);
  }
  void rec_quant(const std::string& n, QuantizedExpertWeights& q,
                 QuantBits bits, uint64_t e, uint64_t mm, uint64_t nn) {
    expect_name(n);
    const uint8_t dtype = u8();
    const uint8_t layout = u8();
    const bool is4 = bits == QuantBits::b4;
    if (dtype != (is4 ? kDtypeU4 : kDtypeU8) ||
        layout != (is4 ? kLayoutInterleaved : kLayoutDense)) {
      fail("record '" + n + "' has wrong dtype");
    }
    const uint64_t dims[] = {e, mm, nn};
    expect_dims(3, dims);
    q.bits = bits;
    q.e = e;
    q.m = mm;
    q.n = nn;
    q.packed.resize(is4 ? e * mm * nn / 2 : e * mm * nn);
    bytes(q.packed);
    const uint64_t n_scales = u64();
    if (n_scales != e * nn) {
      fail("record '" + n + "' has wrong scale count");
    }
    q.scales.resize(n_scales);
    halves(q.scales);
  }
};

// Walks the model in serialization order, dispatching each tensor to the
// writer or reader so the two sides can never drift apart.  Templated on
// the (possibly const) weight types so the writer can walk a const model.
template <typename Fn, typename AttnT>
void for_each_attn(const std::string& prefix, Fn&& f, AttnT& w) {
  f.vec(prefix + ".ln_g", w.ln.gamma);
  f.vec(prefix + ".ln_b", w.ln.beta);
  f.mat(prefix + ".wq", w.wq);
  f.vec(prefix + ".bq", w.bq);
  f.mat(prefix + ".wk", w.wk);
  f.vec(prefix + ".bk", w.bk);
  f.mat(prefix + ".wv", w.wv);
  f.vec(prefix + ".bv", w.bv);
  f.mat(prefix + ".wo", w.wo);
  f.vec(prefix + ".bo", w.bo);
}

template <typename Fn, typename BlockT>
void for_each_ffn(const std::string& prefix, Fn&& f, BlockT& blk) {
  if (auto* moe = std::get_if<MoeFfn>(&blk)) {
    f.vec(prefix + ".ln_g", moe->ln.gamma);
    f.vec(prefix + ".ln_b", moe->ln.beta);
    f.mat(prefix + ".gate_w", moe->gate_w);
    f.vec(prefix + ".gate_b", moe->gate_b);
    f.experts(prefix, *moe);
    f.mat(prefix + ".b1", moe->b1);
    f.mat(prefix + ".b2", moe->b2);
  } else {
    auto& d = std::get<DenseFfn>(blk);
    f.vec(prefix + ".ln_g", d.ln.gamma);
    f.vec(prefix + ".ln_b", d.ln.beta);
    f.mat(prefix + ".w1", d.w1);
    f.vec(prefix + ".b1", d.b1);
    f.mat(prefix + ".w2", d.w2);
    f.vec(prefix + ".b2", d.b2);
  }
}

template <typename Fn, typename ModelT>
void for_each_tensor(ModelT& m, Fn&& f) {
  f.mat("tok_embed", m.tok_embed);
  f.mat("pos_embed", m.pos_embed);
  for (size_t i = 0; i < m.encoder.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    for_each_attn(p + ".attn", f, m.encoder[i].self_attn);
    for_each_ffn(p + ".ffn", f, m.encoder[i].ffn);
  }
  for (size_t i = 0; i < m.decoder.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    for_each_attn(p + ".self", f, m.decoder[i].self_attn);
    for_each_attn(p + ".cross", f, m.decoder[i].cross_attn);
    for_each_ffn(p + ".ffn", f, m.decoder[i].ffn);
  }
  f.vec("enc_ln_g", m.enc_ln.gamma);
  f.vec("enc_ln_b", m.enc_ln.beta);
  f.vec("dec_ln_g", m.dec_ln.gamma);
  f.vec("dec_ln_b", m.dec_ln.beta);
  f.mat("out_w", m.out_w);
  f.vec("out_b", m.out_b);
}

size_t count_records(const Model& m) {
  size_t n = 2 + 6;  // embeddings + final norms + output projection
  n += m.encoder.size() * 10;   // self-attention
  n += m.decoder.size() * 20;   // self- + cross-attention
  for (const auto& l : m.encoder) {
    n += std::holds_alternative<MoeFfn>(l.ffn) ? 8 : 6;
  }
  for (const auto& l : m.decoder) {
    n += std::holds_alternative<MoeFfn>(l.ffn) ? 8 : 6;
  }
  return n;
}

struct WriteVisitor {
  Writer& w;
  void vec(const std::string& n, const std::vector<Half>& v) {
    w.rec_vec(n, v);
  }
  void mat(const std::string& n, const HalfMat& m) { w.rec_mat(n, m); }
  void experts(const std::string& prefix, const MoeFfn& moe) {
    if (moe.quantized()) {
      w.rec_quant(prefix + ".w1", *moe.qw1);
      w.rec_quant(prefix + ".w2", *moe.qw2);
    } else {
      w.rec_t3(prefix + ".w1", moe.w1);
      w.rec_t3(prefix + ".w2", moe.w2);
    }
  }
};

struct ReadVisitor {
  Reader& r;
  const ModelConfig& cfg;
  Precision precision;

  void vec(const std::string& n, std::vector<Half>& v) {
    // Every vector's length is the trailing dimension of its sibling
    // matrix; derive it from the name suffix.
    uint64_t len = cfg.d_model;
    if (n.ends_with(".b1")) {
      len = cfg.d_ffn;
    } else if (n.ends_with(".gate_b")) {
      len = cfg.n_experts;
    } else if (n == "out_b") {
      len = cfg.vocab_size;
    }
    r.rec_vec(n, v, len);
  }
  void mat(const std::string& n, HalfMat& m) {
    uint64_t rows = cfg.d_model;
    uint64_t cols = cfg.d_model;
    if (n == "tok_embed") {
      rows = cfg.vocab_size;
    } else if (n == "pos_embed") {
      rows = cfg.max_seq_len;
    } else if (n == "out_w") {
      cols = cfg.vocab_size;
    } else if (n.ends_with(".gate_w")) {
      cols = cfg.n_experts;
    } else if (n.ends_with(".w1")) {
      cols = cfg.d_ffn;
    } else if (n.ends_with(".w2")) {
      rows = cfg.d_ffn;
    } else if (n.ends_with(".b1")) {
      rows = cfg.n_experts;
      cols = cfg.d_ffn;
    } else if (n.ends_with(".b2")) {
      rows = cfg.n_experts;
    }
    r.rec_mat(n, m, rows, cols);
  }
  void experts(const std::string& prefix, MoeFfn& moe) {
    if (precision == Precision::f16) {
      r.rec_t3(prefix + ".w1", moe.w1, cfg.n_experts, cfg.d_model, cfg.d_ffn);
      r.rec_t3(prefix + ".w2", moe.w2, cfg.n_experts, cfg.d_ffn, cfg.d_model);
    } else {
      const QuantBits bits =
          precision == Precision::int8 ? QuantBits::b8 : QuantBits::b4;
      moe.qw1.emplace();
      moe.qw2.emplace();
      r.rec_quant(prefix + ".w1", *moe.qw1, bits, cfg.n_experts, cfg.d_model,
                  cfg.d_ffn);
      r.rec_quant(prefix + ".w2", *moe.qw2, bits, cfg.n_experts, cfg.d_ffn,
                  cfg.d_model);
    }
  }
};

}  // namespace

std::vector<uint8_t> serialize_model(const Model& m) {
  m.validate();
  Writer w;
  w.bytes(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(kMagic), 4));
  w.u32(kCheckpointVersion);
  const ModelConfig& c = m.config;
  for (const uint32_t v : {c.d_model, c.d_ffn, c.n_enc_layers, c.n_dec_layers,
                           c.n_experts, c.n_heads, c.vocab_size, c.moe_every,
                           c.max_seq_len}) {
    w.u32(v);
  }
  w.u8(static_cast<uint8_t>(m.precision));
  w.u32(static_cast<uint32_t>(count_records(m)));

  WriteVisitor visitor{w};
  for_each_tensor(m, visitor);

  w.u64(fnv1a(w.out.data(), w.out.size()));
  return std::move(w.out);
}

Model parse_model(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 12) {
    fail("truncated file");
  }
  const size_t body = bytes.size() - 8;
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= static_cast<uint64_t>(bytes[body + i]) << (8 * i);
  }
  if (stored != fnv1a(bytes.data(), body)) {
    fail("checksum mismatch");
  }

  Reader r(bytes);
  char magic[4];
  r.bytes(std::span<uint8_t>(reinterpret_cast<uint8_t*>(magic), 4));
  if (std::memcmp(magic, kMagic, 4) != 0) {
    fail("bad magic");
  }
  if (r.u32() != kCheckpointVersion) {
    fail("unsupported version");
  }

  Model m;
  ModelConfig& c = m.config;
  for (uint32_t* f : {&c.d_model, &c.d_ffn, &c.n_enc_layers, &c.n_dec_layers,
                      &c.n_experts, &c.n_heads, &c.vocab_size, &c.moe_every,
                      &c.max_seq_len}) {
    *f = r.u32();
  }
  c.validate();
  const uint8_t prec = r.u8();
  if (prec > 2) {
    fail("bad precision tag");
  }
  m.precision = static_cast<Precision>(prec);
  const uint32_t n_records = r.u32();

  // Build the skeleton so the FFN variants sit in the right slots, then let
  // the traversal fill every tensor.
  m.encoder.resize(c.n_enc_layers);
  m.decoder.resize(c.n_dec_layers);
  for (uint32_t i = 0; i < c.n_enc_layers; ++i) {
    if (c.is_moe_layer(i)) {
      m.encoder[i].ffn = MoeFfn{};
    }
  }
  for (uint32_t i = 0; i < c.n_dec_layers; ++i) {
    if (c.is_moe_layer(i)) {
      m.decoder[i].ffn = MoeFfn{};
    }
  }

  ReadVisitor visitor{r, c, m.precision};
  for_each_tensor(m, visitor);

  if (n_records != count_records(m)) {
    fail("record count mismatch");
  }
  if (r.pos != body) {
    fail("trailing bytes");
  }
  m.validate();
  return m;
}

void save_model(const Model& m, const std::string& path) {
  const std::vector<uint8_t> bytes = serialize_model(m);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    fail("cannot open '" + path + "' for writing");
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) {
    fail("write to '" + path + "' failed");
  }
}

Model load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) {
    fail("cannot open '" + path + "'");
  }
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) {
    fail("read from '" + path + "' failed");
  }
  return parse_model(bytes);
}

uint64_t expert_payload_bytes(const Model& m) {
  uint64_t total = 0;
  auto add = [&](const FfnBlock& blk) {
    const auto* moe = std::get_if<MoeFfn>(&blk);
    if (moe == nullptr) {
      return;
    }
    if (moe->quantized()) {
      total += moe->qw1->payload_bytes() + moe->qw2->payload_bytes();
    } else {
      total += (moe->w1.size() + moe->w2.size()) * sizeof(Half);
    }
  };
  for (const auto& l : m.encoder) {
    add(l.ffn);
  }
  for (const auto& l : m.decoder) {
    add(l.ffn);
  }
  return total;
}

uint64_t expert_fp32_equivalent_bytes(const Model& m) {
  uint64_t numel = 0;
  auto add = [&](const FfnBlock& blk) {
    const auto* moe = std::get_if<MoeFfn>(&blk);
    if (moe == nullptr) {
      return;
    }
    if (moe->quantized()) {
      numel += 2ull * moe->qw1->e * moe->qw1->m * moe->qw1->n;
    } else {
      numel += moe->w1.size() + moe->w2.size();
    }
  };
  for (const auto& l : m.encoder) {
    add(l.ffn);
  }
  for (const auto& l : m.decoder) {
    add(l.ffn);
  }
  return numel * 4;
}

}  // namespace moe
