// SPDX-License-Identifier: Apache-2.0
//
// `moe` — command-line front end.
//
//   moe init      --out ckpt.moec [--seed N] [config flags]
//   moe quantize  --in a.moec --out b.moec --bits {4,8}
//   moe verify    [--suite dequant|routing|gemm|e2e|all]
//   moe decode    --config ckpt.moec --tokens "5,6,7" [--beam N] [--prune on|off]
//   moe bench     --config ckpt.moec --precision fp16|int8|int4
//                 [--batch LIST] [--beam LIST] [--prune on|off|both]
//                 [--seed N] [--src-len N] [--max-len N] [--threads N]
//                 [--out report.jsonl]
//
// Exit codes: 0 success, 1 verification/benchmark property failure,
// 2 usage or I/O error.  All decode output is independent of --threads.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moeinfer/checkpoint.hpp"
#include "moeinfer/model.hpp"
#include "moeinfer/quantize.hpp"
#include "moeinfer/rng.hpp"
#include "moeinfer/verify.hpp"

using json = nlohmann::ordered_json;
using namespace moe;

namespace {

constexpr const char* kReportSchema = "moe-bench-v1";

json config_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"d_ffn", c.d_ffn},
              {"n_enc_layers", c.n_enc_layers},
              {"n_dec_layers", c.n_dec_layers},
              {"n_experts", c.n_experts},
              {"n_heads", c.n_heads},
              {"vocab_size", c.vocab_size},
              {"moe_every", c.moe_every},
              {"max_seq_len", c.max_seq_len}};
}

// The documented BenchReport field list.  validate_report_line rejects
// anything that deviates — extra fields, missing fields, wrong types.
const std::vector<std::pair<std::string, char>>& report_fields() {
  // type tags: s string, i integer >= 0, b bool, f float >= 0, o object
  static const std::vector<std::pair<std::string, char>> kFields = {
      {"schema", 's'},         {"config", 'o'},
      {"precision", 's'},      {"batch", 'i'},
      {"beam", 'i'},           {"prune", 'b'},
      {"seed", 'i'},           {"src_len", 'i'},
      {"max_len", 'i'},        {"threads", 'i'},
      {"steps", 'i'},          {"input_tokens", 'i'},
      {"generated_tokens", 'i'},
      {"expert_weight_bytes", 'i'},
      {"expert_activation_bytes", 'i'},
      {"expert_bytes_written", 'i'},
      {"other_weight_bytes", 'i'},
      {"other_activation_bytes", 'i'},
      {"other_bytes_written", 'i'},
      {"wall_ms", 'f'},
      {"input_tokens_per_second", 'f'},
  };
  return kFields;
}

void validate_report_line(const json& j) {
  if (!j.is_object()) {
    throw std::runtime_error("report line is not an object");
  }
  const auto& fields = report_fields();
  for (const auto& [key, type] : fields) {
    if (!j.contains(key)) {
      throw std::runtime_error("report line missing field '" + key + "'");
    }
    const auto& v = j.at(key);
    bool ok = false;
    switch (type) {
      case 's':
        ok = v.is_string();
        break;
      case 'i':
        ok = v.is_number_unsigned() ||
             (v.is_number_integer() && v.get<int64_t>() >= 0);
        break;
      case 'b':
        ok = v.is_boolean();
        break;
      case 'f':
        ok = v.is_number() && v.get<double>() >= 0.0;
        break;
      case 'o':
        ok = v.is_object();
        break;
    }
    if (!ok) {
      throw std::runtime_error("report field '" + key + "' has wrong type");
    }
  }
  if (j.size() != fields.size()) {
    for (const auto& [key, value] : j.items()) {
      bool known = false;
      for (const auto& [fk, ft] : fields) {
        known = known || fk == key;
      }
      if (!known) {
        throw std::runtime_error("report line has unknown field '" + key +
                                 "'");
      }
    }
  }
  // Config echo must hold exactly the nine config keys.
  const json want_cfg = config_json(ModelConfig{});
  const auto& cfg = j.at("config");
  if (cfg.size() != want_cfg.size()) {
    throw std::runtime_error("report config echo has wrong key count");
  }
  for (const auto& [key, value] : want_cfg.items()) {
    if (!cfg.contains(key) || !cfg.at(key).is_number_integer()) {
      throw std::runtime_error("report config echo missing '" + key + "'");
    }
  }
  if (j.at("schema").get<std::string>() != kReportSchema) {
    throw std::runtime_error("report schema tag mismatch");
  }
}

// The prune flag is deliberately NOT mixed in: `--prune both` must feed the
// identical workload to both variants so their rows form an A/B pair.
uint64_t cell_seed(uint64_t base, uint64_t batch, uint64_t beam) {
  uint64_t h = base + 0x9e3779b97f4a7c15ull;
  for (const uint64_t v : {batch, beam}) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
  }
  // 53 bits: the seed lands in JSON, where double-backed parsers must be
  // able to round-trip it exactly.
  return h >> 11;
}

std::vector<std::vector<int32_t>> synthetic_batch(uint64_t seed, size_t batch,
                                                  size_t src_len,
                                                  uint32_t vocab) {
  Rng rng(seed);
  std::vector<std::vector<int32_t>> out(batch, std::vector<int32_t>(src_len));
  for (auto& sentence : out) {
    for (auto& t : sentence) {
      t = static_cast<int32_t>(2 + rng.uniform_int(vocab - 2));
    }
  }
  return out;
}

void print_size_summary(const Model& m) {
  const uint64_t payload = expert_payload_bytes(m);
  const uint64_t fp32 = expert_fp32_equivalent_bytes(m);
  std::printf("precision            %s\n", precision_name(m.precision));
  std::printf("expert payload       %llu bytes\n",
              static_cast<unsigned long long>(payload));
  std::printf("fp32 equivalent      %llu bytes\n",
              static_cast<unsigned long long>(fp32));
  std::printf("payload / fp32       %.6f\n",
              static_cast<double>(payload) / static_cast<double>(fp32));
}

// --- subcommand options ---

struct InitOpts {
  std::string out;
  uint64_t seed = 42;
  ModelConfig cfg;
};

struct QuantizeOpts {
  std::string in, out;
  int bits = 8;
};

struct VerifyOpts {
  std::string suite = "all";
};

struct DecodeOpts {
  std::string config;
  std::string tokens;
  uint32_t beam = 1;
  std::string prune = "on";
  uint32_t max_len = 32;
  int threads = 1;
};

struct BenchOpts {
  std::string config;
  std::string precision = "fp16";
  std::vector<uint32_t> batch{8};
  std::vector<uint32_t> beam{1};
  std::string prune = "on";
  uint64_t seed = 1;
  uint32_t src_len = 40;
  uint32_t max_len = 32;
  int threads = 1;
  std::string out;
};

int cmd_init(const InitOpts& o) {
  const Model m = random_model(o.cfg, o.seed);
  save_model(m, o.out);
  std::printf("wrote %s\n", o.out.c_str());
  print_size_summary(m);
  return 0;
}

int cmd_quantize(const QuantizeOpts& o) {
  const Model m = load_model(o.in);
  if (m.precision != Precision::f16) {
    std::fprintf(stderr, "error: %s is already quantized (%s)\n",
                 o.in.c_str(), precision_name(m.precision));
    return 2;
  }
  const QuantBits bits = o.bits == 4 ? QuantBits::b4 : QuantBits::b8;
  const Model q = quantize_model(m, bits);
  save_model(q, o.out);
  std::printf("wrote %s\n", o.out.c_str());
  const uint64_t before = expert_payload_bytes(m);
  const uint64_t after = expert_payload_bytes(q);
  print_size_summary(q);
  std::printf("fp16 payload         %llu bytes\n",
              static_cast<unsigned long long>(before));
  std::printf("payload / fp16       %.6f\n",
              static_cast<double>(after) / static_cast<double>(before));
  return 0;
}

int cmd_verify(const VerifyOpts& o) {
  const auto results = run_suites(o.suite);
  bool all_ok = true;
  for (const auto& r : results) {
    std::printf("suite %-8s %8llu checks  %llu failures  %s\n",
                r.name.c_str(), static_cast<unsigned long long>(r.checks),
                static_cast<unsigned long long>(r.failures),
                r.ok() ? "PASS" : "FAIL");
    for (const auto& msg : r.messages) {
      std::printf("    %s\n", msg.c_str());
    }
    all_ok = all_ok && r.ok();
  }
  return all_ok ? 0 : 1;
}

int cmd_decode(const DecodeOpts& o) {
  const Model m = load_model(o.config);
  std::vector<int32_t> sentence;
  std::string tok;
  for (const char ch : o.tokens + ",") {
    if (ch == ',' || ch == ' ') {
      if (!tok.empty()) {
        sentence.push_back(std::stoi(tok));
        tok.clear();
      }
    } else {
      tok.push_back(ch);
    }
  }
  if (sentence.empty()) {
    std::fprintf(stderr, "error: --tokens is empty\n");
    return 2;
  }
  DecodeOptions opts;
  opts.beam = o.beam;
  opts.prune = o.prune != "off";
  opts.max_len = o.max_len;
  opts.threads = o.threads;
  const auto res = beam_search_decode(m, {sentence}, opts);
  for (size_t i = 0; i < res.translations[0].size(); ++i) {
    std::printf("%s%d", i == 0 ? "" : " ", res.translations[0][i]);
  }
  std::printf("\n");
  return 0;
}

int cmd_bench(const BenchOpts& o) {
  const Model m = load_model(o.config);
  if (std::string(precision_name(m.precision)) != o.precision) {
    std::fprintf(stderr,
                 "error: checkpoint %s holds %s weights but --precision says "
                 "%s\n",
                 o.config.c_str(), precision_name(m.precision),
                 o.precision.c_str());
    return 2;
  }
  if (o.src_len > m.config.max_seq_len || o.src_len == 0) {
    std::fprintf(stderr, "error: --src-len out of range\n");
    return 2;
  }

  std::vector<bool> prunes;
  if (o.prune == "on") {
    prunes = {true};
  } else if (o.prune == "off") {
    prunes = {false};
  } else {
    prunes = {false, true};
  }

  std::vector<json> lines;
  std::printf("%-5s %6s %5s %6s %6s %8s %9s %14s %14s %10s %9s\n", "prec",
              "batch", "beam", "prune", "steps", "in_tok", "gen_tok",
              "exp_wt_bytes", "exp_act_bytes", "tok/s", "wall_ms");
  for (const uint32_t batch : o.batch) {
    for (const uint32_t beam : o.beam) {
      for (const bool prune : prunes) {
        const uint64_t seed = cell_seed(o.seed, batch, beam);
        const auto src =
            synthetic_batch(seed, batch, o.src_len, m.config.vocab_size);
        DecodeOptions opts;
        opts.beam = beam;
        opts.prune = prune;
        opts.max_len = o.max_len;
        opts.threads = o.threads;

        const auto t0 = std::chrono::steady_clock::now();
        const auto res = beam_search_decode(m, src, opts);
        const auto t1 = std::chrono::steady_clock::now();
        const double wall_ms =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
        const uint64_t input_tokens = static_cast<uint64_t>(batch) * o.src_len;
        const double tps =
            wall_ms > 0.0 ? 1000.0 * static_cast<double>(input_tokens) / wall_ms
                          : 0.0;

        json line = {
            {"schema", kReportSchema},
            {"config", config_json(m.config)},
            {"precision", o.precision},
            {"batch", batch},
            {"beam", beam},
            {"prune", prune},
            {"seed", seed},
            {"src_len", o.src_len},
            {"max_len", o.max_len},
            {"threads", o.threads},
            {"steps", res.steps},
            {"input_tokens", input_tokens},
            {"generated_tokens", res.generated_tokens},
            {"expert_weight_bytes", res.traffic.expert.weight_bytes_read},
            {"expert_activation_bytes",
             res.traffic.expert.activation_bytes_read},
            {"expert_bytes_written", res.traffic.expert.bytes_written},
            {"other_weight_bytes", res.traffic.other.weight_bytes_read},
            {"other_activation_bytes",
             res.traffic.other.activation_bytes_read},
            {"other_bytes_written", res.traffic.other.bytes_written},
            {"wall_ms", wall_ms},
            {"input_tokens_per_second", tps},
        };
        validate_report_line(line);
        lines.push_back(line);

        std::printf("%-5s %6u %5u %6s %6u %8llu %9llu %14llu %14llu %10.0f "
                    "%9.1f\n",
                    o.precision.c_str(), batch, beam, prune ? "on" : "off",
                    res.steps, static_cast<unsigned long long>(input_tokens),
                    static_cast<unsigned long long>(res.generated_tokens),
                    static_cast<unsigned long long>(
                        res.traffic.expert.weight_bytes_read),
                    static_cast<unsigned long long>(
                        res.traffic.expert.activation_bytes_read),
                    tps, wall_ms);
      }
    }
  }

  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) {
      std::fprintf(stderr, "error: cannot write %s\n", o.out.c_str());
      return 2;
    }
    for (const auto& line : lines) {
      f << line.dump() << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE inference engine workbench"};
  app.require_subcommand(1);

  InitOpts init_o;
  auto* init = app.add_subcommand("init", "create a seeded toy checkpoint");
  init->add_option("--out", init_o.out, "output checkpoint path")->required();
  init->add_option("--seed", init_o.seed, "weight RNG seed");
  init->add_option("--d-model", init_o.cfg.d_model, "hidden width");
  init->add_option("--d-ffn", init_o.cfg.d_ffn, "FFN width");
  init->add_option("--enc-layers", init_o.cfg.n_enc_layers, "encoder layers");
  init->add_option("--dec-layers", init_o.cfg.n_dec_layers, "decoder layers");
  init->add_option("--experts", init_o.cfg.n_experts, "experts per MoE layer");
  init->add_option("--heads", init_o.cfg.n_heads, "attention heads");
  init->add_option("--vocab", init_o.cfg.vocab_size, "vocabulary size");
  init->add_option("--moe-every", init_o.cfg.moe_every,
                   "layers i with i %% moe-every == 0 carry MoE FFNs");
  init->add_option("--max-seq-len", init_o.cfg.max_seq_len,
                   "position table size");

  QuantizeOpts quant_o;
  auto* quant = app.add_subcommand("quantize", "quantize expert weights");
  quant->add_option("--in", quant_o.in, "input checkpoint")->required();
  quant->add_option("--out", quant_o.out, "output checkpoint")->required();
  quant->add_option("--bits", quant_o.bits, "code width")
      ->check(CLI::IsMember({4, 8}))
      ->required();

  VerifyOpts verify_o;
  auto* verify = app.add_subcommand("verify", "run verification suites");
  verify->add_option("--suite", verify_o.suite,
                     "dequant|routing|gemm|e2e|all");

  DecodeOpts decode_o;
  auto* decode = app.add_subcommand("decode", "translate one sentence");
  decode->add_option("--config", decode_o.config, "checkpoint path")
      ->required();
  decode->add_option("--tokens", decode_o.tokens, "comma-separated token ids")
      ->required();
  decode->add_option("--beam", decode_o.beam, "beam width");
  decode->add_option("--prune", decode_o.prune, "on|off")
      ->check(CLI::IsMember({"on", "off"}));
  decode->add_option("--max-len", decode_o.max_len, "decode step budget");
  decode->add_option("--threads", decode_o.threads, "worker threads");

  BenchOpts bench_o;
  auto* bench = app.add_subcommand("bench", "benchmark decode workloads");
  bench->add_option("--config", bench_o.config, "checkpoint path")->required();
  bench->add_option("--precision", bench_o.precision, "fp16|int8|int4")
      ->check(CLI::IsMember({"fp16", "int8", "int4"}))
      ->required();
  bench->add_option("--batch", bench_o.batch, "batch sizes (repeatable)")
      ->delimiter(',');
  bench->add_option("--beam", bench_o.beam, "beam widths (repeatable)")
      ->delimiter(',');
  bench->add_option("--prune", bench_o.prune, "on|off|both")
      ->check(CLI::IsMember({"on", "off", "both"}));
  bench->add_option("--seed", bench_o.seed, "base seed for synthetic input");
  bench->add_option("--src-len", bench_o.src_len, "tokens per input sentence");
  bench->add_option("--max-len", bench_o.max_len, "decode step budget");
  bench->add_option("--threads", bench_o.threads, "worker threads");
  bench->add_option("--out", bench_o.out, "JSONL report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (init->parsed()) {
      return cmd_init(init_o);
    }
    if (quant->parsed()) {
      return cmd_quantize(quant_o);
    }
    if (verify->parsed()) {
      return cmd_verify(verify_o);
    }
    if (decode->parsed()) {
      return cmd_decode(decode_o);
    }
    if (bench->parsed()) {
      return cmd_bench(bench_o);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
