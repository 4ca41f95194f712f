// SPDX-License-Identifier: Apache-2.0
//
// Self-contained verification suites, runnable from the CLI (`moe verify`)
// and from the bindings.  Each suite re-derives its expectations from slow
// reference code at run time, so a corrupted build — e.g. one poisoned via
// MOE_FAULT_INJECT — fails here even though it links fine.

#pragma once

#include <string>
#include <vector>

namespace moe {

struct SuiteResult {
  std::string name;
  uint64_t checks = 0;
  uint64_t failures = 0;
  std::vector<std::string> messages;  // first few failures, for diagnostics

  bool ok() const { return failures == 0; }
};

SuiteResult verify_dequant();  // exhaustive code sweeps + magic constants
SuiteResult verify_routing();  // plan invariants over random instances
SuiteResult verify_gemm();     // grouped kernels vs naive oracle + traffic
SuiteResult verify_e2e();      // MoE layer, decode and pruning end to end

// Named lookup: dequant | routing | gemm | e2e | all.  Unknown -> throws.
std::vector<SuiteResult> run_suites(const std::string& which);

}  // namespace moe
