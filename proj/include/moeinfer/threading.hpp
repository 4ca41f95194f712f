// SPDX-License-Identifier: Apache-2.0
//
// Tiny fork-join helper.  Work is split into contiguous chunks whose
// boundaries depend only on (n, threads); each chunk writes disjoint output,
// so results are identical for any thread count.

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace moe {

inline void parallel_for(size_t n, int threads,
                         const std::function<void(size_t, size_t)>& body) {
  if (n == 0) {
    return;
  }
  const size_t workers =
      std::min<size_t>(std::max(threads, 1), n);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  const size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    const size_t begin = w * chunk;
    const size_t end = std::min(n, begin + chunk);
    if (begin >= end) {
      break;
    }
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& t : pool) {
    t.join();
  }
}

}  // namespace moe
