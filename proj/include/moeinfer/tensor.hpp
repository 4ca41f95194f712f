// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense containers for half-precision data.  Row-major throughout;
// shapes are fixed at construction.  These are deliberately plain so tests
// can poke at raw storage.

#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "moeinfer/half.hpp"

namespace moe {

struct HalfMat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<Half> data;

  HalfMat() = default;
  HalfMat(size_t r, size_t c) : rows(r), cols(c), data(r * c) {}

  Half& at(size_t r, size_t c) { return data[r * cols + c]; }
  Half at(size_t r, size_t c) const { return data[r * cols + c]; }

  std::span<Half> row(size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const Half> row(size_t r) const {
    return {data.data() + r * cols, cols};
  }

  size_t size() const { return data.size(); }
  bool same_shape(const HalfMat& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

// (experts, rows, cols), row-major within each expert slab.
struct HalfTensor3 {
  size_t e = 0;
  size_t m = 0;
  size_t n = 0;
  std::vector<Half> data;

  HalfTensor3() = default;
  HalfTensor3(size_t e_, size_t m_, size_t n_)
      : e(e_), m(m_), n(n_), data(e_ * m_ * n_) {}

  Half& at(size_t ei, size_t mi, size_t ni) {
    return data[(ei * m + mi) * n + ni];
  }
  Half at(size_t ei, size_t mi, size_t ni) const {
    return data[(ei * m + mi) * n + ni];
  }

  std::span<Half> expert(size_t ei) { return {data.data() + ei * m * n, m * n}; }
  std::span<const Half> expert(size_t ei) const {
    return {data.data() + ei * m * n, m * n};
  }

  size_t size() const { return data.size(); }
};

inline void require(bool cond, const char* what) {
  if (!cond) {
    throw std::invalid_argument(what);
  }
}

}  // namespace moe
