#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "raamil/graph.hpp"
#include "raamil/rng.hpp"
#include "raamil/tensor.hpp"

namespace raamil::testing {

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// max |a - b| / max(max |a|, max |b|, floor). Tensor-level relative error so
/// that coordinates whose true gradient is ~0 do not dominate.
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-10) {
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace raamil::testing
