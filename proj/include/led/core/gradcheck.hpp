#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "led/core/tensor.hpp"

namespace led {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates probed per tensor; 0 = all. Subsets are drawn deterministically.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

// Max over probed coordinates of |analytic - central difference| / max(1, |analytic|).
// `f` must be deterministic and return a scalar built from recorded ops on `params`.
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         const GradCheckOptions& options);
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps);

}  // namespace led
