#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace led {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 5;  // random instances per primitive
  double eps = 1e-5;
};

// Central differences against reverse mode for every primitive op and for
// the composed adapter + detector loss of each architecture.
std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& options = {});

}  // namespace led
