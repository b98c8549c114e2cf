#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nmsw {

struct GradCheckResult {
  std::string name;  // op or "op/input"
  std::uint64_t seed = 0;
  double max_rel_error = 0;
};

/// Finite-difference checks of every differentiable stage, `seeds` random
/// instances each. The NMSW entry runs a miniature model end to end with the
/// soft relaxation and frozen Gumbel noise.
std::vector<GradCheckResult> run_gradcheck(int seeds = 5, double eps = 1e-4);

}  // namespace nmsw
