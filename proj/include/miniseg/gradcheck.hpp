// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace miniseg {

struct GradCheckOptions {
  double perturbation = 1e-4;
  double tolerance = 1e-3;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // number of gradient entries compared
  bool passed = false;
};

/// Compares the float32 analytic gradient of every differentiable op against
/// central finite differences of its float64 reference implementation on
/// random tensors no larger than 2x4x6x6. The scalar objective is
/// sum(R * op(inputs)) with a fixed random R.
///
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-2).
std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opts = {});

}  // namespace miniseg
