#pragma once

#include <functional>
#include <span>
#include <string>

#include "cdl/autodiff.hpp"

namespace cdl {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // 0 checks every coordinate; otherwise an even stride over each parameter.
  std::size_t max_coords_per_param = 0;
};

using LossBuilder = std::function<Var(Tape&)>;

/// Compares tape gradients against central differences for every trainable
/// parameter in `params`. Frozen parameters are skipped.
GradCheckResult finite_difference_check(const LossBuilder& build, std::span<Parameter* const> params,
                                        const GradCheckOptions& opts = {});

}  // namespace cdl
