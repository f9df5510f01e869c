#include "cdl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cdl/error.hpp"

namespace cdl {

namespace {

double evaluate(const LossBuilder& build) {
  Tape tape;
  return build(tape).item();
}

}  // namespace

GradCheckResult finite_difference_check(const LossBuilder& build, std::span<Parameter* const> params,
                                        const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-3))
    throw ContractViolation("finite_difference_check: eps must lie in [1e-6, 1e-3]");

  const double f0 = evaluate(build);
  const double f1 = evaluate(build);
  if (std::memcmp(&f0, &f1, sizeof f0) != 0)
    throw DeterminismError("finite_difference_check: loss builder is not deterministic");

  Tape tape;
  const Gradients grads = tape.grad(build(tape));

  GradCheckResult res;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    const Tensor* g = grads.find(p->id);
    const std::size_t n = p->value.size();
    const std::size_t stride =
        (opts.max_coords_per_param == 0 || n <= opts.max_coords_per_param) ? 1 : n / opts.max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p->value[i];
      p->value[i] = saved + opts.eps;
      const double up = evaluate(build);
      p->value[i] = saved - opts.eps;
      const double down = evaluate(build);
      p->value[i] = saved;

      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = g ? (*g)[i] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.coords_checked;
      if (rel > res.max_rel_error || res.worst_param.empty()) {
        if (rel >= res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst_param = p->name;
          res.worst_index = i;
          res.analytic = analytic;
          res.numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace cdl
