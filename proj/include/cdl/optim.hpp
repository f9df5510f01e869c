#pragma once

#include <cstdint>
#include <map>
#include <span>

#include "cdl/autodiff.hpp"

namespace cdl {

struct AdamState {
  Tensor m;
  Tensor v;
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of `param` in place.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state);

/// Adam over a set of parameters, keyed by parameter id.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates every trainable parameter that has an entry in `grads`.
  void step(std::span<Parameter* const> params, const Gradients& grads);

  double lr() const { return lr_; }
  const AdamState* state(std::uint64_t id) const;

 private:
  double lr_, beta1_, beta2_, eps_;
  std::map<std::uint64_t, AdamState> states_;
};

}  // namespace cdl
