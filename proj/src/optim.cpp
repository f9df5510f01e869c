#include "cdl/optim.hpp"

#include <cmath>

#include "cdl/error.hpp"

namespace cdl {

void adam_step(Tensor& param, const Tensor& grad, AdamState& s) {
  CDL_REQUIRE(param.shape() == grad.shape(),
              "adam_step: param " + shape_str(param.shape()) + " vs grad " + shape_str(grad.shape()));
  if (s.m.empty()) s.m = Tensor::zeros_like(param);
  if (s.v.empty()) s.v = Tensor::zeros_like(param);
  CDL_REQUIRE(s.m.shape() == param.shape() && s.v.shape() == param.shape(), "adam_step: state shape mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    param[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

void Adam::step(std::span<Parameter* const> params, const Gradients& grads) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    const Tensor* g = grads.find(p->id);
    if (g == nullptr) continue;
    auto [it, inserted] = states_.try_emplace(p->id);
    if (inserted) {
      it->second.lr = lr_;
      it->second.beta1 = beta1_;
      it->second.beta2 = beta2_;
      it->second.eps = eps_;
    }
    adam_step(p->value, *g, it->second);
  }
}

const AdamState* Adam::state(std::uint64_t id) const {
  auto it = states_.find(id);
  return it == states_.end() ? nullptr : &it->second;
}

}  // namespace cdl
