#include "cdl/distillation.hpp"

#include <cmath>

#include "cdl/error.hpp"

namespace cdl {

std::string to_string(DistillMethod m) {
  switch (m) {
    case DistillMethod::None: return "none";
    case DistillMethod::KD: return "kd";
    case DistillMethod::DKD: return "dkd";
    case DistillMethod::FitNets: return "fitnets";
    case DistillMethod::ReviewKD: return "reviewkd";
    case DistillMethod::DeiT: return "deit";
    case DistillMethod::KDP: return "kdp";
  }
  return "?";
}

DistillMethod parse_distill_method(const std::string& s) {
  for (DistillMethod m : {DistillMethod::None, DistillMethod::KD, DistillMethod::DKD, DistillMethod::FitNets,
                          DistillMethod::ReviewKD, DistillMethod::DeiT, DistillMethod::KDP})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown distillation method '" + s + "' (expected none, kd, dkd, fitnets, reviewkd, deit or kdp)");
}

std::string to_string(ClassScope s) { return s == ClassScope::CurrentTask ? "current-task" : "all-seen"; }

ClassScope parse_class_scope(const std::string& s) {
  if (s == "current-task") return ClassScope::CurrentTask;
  if (s == "all-seen") return ClassScope::AllSeen;
  throw ConfigError("unknown class scope '" + s + "' (expected current-task or all-seen)");
}

bool DistillConfig::uses_kd_token() const {
  return method == DistillMethod::DeiT || (method == DistillMethod::KDP && kd_classifier);
}

void DistillConfig::validate(int student_blocks) const {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (kd_prompt_length <= 0 || kd_prompt_length % 2) throw ConfigError("kd_prompt_length must be positive and even");
  if (kd_prompt_depth < -1 || kd_prompt_depth > student_blocks)
    throw ConfigError("kd_prompt_depth must be in 0.." + std::to_string(student_blocks) + " (or -1 for all)");
}

Var kd_loss(Var student_logits, Var teacher_logits, double tau) {
  CDL_REQUIRE(tau > 0.0, "kd_loss: temperature must be positive");
  return scale(kl_divergence(teacher_logits, student_logits, tau), tau * tau);
}

DkdTerms dkd_loss(Var student_logits, Var teacher_logits, int target, double tau) {
  CDL_REQUIRE(tau > 0.0, "dkd_loss: temperature must be positive");
  const Tensor zt = teacher_logits.value();
  const int c = zt.cols();
  CDL_REQUIRE(c >= 2, "dkd_loss needs at least two classes");
  CDL_REQUIRE(student_logits.value().cols() == c && zt.rows() == 1, "dkd_loss: logit shape mismatch");
  CDL_REQUIRE(0 <= target && target < c, "dkd_loss: target out of range");

  auto others = [&](Var z) {
    std::vector<Var> parts;
    if (target > 0) parts.push_back(slice_cols(z, 0, target));
    if (target < c - 1) parts.push_back(slice_cols(z, target + 1, c));
    return parts.size() == 1 ? parts[0] : concat_cols(parts);
  };
  Var log_p_s = log_softmax(student_logits, tau);
  Var log_hat_s = log_softmax(others(student_logits), tau);
  // log p_{\t} = log p_i - log p̂_i for any non-target i.
  const int probe = target == 0 ? 1 : 0;
  Var log_ps_t = slice_cols(log_p_s, target, target + 1);
  Var log_ps_rest = sub(slice_cols(log_p_s, probe, probe + 1), slice_cols(log_hat_s, 0, 1));

  Tape& tape = *student_logits.tape;
  Tape scratch;
  const Tensor log_p_t = log_softmax(scratch.constant(zt), tau).value();
  const Tensor log_hat_t = log_softmax(others(scratch.constant(zt)), tau).value();
  const double lt_t = log_p_t[target];
  const double lt_rest = log_p_t[probe] - log_hat_t[0];
  const double pt_t = std::exp(lt_t), pt_rest = std::exp(lt_rest);

  // TCKD = p_t (log p_t^T - log p_t^S) + p_\t (log p_\t^T - log p_\t^S)
  Var tckd = add_constant(add(scale(log_ps_t, -pt_t), scale(log_ps_rest, -pt_rest)),
                          pt_t * lt_t + pt_rest * lt_rest);
  tckd = reshape(tckd, {1});

  Tensor hat_t(log_hat_t.shape());
  double ent = 0.0;
  for (std::size_t i = 0; i < hat_t.size(); ++i) {
    hat_t[i] = std::exp(log_hat_t[i]);
    ent += hat_t[i] * log_hat_t[i];
  }
  Var cross = sum(mul(tape.constant(std::move(hat_t)), log_hat_s));
  Var nckd = scale(add_constant(scale(cross, -1.0), ent), pt_rest);
  return {tckd, nckd};
}

FeatureMapping FeatureMapping::init(int student_dim, int teacher_dim, SeededRng rng, const std::string& name) {
  const double limit = std::sqrt(6.0 / (student_dim + teacher_dim));
  Tensor w({student_dim, teacher_dim});
  for (double& v : w.values()) v = rng.uniform(-limit, limit);
  return {Parameter(name + ".weight", std::move(w)), Parameter(name + ".bias", Tensor({teacher_dim}))};
}

Var FeatureMapping::apply(Tape& tape, Var features) const {
  CDL_REQUIRE(features.value().cols() == weight.value.rows(), "feature mapping: input width mismatch");
  return add_row(matmul(features, tape.param(weight)), tape.param(bias));
}

Var fitnets_loss(Tape& tape, Var student_feature, Var teacher_feature, const FeatureMapping& mapping) {
  if (student_feature.value().rows() != teacher_feature.value().rows())
    throw ConfigError("feature distillation needs matching token grids (" +
                      std::to_string(student_feature.value().rows()) + " vs " +
                      std::to_string(teacher_feature.value().rows()) + " tokens)");
  CDL_REQUIRE(mapping.teacher_dim() == teacher_feature.value().cols(), "feature mapping: output width mismatch");
  return mse(teacher_feature, mapping.apply(tape, student_feature));
}

int block_map(int j, int student_blocks, int teacher_blocks) {
  CDL_REQUIRE(1 <= j && j <= student_blocks, "block_map: student block out of range");
  const int m = static_cast<int>(std::lround(static_cast<double>(j) * teacher_blocks / student_blocks));
  return std::clamp(m, 1, teacher_blocks);
}

Var reviewkd_loss(Tape& tape, std::span<const Var> student_features, std::span<const Var> teacher_features,
                  std::span<const FeatureMapping> mappings, std::span<const Var> gates) {
  const int n = static_cast<int>(student_features.size());
  CDL_REQUIRE(n >= 1, "reviewkd_loss needs at least one block");
  CDL_REQUIRE(static_cast<int>(mappings.size()) == n, "reviewkd_loss: one mapping per student block");
  CDL_REQUIRE(static_cast<int>(gates.size()) == n - 1, "reviewkd_loss: one gate per fused block");
  const int nt = static_cast<int>(teacher_features.size());
  CDL_REQUIRE(nt >= 1, "reviewkd_loss: no teacher features");

  Var fused = student_features[n - 1];
  Var total = fitnets_loss(tape, fused, teacher_features[block_map(n, n, nt) - 1], mappings[n - 1]);
  for (int j = n - 1; j >= 1; --j) {
    Var g = sigmoid(gates[j - 1]);
    Var keep = add_constant(scale(g, -1.0), 1.0);
    fused = add(mul_scalar(student_features[j - 1], g), mul_scalar(fused, keep));
    total = add(total, fitnets_loss(tape, fused, teacher_features[block_map(j, n, nt) - 1], mappings[j - 1]));
  }
  return total;
}

std::vector<double> combine_heads_predict(std::span<const double> class_logits, std::span<const double> kd_logits) {
  CDL_REQUIRE(class_logits.size() == kd_logits.size(), "combine_heads_predict: head widths differ");
  auto a = softmax_with_temperature(class_logits, 1.0);
  auto b = softmax_with_temperature(kd_logits, 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (a[i] + b[i]);
  return a;
}

int argmax(std::span<const double> v) {
  CDL_REQUIRE(!v.empty(), "argmax of an empty vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace cdl
