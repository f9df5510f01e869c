#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdl/autodiff.hpp"
#include "cdl/rng.hpp"

namespace cdl {

enum class DistillMethod { None, KD, DKD, FitNets, ReviewKD, DeiT, KDP };

std::string to_string(DistillMethod m);
DistillMethod parse_distill_method(const std::string& s);  // ConfigError on unknown names

// Which classes the logit losses compare: the current task's, or every class
// seen so far.
enum class ClassScope { CurrentTask, AllSeen };

std::string to_string(ClassScope s);
ClassScope parse_class_scope(const std::string& s);

struct DistillConfig {
  DistillMethod method = DistillMethod::None;
  double alpha = 0.5;
  double lambda = 1.0;
  double tau = 2.0;
  int kd_prompt_length = 6;
  int kd_prompt_depth = -1;  // blocks 1..depth get KD prompts; -1 covers every block
  ClassScope scope = ClassScope::CurrentTask;
  // KDP ablation switches: KD prompts, and the KD token + KD classifier.
  bool kd_prompts = true;
  bool kd_classifier = true;

  void validate(int student_blocks) const;
  int prompt_depth(int student_blocks) const { return kd_prompt_depth < 0 ? student_blocks : kd_prompt_depth; }
  bool uses_teacher() const { return method != DistillMethod::None; }
  bool uses_kd_token() const;
  bool uses_kd_prompts() const { return method == DistillMethod::KDP && kd_prompts; }
  bool uses_features() const { return method == DistillMethod::FitNets || method == DistillMethod::ReviewKD; }
  bool operator==(const DistillConfig&) const = default;
};

// τ² Σ p_T log(p_T / p_S) with p = softmax(z / τ).
Var kd_loss(Var student_logits, Var teacher_logits, double tau);

struct DkdTerms {
  Var tckd;
  Var nckd;
};

// Target/non-target decomposition of Σ p_T log(p_T / p_S) (no τ² factor).
DkdTerms dkd_loss(Var student_logits, Var teacher_logits, int target, double tau);

/// Fully-connected map from student feature width to teacher feature width.
struct FeatureMapping {
  Parameter weight;  // [D_s x D_t]
  Parameter bias;    // [D_t]

  static FeatureMapping init(int student_dim, int teacher_dim, SeededRng rng, const std::string& name);
  Var apply(Tape& tape, Var features) const;
  int teacher_dim() const { return weight.value.cols(); }
};

// Mean squared error between the teacher hint and the mapped student feature.
Var fitnets_loss(Tape& tape, Var student_feature, Var teacher_feature, const FeatureMapping& mapping);

// 1-based teacher block compared with student block j.
int block_map(int j, int student_blocks, int teacher_blocks);

// Review loss over student features F_1..F_n. `gates[j]` is the raw gate for
// block j+1 (n-1 of them), squashed with a sigmoid. `mappings` has one entry
// per student block. `teacher_features` holds every teacher block.
Var reviewkd_loss(Tape& tape, std::span<const Var> student_features, std::span<const Var> teacher_features,
                  std::span<const FeatureMapping> mappings, std::span<const Var> gates);

// Average of the two softmax distributions.
std::vector<double> combine_heads_predict(std::span<const double> class_logits, std::span<const double> kd_logits);
// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> v);

}  // namespace cdl
