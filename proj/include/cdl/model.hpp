#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "cdl/distillation.hpp"
#include "cdl/prompt_pool.hpp"
#include "cdl/vit.hpp"

namespace cdl {

/// A prompt-based continual learner: backbone, CL prompt pool, classifier,
/// and (for students) the distillation extras. The query function is a
/// frozen snapshot of the pretrained backbone.
struct CLModel {
  BackboneWeights backbone;
  std::shared_ptr<const BackboneWeights> query_backbone;
  PromptPool pool;
  ClassifierHead head;
  int classes_per_task = 1;
  double lambda = 1.0;

  DistillConfig distill;
  std::optional<Parameter> kd_token;      // [1 x D]
  std::optional<ClassifierHead> kd_head;
  std::vector<Parameter> kd_prompts;      // one [L x D] prompt per covered block
  std::vector<FeatureMapping> mappings;   // FitNets: last block; ReviewKD: one per block
  std::vector<Parameter> gates;           // ReviewKD fusion gates, raw (pre-sigmoid)

  int tasks() const { return pool.tasks; }
  int classes() const { return head.classes(); }
  // Class range [begin, end) of task t.
  std::pair<int, int> task_classes(int t) const { return {t * classes_per_task, (t + 1) * classes_per_task}; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  // Everything except the backbone.
  std::uint64_t learner_checksum() const;
  std::uint64_t checksum() const;
};

struct ModelShape {
  int tasks = 5;
  int classes_per_task = 4;
  double lambda = 1.0;
  // Teacher geometry, needed to size feature mappings.
  int teacher_dim = 0;
  int teacher_blocks = 0;
};

CLModel make_model(std::shared_ptr<const BackboneWeights> pretrained, const PoolConfig& pool, const ModelShape& shape,
                   const DistillConfig& distill, SeededRng rng);

std::vector<double> model_query(const CLModel& m, std::span<const double> image);

struct ForwardOut {
  Var class_logits;               // [1 x C], unmasked
  std::optional<Var> kd_logits;   // KD classifier on the KD token
  std::vector<Var> features;      // per block, when requested
  std::optional<Var> pool_loss;   // λ-weighted, training only
};

ForwardOut model_forward(Tape& tape, const CLModel& m, std::span<const double> image, std::span<const double> query,
                         int task, bool training, bool collect_features = false);

/// What the frozen teacher contributes for one training sample.
struct TeacherTargets {
  Tensor logits;                  // [1 x C]
  std::vector<Tensor> features;   // per teacher block, when feature methods need them
};

TeacherTargets teacher_targets(const CLModel& teacher, std::span<const double> image, std::span<const double> query,
                               int task, bool with_features);

struct LossParts {
  Var total;
  double classification = 0.0;
  double distillation = 0.0;
  double pool = 0.0;
};

// Per-method student objective for one sample with global label `label`
// (which must belong to `task`). `targets` is required iff the model's
// method uses a teacher.
LossParts student_loss(Tape& tape, const CLModel& m, const ForwardOut& out, int label, int task,
                       const TeacherTargets* targets);

// Forward plus objective in one call.
LossParts kdp_student_loss(Tape& tape, const CLModel& student, std::span<const double> image,
                           std::span<const double> query, int label, int task, const TeacherTargets* targets);

// Predicted class among classes seen through `task` (evaluation mode).
int predict(const CLModel& m, std::span<const double> image, std::span<const double> query, int task);

}  // namespace cdl
