#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cdl/dataset.hpp"
#include "cdl/metrics.hpp"
#include "cdl/model.hpp"

namespace cdl {

struct RunConfig {
  std::uint64_t seed = 0;
  int epochs = 5;
  int batch_size = 32;
  double lr = 1e-3;
  PoolConfig student_pool;
  PoolConfig teacher_pool;
  DistillConfig distill;
  bool unfreeze_last_block = false;

  void validate() const;
};

/// Gatekeeper for training reads. Only samples of the open task may be read;
/// anything else is counted and refused.
class RehearsalAudit {
 public:
  explicit RehearsalAudit(const DataSplit& train) : train_(&train) {}

  struct Sample {
    std::vector<double> image;
    int label;  // dataset label
  };

  void open_task(int task, std::span<const int> allowed);
  void close_task() { open_ = -1; }
  Sample read(int index);

  int open() const { return open_; }
  long reads(int task) const { return task < static_cast<int>(reads_.size()) ? reads_[task] : 0; }
  long total_reads() const;
  long violations() const { return violations_; }

 private:
  const DataSplit* train_;
  int open_ = -1;
  std::vector<bool> allowed_;
  std::vector<long> reads_;
  long violations_ = 0;
};

struct PretrainResult {
  BackboneWeights backbone;  // frozen
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

// Trains backbone plus a throwaway head with plain CE on the pretraining
// class block, then freezes. Stream classes must not overlap that block.
PretrainResult pretrain_backbone(const ViTConfig& config, const Dataset& data, const TaskStream& stream, int epochs,
                                 std::uint64_t seed, int batch_size = 32, double lr = 1e-3);

struct TaskLog {
  std::vector<double> epoch_losses;  // mean total loss per epoch
};

// One task of training through the audit. `teacher` is the frozen snapshot
// and must be given iff the model's method uses one.
TaskLog train_task(CLModel& model, RehearsalAudit& audit, const TaskStream& stream, int task, const RunConfig& cfg,
                   const CLModel* teacher = nullptr);

// Accuracy (percent) on each seen task's test set after training `task`.
std::vector<double> evaluate(const CLModel& model, const DataSplit& test, const TaskStream& stream, int task);

ModelShape model_shape(const TaskStream& stream, const RunConfig& cfg, const ViTConfig* teacher = nullptr);

struct TeacherTrajectory {
  std::vector<CLModel> snapshots;  // after each task
  ResultMatrix results;
  MetricsReport report;
  std::uint64_t backbone_before = 0;
  std::uint64_t backbone_after = 0;
  long audit_reads = 0;
  long audit_violations = 0;
};

TeacherTrajectory train_teacher(const Dataset& data, const TaskStream& stream,
                                std::shared_ptr<const BackboneWeights> pretrained, const RunConfig& cfg);

struct RunAudit {
  std::uint64_t student_backbone_before = 0;
  std::uint64_t student_backbone_after = 0;
  std::uint64_t teacher_backbone_before = 0;
  std::uint64_t teacher_backbone_after = 0;
  // Teacher snapshot checksum before and after each student phase.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> teacher_snapshot;
  std::vector<std::string> backbone_changes;  // arrays that moved, if any
  bool backbone_discipline = true;            // frozen, or only the last block moved when unfrozen
  long student_reads = 0;
  long teacher_reads = 0;
  long out_of_task_reads = 0;

  bool teacher_stable() const;
};

struct RunResult {
  ResultMatrix student;
  ResultMatrix teacher;
  MetricsReport student_report;
  MetricsReport teacher_report;
  RunAudit audit;
  std::vector<TaskLog> student_logs;
};

// Teacher first, then the student, for every task. The teacher does not
// depend on the student, so a trajectory computed once per seed can be reused
// across student methods.
RunResult cdl_run(const Dataset& data, const TaskStream& stream, const TeacherTrajectory& teacher,
                  std::shared_ptr<const BackboneWeights> student_pretrained, const RunConfig& cfg);
RunResult cdl_run(const Dataset& data, const TaskStream& stream, std::shared_ptr<const BackboneWeights> teacher_pretrained,
                  std::shared_ptr<const BackboneWeights> student_pretrained, const RunConfig& cfg);

}  // namespace cdl
