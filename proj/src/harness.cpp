#include "cdl/harness.hpp"

#include <chrono>
#include <exception>
#include <numeric>

#include "cdl/error.hpp"
#include "cdl/optim.hpp"

namespace cdl {

namespace {

struct SampleResult {
  double loss = 0.0;
  Gradients grads;
  std::exception_ptr error;
};

// Per-sample tapes run in parallel; gradients are reduced in sample order so
// the step does not depend on the thread count.
template <class LossOf>
double batch_step(std::span<const int> batch, LossOf&& loss_of, std::span<Parameter* const> params, Adam& opt) {
  const int n = static_cast<int>(batch.size());
  std::vector<SampleResult> out(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    try {
      Tape tape;
      Var loss = loss_of(tape, batch[i]);
      out[i].loss = loss.item();
      out[i].grads = tape.grad(loss);
    } catch (...) {
      out[i].error = std::current_exception();
    }
  }
  Gradients total;
  double loss = 0.0;
  for (SampleResult& r : out) {
    if (r.error) std::rethrow_exception(r.error);
    total.merge(r.grads);
    loss += r.loss;
  }
  total.scale(1.0 / n);
  opt.step(params, total);
  return loss / n;
}

template <class Body>
void parallel_for(int n, Body&& body) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<int> iota(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void RunConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
}

void RehearsalAudit::open_task(int task, std::span<const int> allowed) {
  CDL_REQUIRE(task >= 0, "task index must be non-negative");
  open_ = task;
  allowed_.assign(train_->size(), false);
  for (int i : allowed) {
    CDL_REQUIRE(0 <= i && i < static_cast<int>(train_->size()), "audit: sample index out of range");
    allowed_[i] = true;
  }
  if (static_cast<int>(reads_.size()) <= task) reads_.resize(task + 1, 0);
}

RehearsalAudit::Sample RehearsalAudit::read(int index) {
  if (open_ < 0 || index < 0 || index >= static_cast<int>(allowed_.size()) || !allowed_[index]) {
    ++violations_;
    throw RehearsalAuditError("training read of sample " + std::to_string(index) + " outside task " +
                              std::to_string(open_));
  }
  ++reads_[open_];
  return {train_->image(index), train_->labels[index]};
}

long RehearsalAudit::total_reads() const { return std::accumulate(reads_.begin(), reads_.end(), 0L); }

PretrainResult pretrain_backbone(const ViTConfig& config, const Dataset& data, const TaskStream& stream, int epochs,
                                 std::uint64_t seed, int batch_size, double lr) {
  const int k = data.train.pretrain_class_count;
  for (std::size_t t = 0; t < stream.tasks.size(); ++t)
    for (int c : stream.tasks[t].classes)
      if (c < k)
        throw ConfigError("class " + std::to_string(c) + " is in both the pretraining block and task " +
                          std::to_string(t));
  if (epochs < 0) throw ConfigError("pretraining epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs > 0 && k == 0) throw ConfigError("dataset has no pretraining classes");
  config.validate();
  CDL_REQUIRE(config.channels == data.train.channels && config.image_size == data.train.height &&
                  config.image_size == data.train.width,
              "backbone geometry does not match the dataset images");

  SeededRng rng = SeededRng(seed).split("pretrain");
  PretrainResult r{BackboneWeights::init(config, rng.split("init")), 0.0, 0.0, {}};
  BackboneWeights& w = r.backbone;
  w.set_frozen(false);
  ClassifierHead head = ClassifierHead::init(config.dim, std::max(k, 1), HeadRole::Pretrain, rng.split("head"), "pretrain.");

  auto collect = [k](const DataSplit& s) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.labels[i] < k) idx.push_back(static_cast<int>(i));
    return idx;
  };
  const std::vector<int> train_idx = collect(data.train), test_idx = collect(data.test);
  std::vector<std::vector<double>> images(train_idx.size());
  for (std::size_t i = 0; i < train_idx.size(); ++i) images[i] = data.train.image(train_idx[i]);

  std::vector<Parameter*> params = w.parameters();
  for (Parameter* p : head.parameters()) params.push_back(p);
  Adam opt(lr);
  auto loss_of = [&](Tape& tape, int i) {
    Features f = forward_features(tape, w, images[i], {});
    return cross_entropy(classify(tape, f.class_embedding, head), data.train.labels[train_idx[i]]);
  };
  for (int e = 0; e < epochs; ++e) {
    std::vector<int> order = iota(static_cast<int>(images.size()));
    rng.split("order").split(static_cast<std::uint64_t>(e)).shuffle(order);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      const std::size_t end = std::min(order.size(), b + batch_size);
      sum += batch_step(std::span<const int>(order).subspan(b, end - b), loss_of, params, opt);
      ++batches;
    }
    r.epoch_losses.push_back(batches ? sum / batches : 0.0);
  }

  auto accuracy = [&](const DataSplit& s, const std::vector<int>& idx) {
    if (idx.empty()) return 0.0;
    std::vector<int> hit(idx.size(), 0);
    parallel_for(static_cast<int>(idx.size()), [&](int i) {
      Tape tape;
      Features f = forward_features(tape, w, s.image(idx[i]), {});
      hit[i] = argmax(classify(tape, f.class_embedding, head).value().span()) == s.labels[idx[i]];
    });
    return 100.0 * std::accumulate(hit.begin(), hit.end(), 0) / static_cast<double>(idx.size());
  };
  r.train_accuracy = accuracy(data.train, train_idx);
  r.test_accuracy = accuracy(data.test, test_idx);
  w.set_frozen(true);
  return r;
}

TaskLog train_task(CLModel& model, RehearsalAudit& audit, const TaskStream& stream, int t, const RunConfig& cfg,
                   const CLModel* teacher) {
  cfg.validate();
  CDL_REQUIRE(0 <= t && t < stream.size(), "train_task: task index out of range");
  if (model.distill.uses_teacher() != (teacher != nullptr))
    throw ContractViolation(model.distill.uses_teacher() ? "train_task: distillation needs a teacher snapshot"
                                                          : "train_task: teacher given to a non-distilling model");
  if (!cfg.unfreeze_last_block && !model.backbone.frozen)
    throw ContractViolation("train_task: backbone must be frozen outside the unfreeze ablation");

  const Task& task = stream.tasks[t];
  const int n = static_cast<int>(task.train.size());
  std::vector<std::vector<double>> images(n);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    RehearsalAudit::Sample s = audit.read(task.train[i]);
    images[i] = std::move(s.image);
    labels[i] = stream.model_label[s.label];
  }

  std::vector<std::vector<double>> queries(n);
  parallel_for(n, [&](int i) { queries[i] = model_query(model, images[i]); });
  std::vector<TeacherTargets> targets;
  if (teacher) {
    targets.resize(n);
    const bool features = model.distill.uses_features();
    parallel_for(n, [&](int i) {
      targets[i] = teacher_targets(*teacher, images[i], model_query(*teacher, images[i]), t, features);
    });
  }

  model.pool.begin_task(t);
  // Fresh optimizer state per task: old-task parameters get no momentum.
  Adam opt(cfg.lr);
  std::vector<Parameter*> params = model.parameters();
  auto loss_of = [&](Tape& tape, int i) {
    return kdp_student_loss(tape, model, images[i], queries[i], labels[i], t, teacher ? &targets[i] : nullptr).total;
  };

  TaskLog log;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<int> order = iota(n);
    SeededRng(cfg.seed).split("order").split(static_cast<std::uint64_t>(t)).split(static_cast<std::uint64_t>(e)).shuffle(order);
    double sum = 0.0;
    int batches = 0;
    for (int b = 0; b < n; b += cfg.batch_size) {
      const int len = std::min(n, b + cfg.batch_size) - b;
      sum += batch_step(std::span<const int>(order).subspan(b, len), loss_of, params, opt);
      ++batches;
    }
    log.epoch_losses.push_back(batches ? sum / batches : 0.0);
  }
  return log;
}

std::vector<double> evaluate(const CLModel& model, const DataSplit& test, const TaskStream& stream, int t) {
  CDL_REQUIRE(0 <= t && t < stream.size(), "evaluate: task index out of range");
  std::vector<double> acc;
  for (int j = 0; j <= t; ++j) {
    const std::vector<int>& idx = stream.tasks[j].test;
    CDL_REQUIRE(!idx.empty(), "evaluate: task " + std::to_string(j) + " has no test samples");
    std::vector<int> hit(idx.size(), 0);
    parallel_for(static_cast<int>(idx.size()), [&](int i) {
      const std::vector<double> img = test.image(idx[i]);
      hit[i] = predict(model, img, model_query(model, img), t) == stream.model_label[test.labels[idx[i]]];
    });
    acc.push_back(100.0 * std::accumulate(hit.begin(), hit.end(), 0) / static_cast<double>(idx.size()));
  }
  return acc;
}

ModelShape model_shape(const TaskStream& stream, const RunConfig& cfg, const ViTConfig* teacher) {
  ModelShape s;
  s.tasks = stream.size();
  s.classes_per_task = stream.classes_per_task();
  s.lambda = cfg.distill.lambda;
  if (teacher) {
    s.teacher_dim = teacher->dim;
    s.teacher_blocks = teacher->blocks;
  }
  return s;
}

TeacherTrajectory train_teacher(const Dataset& data, const TaskStream& stream,
                                std::shared_ptr<const BackboneWeights> pretrained, const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TeacherTrajectory tr;
  tr.backbone_before = pretrained->checksum();
  CLModel teacher = make_model(pretrained, cfg.teacher_pool, model_shape(stream, cfg), DistillConfig{},
                               SeededRng(cfg.seed).split("teacher"));
  RehearsalAudit audit(data.train);
  tr.results = ResultMatrix(stream.size());
  for (int t = 0; t < stream.size(); ++t) {
    audit.open_task(t, stream.tasks[t].train);
    train_task(teacher, audit, stream, t, cfg);
    audit.close_task();
    const auto acc = evaluate(teacher, data.test, stream, t);
    for (int j = 0; j <= t; ++j) tr.results.set(t, j, acc[j]);
    tr.snapshots.push_back(teacher);
  }
  tr.backbone_after = teacher.backbone.checksum();
  tr.audit_reads = audit.total_reads();
  tr.audit_violations = audit.violations();
  tr.report = make_report(tr.results, cfg.seed, seconds_since(t0));
  return tr;
}

bool RunAudit::teacher_stable() const {
  for (const auto& [before, after] : teacher_snapshot)
    if (before != after) return false;
  return true;
}

RunResult cdl_run(const Dataset& data, const TaskStream& stream, const TeacherTrajectory& teacher,
                  std::shared_ptr<const BackboneWeights> student_pretrained, const RunConfig& cfg) {
  cfg.validate();
  CDL_REQUIRE(static_cast<int>(teacher.snapshots.size()) == stream.size(),
              "teacher trajectory does not cover every task of the stream");
  const auto t0 = std::chrono::steady_clock::now();
  const ViTConfig& tc = teacher.snapshots.front().backbone.config;
  CLModel student = make_model(student_pretrained, cfg.student_pool, model_shape(stream, cfg, &tc), cfg.distill,
                               SeededRng(cfg.seed).split("student"));
  if (cfg.unfreeze_last_block) student.backbone.unfreeze_last_block();

  RunResult r;
  r.teacher = teacher.results;
  r.teacher_report = teacher.report;
  r.student = ResultMatrix(stream.size());
  r.audit.student_backbone_before = student.backbone.checksum();
  r.audit.teacher_backbone_before = teacher.backbone_before;
  r.audit.teacher_backbone_after = teacher.backbone_after;
  r.audit.teacher_reads = teacher.audit_reads;

  RehearsalAudit audit(data.train);
  const bool distilling = cfg.distill.uses_teacher();
  for (int t = 0; t < stream.size(); ++t) {
    const CLModel& snap = teacher.snapshots[t];
    const std::uint64_t before = snap.checksum();
    audit.open_task(t, stream.tasks[t].train);
    r.student_logs.push_back(train_task(student, audit, stream, t, cfg, distilling ? &snap : nullptr));
    audit.close_task();
    r.audit.teacher_snapshot.emplace_back(before, snap.checksum());
    const auto acc = evaluate(student, data.test, stream, t);
    for (int j = 0; j <= t; ++j) r.student.set(t, j, acc[j]);
  }

  r.audit.student_backbone_after = student.backbone.checksum();
  FreezeAudit fa = assert_frozen(*student_pretrained, student.backbone, cfg.unfreeze_last_block);
  r.audit.backbone_discipline = fa.pass && teacher.backbone_before == teacher.backbone_after;
  r.audit.backbone_changes = fa.changed;
  r.audit.student_reads = audit.total_reads();
  r.audit.out_of_task_reads = audit.violations() + teacher.audit_violations;
  r.student_report = make_report(r.student, cfg.seed, seconds_since(t0));
  return r;
}

RunResult cdl_run(const Dataset& data, const TaskStream& stream, std::shared_ptr<const BackboneWeights> teacher_pretrained,
                  std::shared_ptr<const BackboneWeights> student_pretrained, const RunConfig& cfg) {
  const TeacherTrajectory tr = train_teacher(data, stream, std::move(teacher_pretrained), cfg);
  return cdl_run(data, stream, tr, std::move(student_pretrained), cfg);
}

}  // namespace cdl
