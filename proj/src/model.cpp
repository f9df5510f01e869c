#include "cdl/model.hpp"

#include <cmath>

#include "cdl/error.hpp"

namespace cdl {

std::vector<const Parameter*> CLModel::parameters() const {
  std::vector<const Parameter*> out = backbone.parameters();
  for (const Parameter* p : pool.parameters()) out.push_back(p);
  for (const Parameter* p : head.parameters()) out.push_back(p);
  if (kd_token) out.push_back(&*kd_token);
  if (kd_head)
    for (const Parameter* p : kd_head->parameters()) out.push_back(p);
  for (const Parameter& p : kd_prompts) out.push_back(&p);
  for (const FeatureMapping& f : mappings) out.push_back(&f.weight), out.push_back(&f.bias);
  for (const Parameter& g : gates) out.push_back(&g);
  return out;
}

std::vector<Parameter*> CLModel::parameters() {
  std::vector<Parameter*> out;
  for (const Parameter* p : std::as_const(*this).parameters()) out.push_back(const_cast<Parameter*>(p));
  return out;
}

std::uint64_t CLModel::learner_checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  const std::size_t skip = backbone.parameters().size();
  auto ps = parameters();
  for (std::size_t i = skip; i < ps.size(); ++i) h = cdl::checksum(ps[i]->value, h);
  return h;
}

std::uint64_t CLModel::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter* p : parameters()) h = cdl::checksum(p->value, h);
  return h;
}

CLModel make_model(std::shared_ptr<const BackboneWeights> pretrained, const PoolConfig& pool_cfg,
                   const ModelShape& shape, const DistillConfig& distill, SeededRng rng) {
  CDL_REQUIRE(pretrained != nullptr, "make_model: no pretrained backbone");
  const ViTConfig& vc = pretrained->config;
  pool_cfg.validate(vc.blocks, shape.tasks);
  distill.validate(vc.blocks);
  CDL_REQUIRE(shape.classes_per_task >= 1, "make_model: need at least one class per task");

  CLModel m;
  m.backbone = *pretrained;
  m.backbone.set_frozen(true);
  m.query_backbone = std::move(pretrained);
  m.classes_per_task = shape.classes_per_task;
  m.lambda = shape.lambda;
  m.distill = distill;
  const int classes = shape.tasks * shape.classes_per_task;
  m.pool = PromptPool::init(pool_cfg, vc.dim, vc.dim, shape.tasks, rng.split("pool"));
  m.head = ClassifierHead::init(vc.dim, classes, HeadRole::Student, rng.split("head"), "head.");

  if (distill.uses_kd_token()) {
    Tensor tok = m.backbone.cls_token.value;
    SeededRng r = rng.split("kd_token");
    for (double& v : tok.values()) v += r.normal(0.0, 0.02);
    m.kd_token = Parameter("kd_token", std::move(tok));
    m.kd_head = ClassifierHead::init(vc.dim, classes, HeadRole::Kd, rng.split("kd_head"), "kd_head.");
  }
  if (distill.uses_kd_prompts()) {
    SeededRng r = rng.split("kd_prompts");
    for (int b = 0; b < distill.prompt_depth(vc.blocks); ++b) {
      Tensor t({distill.kd_prompt_length, vc.dim});
      for (double& v : t.values()) v = r.normal(0.0, 0.02);
      m.kd_prompts.emplace_back("kd_prompts." + std::to_string(b), std::move(t));
    }
  }
  if (distill.uses_features()) {
    CDL_REQUIRE(shape.teacher_dim > 0 && shape.teacher_blocks > 0, "feature distillation needs the teacher geometry");
    const int n = distill.method == DistillMethod::FitNets ? 1 : vc.blocks;
    for (int j = 0; j < n; ++j)
      m.mappings.push_back(
          FeatureMapping::init(vc.dim, shape.teacher_dim, rng.split("map").split(j), "map." + std::to_string(j)));
    if (distill.method == DistillMethod::ReviewKD)
      for (int j = 0; j + 1 < vc.blocks; ++j) m.gates.emplace_back("gate." + std::to_string(j), Tensor::scalar(0.0));
  }
  return m;
}

std::vector<double> model_query(const CLModel& m, std::span<const double> image) {
  return query_encode(*m.query_backbone, image);
}

ForwardOut model_forward(Tape& tape, const CLModel& m, std::span<const double> image, std::span<const double> query,
                         int task, bool training, bool collect_features) {
  const int blocks = m.backbone.config.blocks;
  PoolForward pf = apply_pool(tape, m.pool, query, task, training, m.lambda, blocks);
  for (std::size_t b = 0; b < m.kd_prompts.size(); ++b) append_kd_prompt(pf.prefixes[b], tape.param(m.kd_prompts[b]));
  std::optional<Var> token;
  if (m.kd_token) token = tape.param(*m.kd_token);
  Features f = forward_features(tape, m.backbone, image, pf.prefixes, token, collect_features);

  ForwardOut out{classify(tape, f.class_embedding, m.head), std::nullopt, std::move(f.block_features), pf.loss};
  if (m.kd_head) out.kd_logits = classify(tape, *f.kd_embedding, *m.kd_head);
  return out;
}

TeacherTargets teacher_targets(const CLModel& teacher, std::span<const double> image, std::span<const double> query,
                               int task, bool with_features) {
  Tape tape;
  // The teacher knows the task it was just trained on, as at training time.
  ForwardOut out = model_forward(tape, teacher, image, query, task, true, with_features);
  TeacherTargets t{out.class_logits.value(), {}};
  for (const Var& v : out.features) t.features.push_back(v.value());
  return t;
}

LossParts student_loss(Tape& tape, const CLModel& m, const ForwardOut& out, int label, int task,
                       const TeacherTargets* targets) {
  const DistillConfig& dc = m.distill;
  const auto [lo, hi] = m.task_classes(task);
  CDL_REQUIRE(lo <= label && label < hi, "student_loss: label outside the current task");
  if (dc.uses_teacher()) CDL_REQUIRE(targets != nullptr, "student_loss: missing teacher snapshot targets");

  ClassMask mask = ClassMask::range(m.classes(), lo, hi);
  Tensor offset({1, m.classes()});
  for (int i = 0; i < m.classes(); ++i) offset[i] = mask.active[i] ? 0.0 : kMaskedLogit;
  Var ce = cross_entropy(add(out.class_logits, tape.constant(offset)), label);

  LossParts parts;
  parts.classification = ce.item();
  const int scope_lo = dc.scope == ClassScope::CurrentTask ? lo : 0;
  auto scoped = [&](Var logits) { return slice_cols(logits, scope_lo, hi); };
  auto teacher_scoped = [&] { return slice_cols(tape.constant(targets->logits), scope_lo, hi); };

  std::optional<Var> distill;
  double ce_weight = 1.0;
  switch (dc.method) {
    case DistillMethod::None:
      break;
    case DistillMethod::KD:
      ce_weight = 1.0 - dc.alpha;
      distill = kd_loss(scoped(out.class_logits), teacher_scoped(), dc.tau);
      break;
    case DistillMethod::DKD: {
      ce_weight = 1.0 - dc.alpha;
      auto terms = dkd_loss(scoped(out.class_logits), teacher_scoped(), label - scope_lo, dc.tau);
      distill = add(terms.tckd, terms.nckd);
      break;
    }
    case DistillMethod::FitNets: {
      CDL_REQUIRE(!out.features.empty() && !targets->features.empty(), "FitNets needs block features");
      distill = fitnets_loss(tape, out.features.back(), tape.constant(targets->features.back()), m.mappings[0]);
      break;
    }
    case DistillMethod::ReviewKD: {
      std::vector<Var> tf, gs;
      for (const Tensor& t : targets->features) tf.push_back(tape.constant(t));
      for (const Parameter& g : m.gates) gs.push_back(tape.param(g));
      distill = reviewkd_loss(tape, out.features, tf, m.mappings, gs);
      break;
    }
    case DistillMethod::DeiT:
    case DistillMethod::KDP:
      ce_weight = 1.0 - dc.alpha;
      // Without the KD classifier the teacher signal goes to the class head.
      distill = kd_loss(scoped(out.kd_logits ? *out.kd_logits : out.class_logits), teacher_scoped(), dc.tau);
      break;
  }

  Var total = scale(ce, ce_weight);
  if (distill) {
    parts.distillation = distill->item();
    total = add(total, scale(*distill, dc.alpha));
  }
  if (out.pool_loss) {
    parts.pool = out.pool_loss->item();
    total = add(total, *out.pool_loss);
  }
  parts.total = total;
  return parts;
}

LossParts kdp_student_loss(Tape& tape, const CLModel& student, std::span<const double> image,
                           std::span<const double> query, int label, int task, const TeacherTargets* targets) {
  ForwardOut out = model_forward(tape, student, image, query, task, true, student.distill.uses_features());
  return student_loss(tape, student, out, label, task, targets);
}

int predict(const CLModel& m, std::span<const double> image, std::span<const double> query, int task) {
  Tape tape;
  ForwardOut out = model_forward(tape, m, image, query, task, false);
  const int seen = m.task_classes(task).second;
  std::span<const double> cls = out.class_logits.value().span().first(seen);
  if (!out.kd_logits) return argmax(cls);
  return argmax(combine_heads_predict(cls, out.kd_logits->value().span().first(seen)));
}

}  // namespace cdl
