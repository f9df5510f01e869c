#include "cdl/gradcheck_suite.hpp"

#include <memory>

#include "cdl/model.hpp"

namespace cdl {

namespace {

Tensor random_tensor(SeededRng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Scalarizes with fixed random weights so every output coordinate matters.
Var project(Tape& t, Var x) {
  Tensor w(x.shape());
  SeededRng r(99);
  for (double& v : w.values()) v = r.uniform(-1.0, 1.0);
  return sum(mul(x, t.constant(w)));
}

struct Operands {
  SeededRng rng{42};
  Parameter a{"a", random_tensor(rng, {3, 4})};
  Parameter b{"b", random_tensor(rng, {4, 5})};
  Parameter c{"c", random_tensor(rng, {3, 4})};
  Parameter bt{"bt", random_tensor(rng, {5, 4})};
  Parameter bias{"bias", random_tensor(rng, {4})};
  Parameter gamma{"gamma", random_tensor(rng, {4})};
  Parameter beta{"beta", random_tensor(rng, {4})};
  Parameter pos{"pos", random_tensor(rng, {3, 4}, 0.5, 2.0)};
  Parameter v1{"v1", random_tensor(rng, {6})};
  Parameter v2{"v2", random_tensor(rng, {6})};
  Parameter s{"s", random_tensor(rng, {1})};
};

ViTConfig composite_vit(int dim, int blocks) {
  ViTConfig c;
  c.image_size = 4;
  c.channels = 2;
  c.patch = 2;  // 4 patch tokens
  c.dim = dim;
  c.heads = 2;
  c.blocks = blocks;
  c.mlp_ratio = 2;
  return c;
}

std::shared_ptr<const BackboneWeights> jittered_backbone(const ViTConfig& c, std::uint64_t seed) {
  auto w = BackboneWeights::init(c, SeededRng(seed));
  SeededRng rng(seed + 1);
  for (Parameter* p : w.parameters())
    for (double& v : p->value.values()) v += rng.normal(0.0, 0.05);
  w.set_frozen(true);
  return std::make_shared<const BackboneWeights>(std::move(w));
}

// Student/teacher pair on a 2-block ViT with a CODA pool.
struct CompositeFixture {
  std::shared_ptr<const BackboneWeights> student_bb = jittered_backbone(composite_vit(4, 2), 20);
  std::shared_ptr<const BackboneWeights> teacher_bb = jittered_backbone(composite_vit(6, 3), 21);
  ModelShape shape{.tasks = 3, .classes_per_task = 2, .lambda = 1.0, .teacher_dim = 6, .teacher_blocks = 3};
  PoolConfig pool = [] {
    PoolConfig p = PoolConfig::desk(PoolMethod::CODA, 2, 3);
    p.length = 2;
    return p;
  }();
  std::vector<double> image;
  TeacherTargets targets;

  CompositeFixture() {
    SeededRng rng(23);
    image.resize(2 * 4 * 4);
    for (double& v : image) v = rng.uniform();
    CLModel teacher = make_model(teacher_bb, PoolConfig::desk(PoolMethod::CODA, 3, 3), shape, {}, SeededRng(22));
    targets = teacher_targets(teacher, image, model_query(teacher, image), 1, true);
  }

  CLModel student(DistillMethod m, std::uint64_t seed = 25) const {
    DistillConfig dc;
    dc.method = m;
    dc.kd_prompt_length = 2;
    CLModel s = make_model(student_bb, pool, shape, dc, SeededRng(seed));
    s.pool.begin_task(1);
    return s;
  }
};

GradCheckCase primitive(std::string name, std::shared_ptr<Operands> ops, std::function<Var(Tape&, Operands&)> f,
                        std::function<std::vector<Parameter*>(Operands&)> params) {
  return {std::move(name), "primitive", 1e-5, [=] {
            auto ps = params(*ops);
            return finite_difference_check([&](Tape& t) { return f(t, *ops); }, ps, {.eps = 1e-5});
          }};
}

GradCheckCase loss(std::string name, double tol, std::function<GradCheckResult()> run) {
  return {std::move(name), "loss", tol, std::move(run)};
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite() {
  auto ops = std::make_shared<Operands>();
  using P = std::vector<Parameter*>;
  std::vector<GradCheckCase> cases;
  auto add_case = [&](std::string name, std::function<Var(Tape&, Operands&)> f,
                      std::function<P(Operands&)> params) { cases.push_back(primitive(std::move(name), ops, f, params)); };

  add_case("matmul", [](Tape& t, Operands& o) { return project(t, matmul(t.param(o.a), t.param(o.b))); },
           [](Operands& o) { return P{&o.a, &o.b}; });
  add_case("matmul_nt", [](Tape& t, Operands& o) { return project(t, matmul_nt(t.param(o.a), t.param(o.bt))); },
           [](Operands& o) { return P{&o.a, &o.bt}; });
  add_case("add", [](Tape& t, Operands& o) { return project(t, add(t.param(o.a), t.param(o.c))); },
           [](Operands& o) { return P{&o.a, &o.c}; });
  add_case("add_row", [](Tape& t, Operands& o) { return project(t, add_row(t.param(o.a), t.param(o.bias))); },
           [](Operands& o) { return P{&o.a, &o.bias}; });
  add_case("sub", [](Tape& t, Operands& o) { return project(t, sub(t.param(o.a), t.param(o.c))); },
           [](Operands& o) { return P{&o.a, &o.c}; });
  add_case("mul", [](Tape& t, Operands& o) { return project(t, mul(t.param(o.a), t.param(o.c))); },
           [](Operands& o) { return P{&o.a, &o.c}; });
  add_case("scale", [](Tape& t, Operands& o) { return project(t, scale(t.param(o.a), -1.7)); },
           [](Operands& o) { return P{&o.a}; });
  add_case("mul_scalar", [](Tape& t, Operands& o) { return project(t, mul_scalar(t.param(o.a), t.param(o.s))); },
           [](Operands& o) { return P{&o.a, &o.s}; });
  add_case("add_constant", [](Tape& t, Operands& o) { return project(t, add_constant(t.param(o.a), 0.3)); },
           [](Operands& o) { return P{&o.a}; });
  add_case("sum", [](Tape& t, Operands& o) { return sum(mul(t.param(o.a), t.param(o.c))); },
           [](Operands& o) { return P{&o.a, &o.c}; });
  add_case("mean", [](Tape& t, Operands& o) { return mean(mul(t.param(o.a), t.param(o.c))); },
           [](Operands& o) { return P{&o.a, &o.c}; });
  add_case("log", [](Tape& t, Operands& o) { return project(t, log(t.param(o.pos))); },
           [](Operands& o) { return P{&o.pos}; });
  add_case("sqrt", [](Tape& t, Operands& o) { return project(t, sqrt(t.param(o.pos))); },
           [](Operands& o) { return P{&o.pos}; });
  add_case("sigmoid", [](Tape& t, Operands& o) { return project(t, sigmoid(t.param(o.a))); },
           [](Operands& o) { return P{&o.a}; });
  add_case("gelu", [](Tape& t, Operands& o) { return project(t, gelu(t.param(o.a))); },
           [](Operands& o) { return P{&o.a}; });
  add_case("layer_norm",
           [](Tape& t, Operands& o) { return project(t, layer_norm(t.param(o.a), t.param(o.gamma), t.param(o.beta))); },
           [](Operands& o) { return P{&o.a, &o.gamma, &o.beta}; });
  add_case("softmax", [](Tape& t, Operands& o) { return project(t, softmax(t.param(o.a), 1.7)); },
           [](Operands& o) { return P{&o.a}; });
  add_case("log_softmax", [](Tape& t, Operands& o) { return project(t, log_softmax(t.param(o.a), 0.8)); },
           [](Operands& o) { return P{&o.a}; });
  add_case("concat_rows/slice_rows",
           [](Tape& t, Operands& o) {
             Var x = t.param(o.a);
             return project(t, concat_rows({slice_rows(x, 1, 3), slice_rows(x, 0, 1)}));
           },
           [](Operands& o) { return P{&o.a}; });
  add_case("concat_cols/slice_cols",
           [](Tape& t, Operands& o) {
             Var x = t.param(o.a);
             return project(t, concat_cols({slice_cols(x, 2, 4), slice_cols(x, 0, 2)}));
           },
           [](Operands& o) { return P{&o.a}; });
  add_case("reshape", [](Tape& t, Operands& o) { return project(t, reshape(t.param(o.a), {4, 3})); },
           [](Operands& o) { return P{&o.a}; });
  add_case("cross_entropy", [](Tape& t, Operands& o) { return cross_entropy(reshape(t.param(o.v1), {1, 6}), 2); },
           [](Operands& o) { return P{&o.v1}; });
  add_case("kl_divergence", [](Tape& t, Operands& o) { return kl_divergence(t.param(o.v1), t.param(o.v2), 2.0); },
           [](Operands& o) { return P{&o.v1, &o.v2}; });
  add_case("mse", [](Tape& t, Operands& o) { return mse(t.param(o.a), t.param(o.c)); },
           [](Operands& o) { return P{&o.a, &o.c}; });
  add_case("cosine_similarity",
           [](Tape& t, Operands& o) { return cosine_similarity(t.param(o.v1), t.param(o.v2)); },
           [](Operands& o) { return P{&o.v1, &o.v2}; });

  cases.push_back({"attention_with_prefix", "primitive", 1e-5, [] {
                     auto bb = jittered_backbone(composite_vit(4, 1), 30);
                     BackboneWeights w = *bb;
                     w.set_frozen(false);
                     SeededRng rng(31);
                     Parameter h("h", random_tensor(rng, {5, 4}, -1.0, 1.0));
                     Parameter cl("cl", random_tensor(rng, {2, 4}, -0.5, 0.5));
                     Parameter kd("kd", random_tensor(rng, {2, 4}, -0.5, 0.5));
                     std::vector<Parameter*> ps = w.blocks[0].parameters();
                     ps.push_back(&h);
                     ps.push_back(&cl);
                     ps.push_back(&kd);
                     return finite_difference_check(
                         [&](Tape& t) {
                           LayerPrefix pre;
                           append_cl_prompt(pre, t.param(cl));
                           append_kd_prompt(pre, t.param(kd));
                           return project(t, attention_with_prefix(t, w.blocks[0], 2, t.param(h), pre));
                         },
                         ps, {.eps = 1e-5});
                   }});

  // Pool objectives.
  cases.push_back(loss("l2p key-matching loss", 1e-4, [] {
    SeededRng rng(40);
    std::vector<double> q(5);
    for (double& v : q) v = rng.normal();
    Parameter k1("k1", random_tensor(rng, {5})), k2("k2", random_tensor(rng, {5}));
    std::vector<Parameter*> ps{&k1, &k2};
    return finite_difference_check(
        [&](Tape& t) {
          std::vector<Var> keys{t.param(k1), t.param(k2)};
          return l2p_key_loss(t, q, keys);
        },
        ps, {.eps = 1e-5});
  }));
  cases.push_back(loss("coda orthogonality loss", 1e-4, [] {
    SeededRng rng(41);
    Parameter b("b", random_tensor(rng, {3, 5}, -1.0, 1.0));
    std::vector<Parameter*> ps{&b};
    return finite_difference_check([&](Tape& t) { return orthogonality_loss(t.param(b)); }, ps, {.eps = 1e-5});
  }));
  cases.push_back(loss("coda prompt composition", 1e-4, [] {
    SeededRng rng(42);
    std::vector<double> q(4);
    for (double& v : q) v = rng.normal();
    Parameter k("k", random_tensor(rng, {3, 4})), a("a", random_tensor(rng, {3, 4})), p("p", random_tensor(rng, {3, 8}));
    std::vector<Parameter*> ps{&k, &a, &p};
    return finite_difference_check(
        [&](Tape& t) {
          return project(t, coda_compose(coda_weights(t, q, t.param(k), t.param(a)), t.param(p), 2, 4));
        },
        ps, {.eps = 1e-5});
  }));

  // Distillation objectives on raw logits and features.
  cases.push_back(loss("kd loss", 1e-4, [] {
    SeededRng rng(50);
    Parameter zs("zs", random_tensor(rng, {1, 6}, -3.0, 3.0));
    const Tensor zt = random_tensor(rng, {1, 6}, -3.0, 3.0);
    std::vector<Parameter*> ps{&zs};
    return finite_difference_check([&](Tape& t) { return kd_loss(t.param(zs), t.constant(zt), 2.0); }, ps,
                                   {.eps = 1e-5});
  }));
  cases.push_back(loss("dkd loss", 1e-4, [] {
    SeededRng rng(51);
    Parameter zs("zs", random_tensor(rng, {1, 6}, -3.0, 3.0));
    const Tensor zt = random_tensor(rng, {1, 6}, -3.0, 3.0);
    std::vector<Parameter*> ps{&zs};
    return finite_difference_check(
        [&](Tape& t) {
          DkdTerms d = dkd_loss(t.param(zs), t.constant(zt), 3, 2.0);
          return add(d.tckd, d.nckd);
        },
        ps, {.eps = 1e-5});
  }));
  cases.push_back(loss("fitnets hint loss", 1e-4, [] {
    SeededRng rng(52);
    FeatureMapping m = FeatureMapping::init(3, 4, rng.split("map"), "m");
    Parameter fs("fs", random_tensor(rng, {5, 3}));
    const Tensor ft = random_tensor(rng, {5, 4});
    std::vector<Parameter*> ps{&fs, &m.weight, &m.bias};
    return finite_difference_check([&](Tape& t) { return fitnets_loss(t, t.param(fs), t.constant(ft), m); }, ps,
                                   {.eps = 1e-5});
  }));
  cases.push_back(loss("reviewkd fusion loss", 1e-4, [] {
    SeededRng rng(53);
    std::vector<FeatureMapping> maps;
    std::vector<Parameter> feats, gates;
    for (int j = 0; j < 3; ++j) {
      maps.push_back(FeatureMapping::init(3, 4, rng.split("map").split(j), "map" + std::to_string(j)));
      feats.emplace_back("f" + std::to_string(j), random_tensor(rng, {5, 3}));
    }
    gates.emplace_back("g0", Tensor::scalar(0.3));
    gates.emplace_back("g1", Tensor::scalar(-0.4));
    std::vector<Tensor> teacher;
    for (int j = 0; j < 3; ++j) teacher.push_back(random_tensor(rng, {5, 4}));
    std::vector<Parameter*> ps;
    for (auto& f : feats) ps.push_back(&f);
    for (auto& g : gates) ps.push_back(&g);
    for (auto& m : maps) ps.push_back(&m.weight), ps.push_back(&m.bias);
    return finite_difference_check(
        [&](Tape& t) {
          std::vector<Var> sf, tf, gv;
          for (auto& f : feats) sf.push_back(t.param(f));
          for (auto& x : teacher) tf.push_back(t.constant(x));
          for (auto& g : gates) gv.push_back(t.param(g));
          return reviewkd_loss(t, sf, tf, maps, gv);
        },
        ps, {.eps = 1e-5});
  }));

  // Per-method student objectives through a 2-block ViT.
  auto fx = std::make_shared<CompositeFixture>();
  for (DistillMethod m : {DistillMethod::None, DistillMethod::KD, DistillMethod::DKD, DistillMethod::FitNets,
                          DistillMethod::ReviewKD, DistillMethod::DeiT}) {
    cases.push_back(loss(to_string(m) + " student objective", 1e-4, [fx, m] {
      CLModel s = fx->student(m);
      return finite_difference_check(
          [&](Tape& t) {
            return kdp_student_loss(t, s, fx->image, model_query(s, fx->image), 3, 1, &fx->targets).total;
          },
          s.parameters(), {.eps = 1e-5});
    }));
  }
  cases.push_back({"kdp student objective (full forward)", "composite", 1e-3, [fx] {
                     CLModel s = fx->student(DistillMethod::KDP);
                     return finite_difference_check(
                         [&](Tape& t) {
                           return kdp_student_loss(t, s, fx->image, model_query(s, fx->image), 3, 1, &fx->targets)
                               .total;
                         },
                         s.parameters(), {.eps = 1e-5});
                   }});
  return cases;
}

std::vector<GradCheckRow> run_gradcheck(std::span<const GradCheckCase> cases) {
  std::vector<GradCheckRow> rows;
  for (const GradCheckCase& c : cases) {
    GradCheckRow r{c.name, c.kind, 0.0, c.tolerance, false, ""};
    try {
      GradCheckResult g = c.run();
      r.error = g.max_rel_error;
      r.pass = g.max_rel_error <= c.tolerance;
      r.detail = g.worst_param;
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace cdl
