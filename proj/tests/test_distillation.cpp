#include <cmath>
#include <numeric>

#include "cdl/error.hpp"
#include "cdl/gradcheck.hpp"
#include "cdl/model.hpp"
#include "doctest.h"
#include "oracle.hpp"

using namespace cdl;

namespace {

std::vector<double> random_vec(SeededRng& rng, int n, double lo = -3.0, double hi = 3.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

Tensor row_tensor(const std::vector<double>& v) { return Tensor({1, static_cast<int>(v.size())}, v); }

double kl_oracle(const std::vector<double>& zt, const std::vector<double>& zs, double tau) {
  auto pt = oracle::softmax(zt, tau), ps = oracle::softmax(zs, tau);
  double s = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i) s += pt[i] * std::log(pt[i] / ps[i]);
  return s;
}

// TCKD and NCKD written out from their definitions on explicit probabilities.
std::pair<double, double> dkd_oracle(const std::vector<double>& zs, const std::vector<double>& zt, int t, double tau) {
  auto pt = oracle::softmax(zt, tau), ps = oracle::softmax(zs, tau);
  const double tt = pt[t], ts = ps[t];
  double rt = 0.0, rs = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i)
    if (static_cast<int>(i) != t) rt += pt[i], rs += ps[i];
  const double tckd = tt * std::log(tt / ts) + rt * std::log(rt / rs);
  std::vector<double> ht, hs;
  for (std::size_t i = 0; i < pt.size(); ++i)
    if (static_cast<int>(i) != t) ht.push_back(zt[i]), hs.push_back(zs[i]);
  auto qt = oracle::softmax(ht, tau), qs = oracle::softmax(hs, tau);
  double n = 0.0;
  for (std::size_t i = 0; i < qt.size(); ++i) n += qt[i] * std::log(qt[i] / qs[i]);
  return {tckd, rt * n};
}

FeatureMapping identity_mapping(int d) {
  FeatureMapping f = FeatureMapping::init(d, d, SeededRng(0), "id");
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) f.weight.value.at(i, j) = i == j;
  return f;
}

ViTConfig tiny_vit(int dim, int blocks) {
  ViTConfig c;
  c.image_size = 2;
  c.channels = 2;
  c.patch = 1;  // 4 patch tokens
  c.dim = dim;
  c.heads = 2;
  c.blocks = blocks;
  c.mlp_ratio = 2;
  c.num_classes = 6;
  return c;
}

std::shared_ptr<const BackboneWeights> tiny_backbone(int dim, int blocks, std::uint64_t seed) {
  auto w = BackboneWeights::init(tiny_vit(dim, blocks), SeededRng(seed));
  SeededRng rng(seed + 1);
  for (Parameter* p : w.parameters())
    for (double& v : p->value.values()) v += rng.normal(0.0, 0.05);
  w.set_frozen(true);
  return std::make_shared<const BackboneWeights>(std::move(w));
}

PoolConfig tiny_coda() {
  PoolConfig p = PoolConfig::desk(PoolMethod::CODA, 2, 3);
  p.length = 2;
  return p;
}

}  // namespace

TEST_CASE("kd_loss examples") {
  Tape t;
  SeededRng rng(1);
  auto z = random_vec(rng, 5);
  Var zs = t.constant(row_tensor(z));
  CHECK(kd_loss(zs, t.constant(row_tensor(z)), 2.0).item() == 0.0);
  for (double c : {-7.5, -1.0, 0.3, 12.0}) {
    auto shifted = z;
    for (double& v : shifted) v += c;
    CHECK(std::abs(kd_loss(zs, t.constant(row_tensor(shifted)), 2.0).item()) <= 1e-12);
  }
  Var a = t.constant(Tensor::matrix(1, 2, {0.0, 0.0}));
  Var b = t.constant(Tensor::matrix(1, 2, {std::log(3.0), 0.0}));
  const double expect = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  CHECK(kd_loss(a, b, 1.0).item() == doctest::Approx(expect).epsilon(1e-14));
  CHECK(kd_loss(a, b, 1.0).item() == doctest::Approx(0.13081).epsilon(1e-4));
  // τ² scaling
  CHECK(kd_loss(a, b, 2.0).item() == doctest::Approx(4.0 * kl_oracle({std::log(3.0), 0.0}, {0, 0}, 2.0)).epsilon(1e-13));
  CHECK_THROWS_AS(kd_loss(a, b, 0.0), ContractViolation);
  CHECK_THROWS_AS(kd_loss(a, b, -1.0), ContractViolation);
}

TEST_CASE("dkd_loss examples") {
  Tape t;
  SeededRng rng(2);
  auto z = random_vec(rng, 4);
  auto same = dkd_loss(t.constant(row_tensor(z)), t.constant(row_tensor(z)), 1, 2.0);
  CHECK(std::abs(same.tckd.item()) <= 1e-15);
  CHECK(std::abs(same.nckd.item()) <= 1e-15);
  auto two = dkd_loss(t.constant(row_tensor(random_vec(rng, 2))), t.constant(row_tensor(random_vec(rng, 2))), 0, 2.0);
  CHECK(two.nckd.item() == 0.0);
  auto zs = random_vec(rng, 3), zt = random_vec(rng, 3);
  auto terms = dkd_loss(t.constant(row_tensor(zs)), t.constant(row_tensor(zt)), 2, 2.0);
  auto [tc, nc] = dkd_oracle(zs, zt, 2, 2.0);
  CHECK(terms.tckd.item() == doctest::Approx(tc).epsilon(1e-12));
  CHECK(terms.nckd.item() == doctest::Approx(nc).epsilon(1e-12));
  CHECK(std::abs(tc + nc - kl_oracle(zt, zs, 2.0)) <= 1e-12);
  CHECK_THROWS_AS(dkd_loss(t.constant(Tensor({1, 1})), t.constant(Tensor({1, 1})), 0, 1.0), ContractViolation);
}

TEST_CASE("dkd decomposition identity over random draws") {
  SeededRng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int c = rng.uniform_int(2, 10);
    const double tau = std::vector<double>{1.0, 2.0, 4.0}[rng.uniform_int(0, 2)];
    auto zs = random_vec(rng, c), zt = random_vec(rng, c);
    const int target = rng.uniform_int(0, c - 1);
    Tape t;
    auto terms = dkd_loss(t.constant(row_tensor(zs)), t.constant(row_tensor(zt)), target, tau);
    worst = std::max(worst, std::abs(terms.tckd.item() + terms.nckd.item() - kl_oracle(zt, zs, tau)));
    CHECK(terms.tckd.item() >= -1e-15);
    CHECK(terms.nckd.item() >= -1e-15);
    if (c == 2) CHECK(terms.nckd.item() == 0.0);
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("fitnets_loss examples") {
  Tape t;
  SeededRng rng(4);
  Tensor f({5, 3});
  for (double& v : f.values()) v = rng.normal();
  FeatureMapping id = identity_mapping(3);
  CHECK(fitnets_loss(t, t.constant(f), t.constant(f), id).item() == 0.0);

  FeatureMapping zero = FeatureMapping::init(3, 4, SeededRng(5), "z");
  for (double& v : zero.weight.value.values()) v = 0.0;
  CHECK(fitnets_loss(t, t.constant(f), t.constant(Tensor({5, 4}, 1.0)), zero).item() == 1.0);

  FeatureMapping m = FeatureMapping::init(2, 4, SeededRng(6), "m");
  for (double& v : m.bias.value.values()) v = rng.normal();
  Tensor fs({3, 2}), ft({3, 4});
  for (double& v : fs.values()) v = rng.normal();
  for (double& v : ft.values()) v = rng.normal();
  double s = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      double y = m.bias.value[k];
      for (int j = 0; j < 2; ++j) y += fs.at(i, j) * m.weight.value.at(j, k);
      s += (ft.at(i, k) - y) * (ft.at(i, k) - y);
    }
  CHECK(fitnets_loss(t, t.constant(fs), t.constant(ft), m).item() == doctest::Approx(s / 12.0).epsilon(1e-13));
  CHECK_THROWS_AS(fitnets_loss(t, t.constant(Tensor({2, 2})), t.constant(ft), m), ConfigError);
}

TEST_CASE("block_map and reviewkd recursion") {
  CHECK(block_map(1, 4, 6) == 2);
  CHECK(block_map(2, 4, 6) == 3);
  CHECK(block_map(3, 4, 6) == 5);
  CHECK(block_map(4, 4, 6) == 6);
  CHECK(block_map(3, 3, 3) == 3);

  SeededRng rng(7);
  auto rnd = [&](int r, int c) {
    Tensor x({r, c});
    for (double& v : x.values()) v = rng.normal();
    return x;
  };
  Tape t;
  // n = 1: a single distance.
  FeatureMapping m0 = FeatureMapping::init(2, 3, SeededRng(8), "m0");
  Tensor s1 = rnd(4, 2), t1 = rnd(4, 3);
  std::vector<Var> sf{t.constant(s1)}, tf{t.constant(t1)};
  std::vector<FeatureMapping> ms{m0};
  CHECK(reviewkd_loss(t, sf, tf, ms, {}).item() == fitnets_loss(t, sf[0], tf[0], m0).item());

  // Self-distillation with identity maps and saturated gates gives zero.
  Tensor a = rnd(4, 3), b = rnd(4, 3);
  std::vector<Var> same{t.constant(a), t.constant(b)};
  std::vector<FeatureMapping> ids{identity_mapping(3), identity_mapping(3)};
  std::vector<Var> sat{t.constant(Tensor::scalar(60.0))};
  CHECK(reviewkd_loss(t, same, same, ids, sat).item() == 0.0);

  // Two blocks, gate 0.5, explicit recursion.
  FeatureMapping ma = FeatureMapping::init(2, 3, SeededRng(9), "a"), mb = FeatureMapping::init(2, 3, SeededRng(10), "b");
  Tensor f1 = rnd(4, 2), f2 = rnd(4, 2), g1 = rnd(4, 3), g2 = rnd(4, 3);
  std::vector<Var> s2{t.constant(f1), t.constant(f2)}, t2{t.constant(g1), t.constant(g2)};
  std::vector<FeatureMapping> m2{ma, mb};
  std::vector<Var> half{t.constant(Tensor::scalar(0.0))};
  auto dist = [](const oracle::Mat& x, const Tensor& y) {
    double s = 0.0;
    for (int i = 0; i < y.rows(); ++i)
      for (int j = 0; j < y.cols(); ++j) s += (x[i][j] - y.at(i, j)) * (x[i][j] - y.at(i, j));
    return s / y.size();
  };
  auto map = [](const FeatureMapping& m, const oracle::Mat& x) {
    return oracle::add_bias(oracle::matmul(x, oracle::from_tensor(m.weight.value)), m.bias.value);
  };
  oracle::Mat fused = oracle::from_tensor(f1);
  auto o2 = oracle::from_tensor(f2);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) fused[i][j] = 0.5 * fused[i][j] + 0.5 * o2[i][j];
  const double expect = dist(map(mb, o2), g2) + dist(map(ma, fused), g1);
  CHECK(reviewkd_loss(t, s2, t2, m2, half).item() == doctest::Approx(expect).epsilon(1e-13));
  CHECK_THROWS_AS(reviewkd_loss(t, std::vector<Var>{}, t2, {}, {}), ContractViolation);
}

TEST_CASE("combine_heads_predict") {
  SeededRng rng(11);
  auto z = random_vec(rng, 5);
  auto p = combine_heads_predict(z, z);
  auto q = oracle::softmax(z);
  for (int i = 0; i < 5; ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-15);

  std::vector<double> a{0, 9, 9, 0}, b{0, 9, 9, 0};
  CHECK(argmax(combine_heads_predict(a, b)) == 1);
  CHECK(argmax(std::vector<double>{0.25, 0.25, 0.5, 0.5}) == 2);

  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_vec(rng, 6), y = random_vec(rng, 6);
    auto c = combine_heads_predict(x, y);
    auto px = oracle::softmax(x), py = oracle::softmax(y);
    for (int i = 0; i < 6; ++i) CHECK(std::abs(c[i] - 0.5 * (px[i] + py[i])) <= 1e-15);
  }
  CHECK_THROWS_AS(combine_heads_predict(a, std::vector<double>{1, 2}), ContractViolation);
}

TEST_CASE("distillation losses are non-negative and pass gradient checks") {
  SeededRng rng(12);
  Parameter zs("zs", row_tensor(random_vec(rng, 6)));
  const Tensor zt = row_tensor(random_vec(rng, 6));
  std::vector<Parameter*> ps{&zs};
  auto kd = finite_difference_check([&](Tape& t) { return kd_loss(t.param(zs), t.constant(zt), 2.0); }, ps,
                                    {.eps = 1e-5});
  CHECK(kd.max_rel_error <= 1e-4);
  auto dkd = finite_difference_check(
      [&](Tape& t) {
        auto d = dkd_loss(t.param(zs), t.constant(zt), 3, 2.0);
        return add(d.tckd, d.nckd);
      },
      ps, {.eps = 1e-5});
  CHECK(dkd.max_rel_error <= 1e-4);

  FeatureMapping m = FeatureMapping::init(3, 4, SeededRng(13), "m");
  Parameter fs("fs", Tensor({5, 3}));
  for (double& v : fs.value.values()) v = rng.normal();
  Tensor ft({5, 4});
  for (double& v : ft.values()) v = rng.normal();
  std::vector<Parameter*> fp{&fs, &m.weight, &m.bias};
  auto fit = finite_difference_check([&](Tape& t) { return fitnets_loss(t, t.param(fs), t.constant(ft), m); }, fp,
                                     {.eps = 1e-5});
  CHECK(fit.max_rel_error <= 1e-4);

  std::vector<FeatureMapping> maps{FeatureMapping::init(3, 4, SeededRng(14), "a"),
                                   FeatureMapping::init(3, 4, SeededRng(15), "b"),
                                   FeatureMapping::init(3, 4, SeededRng(16), "c")};
  std::vector<Parameter> feats, gates;
  for (int j = 0; j < 3; ++j) {
    Tensor x({5, 3});
    for (double& v : x.values()) v = rng.normal();
    feats.emplace_back("f" + std::to_string(j), x);
  }
  gates.emplace_back("g0", Tensor::scalar(0.3));
  gates.emplace_back("g1", Tensor::scalar(-0.4));
  std::vector<Tensor> teacher;
  for (int j = 0; j < 5; ++j) {
    Tensor x({5, 4});
    for (double& v : x.values()) v = rng.normal();
    teacher.push_back(x);
  }
  std::vector<Parameter*> rp;
  for (auto& f : feats) rp.push_back(&f);
  for (auto& g : gates) rp.push_back(&g);
  for (auto& mp : maps) rp.push_back(&mp.weight), rp.push_back(&mp.bias);
  LossBuilder review = [&](Tape& t) {
    std::vector<Var> sf, tf, gv;
    for (auto& f : feats) sf.push_back(t.param(f));
    for (auto& x : teacher) tf.push_back(t.constant(x));
    for (auto& g : gates) gv.push_back(t.param(g));
    return reviewkd_loss(t, sf, tf, maps, gv);
  };
  auto rv = finite_difference_check(review, rp, {.eps = 1e-5});
  CHECK(rv.max_rel_error <= 1e-4);
  Tape t;
  CHECK(review(t).item() >= 0.0);
}

TEST_CASE("student objectives: limits, teacher detachment and KDP depth 0") {
  auto student_bb = tiny_backbone(4, 2, 20);
  auto teacher_bb = tiny_backbone(6, 3, 21);
  ModelShape shape{.tasks = 3, .classes_per_task = 2, .lambda = 1.0, .teacher_dim = 6, .teacher_blocks = 3};
  CLModel teacher = make_model(teacher_bb, tiny_coda(), shape, DistillConfig{}, SeededRng(22));
  std::vector<double> img(8);
  SeededRng rng(23);
  for (double& v : img) v = rng.uniform();
  auto tq = model_query(teacher, img);
  TeacherTargets targets = teacher_targets(teacher, img, tq, 1, true);
  REQUIRE(targets.features.size() == 3);

  DistillConfig kdp{.method = DistillMethod::KDP, .kd_prompt_length = 2};
  CLModel student = make_model(student_bb, tiny_coda(), shape, kdp, SeededRng(24));
  auto sq = model_query(student, img);

  SUBCASE("alpha = 0 leaves CE plus the pool term") {
    student.distill.alpha = 0.0;
    Tape t;
    auto parts = kdp_student_loss(t, student, img, sq, 2, 1, &targets);
    CHECK(parts.total.item() == doctest::Approx(parts.classification + parts.pool).epsilon(1e-14));
  }
  SUBCASE("alpha = 1 makes the class head gradient vanish") {
    student.distill.alpha = 1.0;
    Tape t;
    auto parts = kdp_student_loss(t, student, img, sq, 2, 1, &targets);
    auto g = t.grad(parts.total);
    for (double v : g.at(student.head.weight.id).values()) CHECK(v == 0.0);
  }
  SUBCASE("missing teacher targets are rejected") {
    Tape t;
    CHECK_THROWS_AS(kdp_student_loss(t, student, img, sq, 2, 1, nullptr), ContractViolation);
    CHECK_THROWS_AS(kdp_student_loss(t, student, img, sq, 0, 1, &targets), ContractViolation);
  }
  SUBCASE("KDP with no KD-prompt layers equals DeiT") {
    DistillConfig zero = kdp;
    zero.kd_prompt_depth = 0;
    DistillConfig deit{.method = DistillMethod::DeiT, .kd_prompt_length = 2};
    CLModel a = make_model(student_bb, tiny_coda(), shape, zero, SeededRng(24));
    CLModel b = make_model(student_bb, tiny_coda(), shape, deit, SeededRng(24));
    Tape ta, tb;
    const double la = kdp_student_loss(ta, a, img, sq, 3, 1, &targets).total.item();
    const double lb = kdp_student_loss(tb, b, img, sq, 3, 1, &targets).total.item();
    CHECK(std::abs(la - lb) <= 1e-12);
  }
  SUBCASE("every method: non-negative parts, teacher absent from gradients, FD agreement") {
    for (DistillMethod m : {DistillMethod::None, DistillMethod::KD, DistillMethod::DKD, DistillMethod::FitNets,
                            DistillMethod::ReviewKD, DistillMethod::DeiT, DistillMethod::KDP}) {
      DistillConfig dc{.method = m, .kd_prompt_length = 2};
      CLModel s = make_model(student_bb, tiny_coda(), shape, dc, SeededRng(25));
      s.pool.begin_task(1);
      Tape t;
      auto parts = kdp_student_loss(t, s, img, sq, 3, 1, &targets);
      CHECK(parts.classification >= 0.0);
      CHECK(parts.distillation >= 0.0);
      CHECK(parts.pool >= 0.0);
      auto g = t.grad(parts.total);
      for (const Parameter* p : teacher.parameters()) CHECK_FALSE(g.contains(p->id));
      LossBuilder build = [&](Tape& tt) { return kdp_student_loss(tt, s, img, sq, 3, 1, &targets).total; };
      auto r = finite_difference_check(build, s.parameters(), {.eps = 1e-5});
      INFO(to_string(m), " worst ", r.worst_param);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("KD prompts receive gradient on the KDP objective") {
  auto student_bb = tiny_backbone(4, 2, 30);
  ModelShape shape{.tasks = 3, .classes_per_task = 2};
  CLModel s = make_model(student_bb, tiny_coda(), shape, DistillConfig{.method = DistillMethod::KDP, .kd_prompt_length = 2},
                         SeededRng(31));
  REQUIRE(s.kd_prompts.size() == 2);
  std::vector<double> img(8, 0.4);
  img[3] = 0.9;
  TeacherTargets tt{Tensor::matrix(1, 6, {0.1, -0.3, 2.0, 0.5, 0.0, 1.0}), {}};
  Tape t;
  auto g = t.grad(kdp_student_loss(t, s, img, model_query(s, img), 0, 0, &tt).total);
  for (const Parameter& p : s.kd_prompts) {
    double n = 0.0;
    for (double v : g.at(p.id).values()) n += v * v;
    CHECK(n > 0.0);
  }
}
