#include <cmath>
#include <numbers>
#include <vector>

#include "cdl/autodiff.hpp"
#include "cdl/error.hpp"
#include "cdl/gradcheck.hpp"
#include "cdl/kernels.hpp"
#include "cdl/optim.hpp"
#include "cdl/rng.hpp"
#include "doctest.h"

using namespace cdl;

namespace {

Tensor random_tensor(SeededRng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Primitive gradient checks run at eps = 1e-5 with the default floor.
double check(const LossBuilder& f, std::vector<Parameter*> ps) {
  return finite_difference_check(f, ps, {.eps = 1e-5}).max_rel_error;
}

}  // namespace

TEST_CASE("grad of x*x at 3 is 6") {
  Parameter x("x", Tensor::scalar(3.0));
  Tape t;
  Var v = t.param(x);
  auto g = t.grad(mul(v, v));
  CHECK(g.at(x.id)[0] == 6.0);
}

TEST_CASE("unreachable parameter gets a zero gradient, frozen ones none") {
  Parameter p("p", Tensor::vector({1.0, 2.0}));
  Parameter q("q", Tensor::vector({3.0, 4.0}));
  Parameter frozen("f", Tensor::vector({1.0, 1.0}), false);
  Tape t;
  Var vp = t.param(p);
  t.param(q);
  Var vf = t.param(frozen);
  auto g = t.grad(sum(mul(vp, vf)));
  REQUIRE(g.contains(q.id));
  CHECK(g.at(q.id)[0] == 0.0);
  CHECK(g.at(q.id)[1] == 0.0);
  CHECK_FALSE(g.contains(frozen.id));
  CHECK(g.at(p.id)[1] == 1.0);
}

TEST_CASE("grad rejects non-scalar and foreign losses") {
  Tape a, b;
  Var x = a.constant(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(a.grad(x), ContractViolation);
  Var y = b.constant(Tensor::scalar(1.0));
  CHECK_THROWS_AS(a.grad(y), TapeError);
  CHECK_THROWS_AS(add(x, y), TapeError);
  CHECK_THROWS_AS(sum(Var{}), TapeError);
}

TEST_CASE("softmax_with_temperature examples") {
  auto p = softmax_with_temperature(std::vector<double>{0.0, 0.0}, 2.0);
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);

  // Scalar reference for softmax([1, 0]).
  const double e = std::exp(1.0);
  auto q = softmax_with_temperature(std::vector<double>{2.0, 0.0}, 2.0);
  CHECK(q[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
  CHECK(q[1] == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-14));
  CHECK(q[0] == doctest::Approx(0.73106).epsilon(1e-5));

  std::vector<double> z{0.3, -1.2, 2.5};
  auto a = softmax_with_temperature(z, 1.0);
  double s = 0.0;
  for (double v : z) s += std::exp(v);
  for (int i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(std::exp(z[i]) / s).epsilon(1e-14));

  CHECK_THROWS_AS(softmax_with_temperature(z, 0.0), ContractViolation);
  CHECK_THROWS_AS(softmax_with_temperature(z, -1.0), ContractViolation);
  CHECK_THROWS_AS(softmax_with_temperature(std::vector<double>{NAN, 1.0}, 1.0), NumericError);
}

TEST_CASE("softmax_with_temperature sums to one and is shift invariant") {
  SeededRng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 12);
    std::vector<double> z(n);
    for (double& v : z) v = rng.uniform(-5.0, 5.0);
    const double tau = rng.uniform(0.25, 10.0);
    auto p = softmax_with_temperature(z, tau);
    double s = 0.0;
    for (double v : p) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
    std::vector<double> shifted = z;
    for (double& v : shifted) v += 3.25;
    auto ps = softmax_with_temperature(shifted, tau);
    for (int i = 0; i < n; ++i) CHECK(std::abs(ps[i] - p[i]) <= 1e-12);
  }
}

TEST_CASE("cosine_similarity examples and invariants") {
  using V = std::vector<double>;
  CHECK(cosine_similarity(V{1, 0}, V{1, 0}) == 1.0);
  CHECK(cosine_similarity(V{1, 0}, V{0, 1}) == 0.0);
  CHECK(cosine_similarity(V{1, 0}, V{1, 1}) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(cosine_similarity(V{0, 0}, V{1, 1}), DegenerateInput);

  SeededRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    V a(6), b(6);
    for (double& v : a) v = rng.uniform(-2, 2);
    for (double& v : b) v = rng.uniform(-2, 2);
    const double c = rng.uniform(0.01, 50.0);
    V ca = a;
    for (double& v : ca) v *= c;
    CHECK(std::abs(cosine_similarity(ca, b) - cosine_similarity(a, b)) <= 1e-12);
    CHECK(cosine_similarity(a, b) == doctest::Approx(cosine_similarity(b, a)).epsilon(1e-15));
  }
}

TEST_CASE("adam_step examples") {
  Tensor p = Tensor::vector({0.5, -1.0});
  const Tensor before = p;
  AdamState s;
  adam_step(p, Tensor::vector({0.0, 0.0}), s);
  CHECK(p.bit_equal(before));
  CHECK(s.step == 1);

  // First step with bias correction: update = -lr * g / (|g| + eps).
  Tensor q = Tensor::scalar(2.0);
  AdamState s2;
  adam_step(q, Tensor::scalar(-0.3), s2);
  CHECK(q[0] - 2.0 == doctest::Approx(0.001 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(s2.lr == 0.001);

  Tensor wrong = Tensor::vector({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(adam_step(wrong, Tensor::vector({1.0}), s2), ContractViolation);
}

TEST_CASE("finite_difference_check harness") {
  Parameter w("w", Tensor::vector({0.3, -1.1, 2.0}));
  const std::vector<double> x{1.5, 0.25, -0.75};
  LossBuilder linear = [&](Tape& t) { return sum(mul(t.param(w), t.constant(Tensor::vector(x)))); };
  std::vector<Parameter*> ps{&w};
  CHECK(finite_difference_check(linear, ps, {.eps = 1e-4}).max_rel_error <= 1e-10);

  SeededRng rng(11);
  Parameter z("logits", random_tensor(rng, {1, 7}));
  LossBuilder ce = [&](Tape& t) { return cross_entropy(t.param(z), 3); };
  std::vector<Parameter*> pz{&z};
  CHECK(finite_difference_check(ce, pz, {.eps = 1e-5}).max_rel_error <= 1e-6);

  Parameter frozen("frozen", Tensor::vector({1.0, 2.0, 3.0}), false);
  LossBuilder both = [&](Tape& t) { return sum(mul(t.param(w), t.param(frozen))); };
  std::vector<Parameter*> pf{&w, &frozen};
  auto r = finite_difference_check(both, pf, {.eps = 1e-4});
  CHECK(r.coords_checked == 3);

  int calls = 0;
  LossBuilder flaky = [&](Tape& t) { return scale(sum(t.param(w)), 1.0 + 1e-3 * (++calls)); };
  CHECK_THROWS_AS(finite_difference_check(flaky, ps), DeterminismError);
  CHECK_THROWS_AS(finite_difference_check(linear, ps, {.eps = 1e-2}), ContractViolation);
}

TEST_CASE("primitive gradients match central differences") {
  SeededRng rng(42);
  Parameter a("a", random_tensor(rng, {3, 4}));
  Parameter b("b", random_tensor(rng, {4, 5}));
  Parameter c("c", random_tensor(rng, {3, 4}));
  Parameter bt("bt", random_tensor(rng, {5, 4}));
  Parameter bias("bias", random_tensor(rng, {4}));
  Parameter gamma("gamma", random_tensor(rng, {4}));
  Parameter beta("beta", random_tensor(rng, {4}));
  Parameter pos("pos", random_tensor(rng, {3, 4}, 0.5, 2.0));
  Parameter v1("v1", random_tensor(rng, {6}));
  Parameter v2("v2", random_tensor(rng, {6}));
  Parameter s("s", random_tensor(rng, {1}));
  Parameter w("w", random_tensor(rng, {3, 4}));  // fixed random projection for scalarizing

  auto proj = [&](Tape& t, Var x) {
    // Scalarize with a random weighting so every output coordinate matters.
    Tensor wt(x.shape());
    SeededRng r(99);
    for (double& v : wt.values()) v = r.uniform(-1, 1);
    return sum(mul(x, t.constant(wt)));
  };
  const double tol = 1e-5;

  CHECK(check([&](Tape& t) { return proj(t, matmul(t.param(a), t.param(b))); }, {&a, &b}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, matmul_nt(t.param(a), t.param(bt))); }, {&a, &bt}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, add(t.param(a), t.param(c))); }, {&a, &c}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, add_row(t.param(a), t.param(bias))); }, {&a, &bias}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, sub(t.param(a), t.param(c))); }, {&a, &c}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, mul(t.param(a), t.param(c))); }, {&a, &c}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, mul_scalar(t.param(a), t.param(s))); }, {&a, &s}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, layer_norm(t.param(a), t.param(gamma), t.param(beta))); },
              {&a, &gamma, &beta}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, gelu(t.param(a))); }, {&a}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, sigmoid(t.param(a))); }, {&a}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, log(t.param(pos))); }, {&pos}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, sqrt(t.param(pos))); }, {&pos}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, softmax(t.param(a), 1.7)); }, {&a}) <= tol);
  CHECK(check([&](Tape& t) { return proj(t, log_softmax(t.param(a), 0.8)); }, {&a}) <= tol);
  CHECK(check(
            [&](Tape& t) {
              Var x = t.param(a);
              return proj(t, concat_rows({slice_rows(x, 1, 3), slice_rows(x, 0, 1)}));
            },
            {&a}) <= tol);
  CHECK(check(
            [&](Tape& t) {
              Var x = t.param(a);
              return proj(t, concat_cols({slice_cols(x, 2, 4), slice_cols(x, 0, 2)}));
            },
            {&a}) <= tol);
  CHECK(check([&](Tape& t) { return mean(mul(t.param(a), t.param(c))); }, {&a, &c}) <= tol);
  CHECK(check([&](Tape& t) { return kl_divergence(t.param(v1), t.param(v2), 2.0); }, {&v1, &v2}) <= tol);
  CHECK(check([&](Tape& t) { return cross_entropy(reshape(t.param(v1), {1, 6}), 2); }, {&v1}) <= tol);
  CHECK(check([&](Tape& t) { return mse(t.param(a), t.param(c)); }, {&a, &c}) <= tol);
  CHECK(check([&](Tape& t) { return cosine_similarity(t.param(v1), t.param(v2)); }, {&v1, &v2}) <= tol);
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  SeededRng rng(5);
  for (auto [m, k, n] : {std::tuple{3, 4, 5}, std::tuple{17, 64, 192}, std::tuple{70, 80, 90}}) {
    Tensor a = random_tensor(rng, {m, k});
    Tensor b = random_tensor(rng, {k, n});
    Tensor bt = random_tensor(rng, {n, k});
    Tensor at = random_tensor(rng, {k, m});
    Tensor c1({m, n}), c2({m, n});
    kernels::gemm_nn(a.span(), b.span(), c1.span(), m, k, n);
    kernels::reference::gemm_nn(a.span(), b.span(), c2.span(), m, k, n);
    CHECK(c1.bit_equal(c2));
    kernels::gemm_nt(a.span(), bt.span(), c1.span(), m, k, n, true);
    kernels::reference::gemm_nt(a.span(), bt.span(), c2.span(), m, k, n, true);
    CHECK(c1.bit_equal(c2));
    kernels::gemm_tn(at.span(), b.span(), c1.span(), m, k, n);
    kernels::reference::gemm_tn(at.span(), b.span(), c2.span(), m, k, n);
    CHECK(c1.bit_equal(c2));

    Tensor y1({m, k}), y2({m, k});
    kernels::softmax_rows(a.span(), y1.span(), m, k, 1.3);
    kernels::reference::softmax_rows(a.span(), y2.span(), m, k, 1.3);
    CHECK(y1.bit_equal(y2));
    std::vector<double> s1(m), s2(m);
    kernels::layer_norm_rows(a.span(), y1.span(), s1, m, k, 1e-6);
    kernels::reference::layer_norm_rows(a.span(), y2.span(), s2, m, k, 1e-6);
    CHECK(y1.bit_equal(y2));
    CHECK(s1 == s2);
    kernels::gelu(a.span(), y1.span());
    kernels::reference::gelu(a.span(), y2.span());
    CHECK(y1.bit_equal(y2));
  }
}

TEST_CASE("seeded rng replays and splits") {
  SeededRng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  SeededRng root(1);
  auto x = root.split("init");
  auto y = root.split("shuffle");
  CHECK(x.next_u64() != y.next_u64());
  CHECK(root.split("init").next_u64() == root.split("init").next_u64());
  CHECK(root.counter() == 0);
}
