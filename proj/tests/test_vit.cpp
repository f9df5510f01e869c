#include <sstream>

#include "cdl/error.hpp"
#include "cdl/gradcheck.hpp"
#include "cdl/optim.hpp"
#include "cdl/vit.hpp"
#include "doctest.h"
#include "oracle.hpp"

using namespace cdl;

namespace {

ViTConfig tiny(int blocks = 2, int heads = 2) {
  ViTConfig c;
  c.image_size = 4;
  c.channels = 2;
  c.patch = 2;
  c.dim = 8;
  c.heads = heads;
  c.blocks = blocks;
  c.mlp_ratio = 2;
  c.num_classes = 5;
  return c;
}

std::vector<double> random_image(const ViTConfig& c, SeededRng rng) {
  std::vector<double> img(c.channels * c.image_size * c.image_size);
  for (double& v : img) v = rng.uniform();
  return img;
}

Tensor random_tensor(SeededRng& rng, Shape shape, double sd = 0.5) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

// Frozen backbone with nonzero biases and non-unit norms so every term of
// the oracle is exercised.
BackboneWeights perturbed(const ViTConfig& c, std::uint64_t seed) {
  BackboneWeights w = BackboneWeights::init(c, SeededRng(seed));
  SeededRng rng(seed + 100);
  for (Parameter* p : w.parameters())
    for (double& v : p->value.values()) v += rng.normal(0.0, 0.1);
  w.set_frozen(true);
  return w;
}

double max_diff(const oracle::Mat& a, const Tensor& b) {
  double m = 0.0;
  for (int i = 0; i < b.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) m = std::max(m, std::abs(a[i][j] - b.at(i, j)));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(ViTConfig::student_default().validate());
  CHECK_NOTHROW(ViTConfig::teacher_default().validate());
  ViTConfig c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = tiny();
  c.patch = 3;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = tiny();
  c.blocks = 0;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
}

TEST_CASE("patch_embed token count, zero image and replay") {
  ViTConfig c = ViTConfig::student_default();
  BackboneWeights w = BackboneWeights::init(c, SeededRng(3));
  SeededRng rng(9);
  for (double& v : w.patch_b.value.values()) v = rng.normal();
  Tape t;
  std::vector<double> zero(c.channels * 16 * 16, 0.0);
  Var tok = patch_embed(t, w, zero);
  REQUIRE(tok.value().rows() == 17);
  for (int j = 0; j < c.dim; ++j) {
    CHECK(tok.value().at(0, j) == w.cls_token.value[j] + w.pos_embed.value.at(0, j));
    for (int i = 1; i < 17; ++i) CHECK(tok.value().at(i, j) == w.patch_b.value[j] + w.pos_embed.value.at(i, j));
  }
  auto img = random_image(c, SeededRng(4));
  Tape t1, t2;
  CHECK(patch_embed(t1, w, img).value().bit_equal(patch_embed(t2, w, img).value()));
  CHECK(max_diff(oracle::embed(w, img), patch_embed(t1, w, img).value()) <= 1e-12);
  std::vector<double> bad(10, 0.0);
  CHECK_THROWS_AS(patch_embed(t1, w, bad), ContractViolation);
}

TEST_CASE("attention with empty prefixes equals plain attention") {
  for (int heads : {1, 2, 4}) {
    ViTConfig c = tiny(1, heads);
    BackboneWeights w = perturbed(c, 11);
    SeededRng rng(12);
    Tape t;
    Var hn = t.constant(random_tensor(rng, {5, c.dim}));
    Var out = attention_with_prefix(t, w.blocks[0], heads, hn, LayerPrefix{});
    CHECK(max_diff(oracle::attention(oracle::from_tensor(hn.value()), w.blocks[0], heads, {}), out.value()) <= 1e-12);
  }
}

TEST_CASE("single-head prefix attention matches an explicit three-column softmax") {
  // One head, D = 2, two tokens, one prefix key/value pair, identity Q/K/V/O.
  BlockWeights b;
  auto eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto zero = Tensor::vector({0, 0});
  b.wq = Parameter("wq", eye, false), b.wk = Parameter("wk", eye, false), b.wv = Parameter("wv", eye, false);
  b.wo = Parameter("wo", eye, false);
  b.bq = Parameter("bq", zero, false), b.bk = Parameter("bk", zero, false), b.bv = Parameter("bv", zero, false);
  b.bo = Parameter("bo", zero, false);
  Tape t;
  Var h = t.constant(Tensor::matrix(2, 2, {1.0, 0.0, 0.5, 2.0}));
  LayerPrefix p;
  append_cl_prompt(p, t.constant(Tensor::matrix(2, 2, {0.0, 1.0, 3.0, -1.0})));  // key (0,1), value (3,-1)
  std::vector<Var> probs;
  Var out = attention_with_prefix(t, b, 1, h, p, &probs);

  const double hv[2][2] = {{1.0, 0.0}, {0.5, 2.0}};
  const double keys[3][2] = {{0.0, 1.0}, {1.0, 0.0}, {0.5, 2.0}};
  const double vals[3][2] = {{3.0, -1.0}, {1.0, 0.0}, {0.5, 2.0}};
  for (int i = 0; i < 2; ++i) {
    double s[3], z = 0.0;
    for (int j = 0; j < 3; ++j) {
      s[j] = std::exp((hv[i][0] * keys[j][0] + hv[i][1] * keys[j][1]) / std::sqrt(2.0));
      z += s[j];
    }
    for (int col = 0; col < 2; ++col) {
      double expect = 0.0;
      for (int j = 0; j < 3; ++j) expect += s[j] / z * vals[j][col];
      CHECK(out.value().at(i, col) == doctest::Approx(expect).epsilon(1e-13));
    }
    for (int j = 0; j < 3; ++j) CHECK(probs[0].value().at(i, j) == doctest::Approx(s[j] / z).epsilon(1e-13));
  }
}

TEST_CASE("attention rows sum to one and token count is preserved for every prefix layout") {
  ViTConfig c = tiny(1, 2);
  BackboneWeights w = perturbed(c, 5);
  SeededRng rng(6);
  for (int cl : {0, 2, 4})
    for (int kd : {0, 2, 6}) {
      Tape t;
      Var hn = t.constant(random_tensor(rng, {5, c.dim}));
      LayerPrefix p;
      if (cl) append_cl_prompt(p, t.constant(random_tensor(rng, {cl, c.dim})));
      if (kd) append_kd_prompt(p, t.constant(random_tensor(rng, {kd, c.dim})));
      std::vector<Var> probs;
      Var out = attention_with_prefix(t, w.blocks[0], c.heads, hn, p, &probs);
      CHECK(out.value().rows() == 5);
      Var blk = transformer_block(t, w.blocks[0], c.heads, hn, p);
      CHECK(blk.value().rows() == 5);
      for (const Var& pr : probs) {
        CHECK(pr.value().cols() == 5 + cl / 2 + kd / 2);
        for (int i = 0; i < pr.value().rows(); ++i) {
          double s = 0.0;
          for (int j = 0; j < pr.value().cols(); ++j) s += pr.value().at(i, j);
          CHECK(std::abs(s - 1.0) <= 1e-12);
        }
      }
    }
}

TEST_CASE("zero-valued prefixes still change attention, empty ones do not") {
  ViTConfig c = tiny(1, 2);
  BackboneWeights w = perturbed(c, 7);
  SeededRng rng(8);
  Tape t;
  Var hn = t.constant(random_tensor(rng, {5, c.dim}));
  Var plain = attention_with_prefix(t, w.blocks[0], c.heads, hn, {});
  LayerPrefix zeros;
  append_kd_prompt(zeros, t.constant(Tensor({4, c.dim}, 0.0)));
  Var with_zero = attention_with_prefix(t, w.blocks[0], c.heads, hn, zeros);
  CHECK(max_abs_diff(plain.value(), with_zero.value()) > 1e-6);
  CHECK(max_abs_diff(plain.value(), attention_with_prefix(t, w.blocks[0], c.heads, hn, LayerPrefix{}).value()) == 0.0);
}

TEST_CASE("odd prompt length is rejected") {
  Tape t;
  Var p = t.constant(Tensor({3, 4}, 0.1));
  CHECK_THROWS_AS(split_prompt(p), ContractViolation);
  LayerPrefix lp;
  CHECK_THROWS_AS(append_cl_prompt(lp, p), ContractViolation);
}

TEST_CASE("forward_features matches the brute-force model with CL and KD prefixes") {
  ViTConfig c = tiny(3, 2);
  BackboneWeights w = perturbed(c, 21);
  SeededRng rng(22);
  auto img = random_image(c, rng.split("img"));
  Tensor cl = random_tensor(rng, {4, c.dim}), kd = random_tensor(rng, {2, c.dim}), tok = random_tensor(rng, {1, c.dim});

  Tape t;
  std::vector<LayerPrefix> pre(c.blocks);
  append_cl_prompt(pre[0], t.constant(cl));
  append_kd_prompt(pre[1], t.constant(kd));
  append_kd_prompt(pre[2], t.constant(kd));
  Features f = forward_features(t, w, img, pre, t.constant(tok), true);

  std::vector<oracle::Prefix> op(c.blocks);
  auto clm = oracle::from_tensor(cl), kdm = oracle::from_tensor(kd);
  op[0].cl_k = {clm[0], clm[1]}, op[0].cl_v = {clm[2], clm[3]};
  for (int b : {1, 2}) op[b].kd_k = {kdm[0]}, op[b].kd_v = {kdm[1]};
  auto ref = oracle::forward(w, img, op, oracle::from_tensor(tok)[0]);
  REQUIRE(ref.size() == 6);
  CHECK(max_diff({ref[0]}, f.class_embedding.value()) <= 1e-12);
  REQUIRE(f.kd_embedding);
  CHECK(max_diff({ref[5]}, f.kd_embedding->value()) <= 1e-12);
  REQUIRE(f.block_features.size() == 3);
  for (const Var& fb : f.block_features) CHECK(fb.value().rows() == c.tokens());

  // Toggling only the KD prompts moves the class embedding, exactly as the oracle predicts.
  Tape t2;
  std::vector<LayerPrefix> cl_only(c.blocks);
  append_cl_prompt(cl_only[0], t2.constant(cl));
  Features g = forward_features(t2, w, img, cl_only, t2.constant(tok));
  std::vector<oracle::Prefix> op2(c.blocks);
  op2[0] = op[0];
  auto ref2 = oracle::forward(w, img, op2, oracle::from_tensor(tok)[0]);
  CHECK(max_diff({ref2[0]}, g.class_embedding.value()) <= 1e-12);
  CHECK(max_abs_diff(g.class_embedding.value(), f.class_embedding.value()) > 1e-8);
}

TEST_CASE("KD token path: disabled and single-block cases") {
  ViTConfig c = tiny(2, 2);
  BackboneWeights w = perturbed(c, 31);
  auto img = random_image(c, SeededRng(32));
  Tape t;
  Features off = forward_features(t, w, img, {});
  CHECK_FALSE(off.kd_embedding);
  // The KD token joins after block 1, so it cannot affect the class token
  // through block 1 but does through block 2.
  Features on = forward_features(t, w, img, {}, t.constant(Tensor({1, c.dim}, 0.3)));
  CHECK(on.kd_embedding);

  ViTConfig c1 = tiny(1, 2);
  BackboneWeights w1 = perturbed(c1, 33);
  SeededRng trng(34);
  Tensor tok = random_tensor(trng, {1, c1.dim});
  Tape t1;
  Features f1 = forward_features(t1, w1, img, {}, t1.constant(tok));
  Features f0 = forward_features(t1, w1, img, {});
  CHECK(f1.class_embedding.value().bit_equal(f0.class_embedding.value()));
  auto expect = oracle::layer_norm(oracle::from_tensor(tok), w1.norm_g.value, w1.norm_b.value);
  CHECK(max_diff(expect, f1.kd_embedding->value()) <= 1e-12);
}

TEST_CASE("query_encode is deterministic and promptless") {
  ViTConfig c = tiny(2, 2);
  BackboneWeights w = perturbed(c, 41);
  auto img = random_image(c, SeededRng(42));
  auto q1 = query_encode(w, img);
  auto q2 = query_encode(w, img);
  CHECK(q1 == q2);
  Tape t;
  CHECK(Tensor::vector(q1).bit_equal(forward_features(t, w, img, {}).class_embedding.value().reshaped({c.dim})));
  double norm = 0.0;
  for (double v : q1) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("classify: masks and matrix-vector oracle") {
  SeededRng rng(51);
  ClassifierHead head = ClassifierHead::init(6, 7, HeadRole::Student, rng.split("h"), "head.");
  for (double& v : head.bias.value.values()) v = rng.normal();
  Tensor e = random_tensor(rng, {1, 6});
  Tape t;
  Var emb = t.constant(e);
  Var full = classify(t, emb, head);
  ClassMask all = ClassMask::all(7);
  CHECK(classify(t, emb, head, &all).value().bit_equal(full.value()));
  for (int k = 0; k < 7; ++k) {
    double s = head.bias.value[k];
    for (int j = 0; j < 6; ++j) s += e[j] * head.weight.value.at(j, k);
    CHECK(full.value()[k] == doctest::Approx(s).epsilon(1e-14));
  }
  for (int c = 0; c < 7; ++c) {
    ClassMask one = ClassMask::range(7, c, c + 1);
    const Tensor& z = classify(t, emb, head, &one).value();
    CHECK(std::max_element(z.values().begin(), z.values().end()) - z.values().begin() == c);
  }
  ClassMask none{std::vector<bool>(7, false)};
  CHECK_THROWS_AS(classify(t, emb, head, &none), ContractViolation);
  CHECK_THROWS_AS(classify(t, t.constant(Tensor({1, 5})), head), ContractViolation);
}

TEST_CASE("assert_frozen audits") {
  ViTConfig c = tiny(3, 2);
  BackboneWeights w = perturbed(c, 61);
  BackboneWeights before = w;
  CHECK(assert_frozen(before, w).pass);

  // A prompt-only Adam step leaves the backbone untouched.
  auto img = random_image(c, SeededRng(62));
  Parameter prompt("prompt", Tensor({2, c.dim}, 0.1));
  ClassifierHead head = ClassifierHead::init(c.dim, 5, HeadRole::Student, SeededRng(63), "head.");
  auto loss_for = [&](Tape& t) {
    std::vector<LayerPrefix> pre(c.blocks);
    append_cl_prompt(pre[0], t.param(prompt));
    Features f = forward_features(t, w, img, pre);
    return cross_entropy(classify(t, f.class_embedding, head), 2);
  };
  Adam adam;
  {
    Tape t;
    auto g = t.grad(loss_for(t));
    std::vector<Parameter*> ps{&prompt, &head.weight, &head.bias};
    for (Parameter* p : w.parameters()) ps.push_back(p);
    adam.step(ps, g);
  }
  CHECK(assert_frozen(before, w).pass);
  CHECK(w.checksum() == before.checksum());

  // Unfreezing the last block: three steps change exactly that block.
  w.unfreeze_last_block();
  for (int step = 0; step < 3; ++step) {
    Tape t;
    auto g = t.grad(loss_for(t));
    adam.step(w.parameters(), g);
  }
  FreezeAudit strict = assert_frozen(before, w);
  CHECK_FALSE(strict.pass);
  CHECK(strict.first_difference.starts_with("blocks.2."));
  CHECK(assert_frozen(before, w, true).pass);
  std::vector<std::string> expect;
  for (const Parameter* p : w.blocks[2].parameters()) expect.push_back(p->name);
  CHECK(strict.changed == expect);

  BackboneWeights other = BackboneWeights::init(tiny(2, 2), SeededRng(1));
  CHECK_THROWS_AS(assert_frozen(before, other), ContractViolation);
}

TEST_CASE("weights file round-trips bit-exactly") {
  BackboneWeights w = perturbed(tiny(2, 2), 71);
  auto entries = w.to_named();
  entries.push_back({"pool/keys", Tensor::matrix(2, 3, {1, -0.0, 1e-300, 3.5, -7, 0.1})});
  std::stringstream ss;
  write_weights(ss, entries);
  auto back = read_weights(ss);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].value.bit_equal(entries[i].value));
  }
  BackboneWeights r = BackboneWeights::from_named(back);
  CHECK(r.config == w.config);
  CHECK(r.checksum() == w.checksum());
  CHECK(r.frozen);

  std::stringstream bad("CDLX");
  CHECK_THROWS_AS(read_weights(bad), FormatError);
  std::stringstream tr;
  write_weights(tr, entries);
  std::stringstream cut(tr.str().substr(0, tr.str().size() - 3));
  CHECK_THROWS_AS(read_weights(cut), FormatError);
}

TEST_CASE("prompt gradients through the backbone match finite differences") {
  ViTConfig c = tiny(2, 2);
  BackboneWeights w = perturbed(c, 81);
  auto img = random_image(c, SeededRng(82));
  SeededRng rng(83);
  Parameter cl("cl", random_tensor(rng, {4, c.dim}, 0.3));
  Parameter kd("kd", random_tensor(rng, {2, c.dim}, 0.3));
  Parameter tok("tok", random_tensor(rng, {1, c.dim}, 0.3));
  ClassifierHead head = ClassifierHead::init(c.dim, 5, HeadRole::Student, rng.split("h"), "head.");
  LossBuilder build = [&](Tape& t) {
    std::vector<LayerPrefix> pre(c.blocks);
    append_cl_prompt(pre[0], t.param(cl));
    for (auto& p : pre) append_kd_prompt(p, t.param(kd));
    Features f = forward_features(t, w, img, pre, t.param(tok));
    return add(cross_entropy(classify(t, f.class_embedding, head), 1),
               cross_entropy(classify(t, *f.kd_embedding, head), 3));
  };
  std::vector<Parameter*> ps{&cl, &kd, &tok, &head.weight, &head.bias};
  auto r = finite_difference_check(build, ps, {.eps = 1e-5});
  CHECK(r.max_rel_error <= 1e-5);
  Tape t;
  auto g = t.grad(build(t));
  double norm = 0.0;
  for (double v : g.at(kd.id).values()) norm += v * v;
  CHECK(norm > 0.0);
}
