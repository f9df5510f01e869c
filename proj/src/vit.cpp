#include "cdl/vit.hpp"

#include <cmath>

#include "cdl/error.hpp"

namespace cdl {

void ViTConfig::validate() const {
  CDL_REQUIRE(image_size > 0 && channels > 0 && patch > 0, "ViT: sizes must be positive");
  CDL_REQUIRE(image_size % patch == 0, "ViT: image size must be divisible by the patch size");
  CDL_REQUIRE(dim > 0 && heads > 0 && dim % heads == 0, "ViT: embed dim must be divisible by heads");
  CDL_REQUIRE(blocks >= 1, "ViT: need at least one block");
  CDL_REQUIRE(mlp_ratio >= 1, "ViT: mlp ratio must be >= 1");
  CDL_REQUIRE(num_classes >= 1, "ViT: need at least one class");
}

ViTConfig ViTConfig::student_default() { return ViTConfig{}; }

ViTConfig ViTConfig::teacher_default() {
  ViTConfig c;
  c.dim = 64;
  c.blocks = 6;
  return c;
}

std::vector<Parameter*> BlockWeights::parameters() {
  return {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &w1, &b1, &w2, &b2};
}

std::vector<const Parameter*> BlockWeights::parameters() const {
  return {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &w1, &b1, &w2, &b2};
}

namespace {

Parameter xavier(const std::string& name, int in, int out, SeededRng& rng) {
  const double limit = std::sqrt(6.0 / (in + out));
  Tensor t({in, out});
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return Parameter(name, std::move(t));
}

Parameter gaussian(const std::string& name, Shape shape, double stddev, SeededRng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return Parameter(name, std::move(t));
}

Parameter filled(const std::string& name, int n, double value) { return Parameter(name, Tensor({n}, value)); }

}  // namespace

BackboneWeights BackboneWeights::init(const ViTConfig& config, SeededRng rng) {
  config.validate();
  BackboneWeights w;
  w.config = config;
  const int d = config.dim, hidden = config.dim * config.mlp_ratio;
  w.patch_w = xavier("patch_w", config.patch_dim(), d, rng);
  w.patch_b = filled("patch_b", d, 0.0);
  w.cls_token = gaussian("cls_token", {1, d}, 0.02, rng);
  w.pos_embed = gaussian("pos_embed", {config.tokens(), d}, 0.02, rng);
  for (int b = 0; b < config.blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    BlockWeights bw{filled(p + "ln1_g", d, 1.0), filled(p + "ln1_b", d, 0.0),
                    xavier(p + "wq", d, d, rng),  filled(p + "bq", d, 0.0),
                    xavier(p + "wk", d, d, rng),  filled(p + "bk", d, 0.0),
                    xavier(p + "wv", d, d, rng),  filled(p + "bv", d, 0.0),
                    xavier(p + "wo", d, d, rng),  filled(p + "bo", d, 0.0),
                    filled(p + "ln2_g", d, 1.0), filled(p + "ln2_b", d, 0.0),
                    xavier(p + "w1", d, hidden, rng), filled(p + "b1", hidden, 0.0),
                    xavier(p + "w2", hidden, d, rng), filled(p + "b2", d, 0.0)};
    w.blocks.push_back(std::move(bw));
  }
  w.norm_g = filled("norm_g", d, 1.0);
  w.norm_b = filled("norm_b", d, 0.0);
  return w;
}

std::vector<Parameter*> BackboneWeights::parameters() {
  std::vector<Parameter*> out{&patch_w, &patch_b, &cls_token, &pos_embed};
  for (auto& b : blocks)
    for (Parameter* p : b.parameters()) out.push_back(p);
  out.push_back(&norm_g);
  out.push_back(&norm_b);
  return out;
}

std::vector<const Parameter*> BackboneWeights::parameters() const {
  std::vector<const Parameter*> out{&patch_w, &patch_b, &cls_token, &pos_embed};
  for (const auto& b : blocks)
    for (const Parameter* p : b.parameters()) out.push_back(p);
  out.push_back(&norm_g);
  out.push_back(&norm_b);
  return out;
}

void BackboneWeights::set_frozen(bool f) {
  frozen = f;
  for (Parameter* p : parameters()) p->trainable = !f;
}

void BackboneWeights::unfreeze_last_block() {
  set_frozen(true);
  frozen = false;
  for (Parameter* p : blocks.back().parameters()) p->trainable = true;
}

std::uint64_t BackboneWeights::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter* p : parameters()) h = cdl::checksum(p->value, h);
  return h;
}

std::vector<NamedTensor> BackboneWeights::to_named(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  const ViTConfig& c = config;
  out.push_back({prefix + "config", Tensor::vector({double(c.image_size), double(c.channels), double(c.patch),
                                                     double(c.dim), double(c.heads), double(c.blocks),
                                                     double(c.mlp_ratio), double(c.num_classes)})});
  for (const Parameter* p : parameters()) out.push_back({prefix + p->name, p->value});
  return out;
}

BackboneWeights BackboneWeights::from_named(std::span<const NamedTensor> entries, const std::string& prefix) {
  const Tensor& cfg = find_entry(entries, prefix + "config");
  if (cfg.size() != 8) throw FormatError("backbone config entry must have 8 values");
  ViTConfig c;
  c.image_size = static_cast<int>(cfg[0]);
  c.channels = static_cast<int>(cfg[1]);
  c.patch = static_cast<int>(cfg[2]);
  c.dim = static_cast<int>(cfg[3]);
  c.heads = static_cast<int>(cfg[4]);
  c.blocks = static_cast<int>(cfg[5]);
  c.mlp_ratio = static_cast<int>(cfg[6]);
  c.num_classes = static_cast<int>(cfg[7]);
  BackboneWeights w = init(c, SeededRng(0));
  for (Parameter* p : w.parameters()) {
    const Tensor& v = find_entry(entries, prefix + p->name);
    if (v.shape() != p->value.shape())
      throw FormatError("shape mismatch for " + prefix + p->name + ": " + shape_str(v.shape()));
    p->value = v;
  }
  w.set_frozen(true);
  return w;
}

std::pair<Var, Var> split_prompt(Var prompt) {
  const int len = prompt.value().rows();
  CDL_REQUIRE(len % 2 == 0, "prompt length must be even, got " + std::to_string(len));
  return {slice_rows(prompt, 0, len / 2), slice_rows(prompt, len / 2, len)};
}

namespace {

void append_pair(std::optional<Var>& key, std::optional<Var>& value, Var prompt) {
  auto [k, v] = split_prompt(prompt);
  key = key ? concat_rows({*key, k}) : k;
  value = value ? concat_rows({*value, v}) : v;
}

}  // namespace

void append_cl_prompt(LayerPrefix& prefix, Var prompt) { append_pair(prefix.cl_key, prefix.cl_value, prompt); }
void append_kd_prompt(LayerPrefix& prefix, Var prompt) { append_pair(prefix.kd_key, prefix.kd_value, prompt); }

Tensor extract_patches(const ViTConfig& c, std::span<const double> image) {
  CDL_REQUIRE(static_cast<int>(image.size()) == c.channels * c.image_size * c.image_size,
              "image size mismatch: got " + std::to_string(image.size()) + " values");
  const int g = c.grid(), p = c.patch, s = c.image_size;
  Tensor out({c.patches(), c.patch_dim()});
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      double* row = out.data() + static_cast<std::size_t>(gy * g + gx) * c.patch_dim();
      for (int ch = 0; ch < c.channels; ++ch)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            *row++ = image[static_cast<std::size_t>(ch) * s * s + static_cast<std::size_t>(gy * p + y) * s + gx * p + x];
    }
  return out;
}

Var patch_embed(Tape& tape, const BackboneWeights& w, std::span<const double> image) {
  Var patches = tape.constant(extract_patches(w.config, image));
  Var tokens = add_row(matmul(patches, tape.param(w.patch_w)), tape.param(w.patch_b));
  Var seq = concat_rows({tape.param(w.cls_token), tokens});
  return add(seq, tape.param(w.pos_embed));
}

Var attention_with_prefix(Tape& tape, const BlockWeights& block, int heads, Var hn, const LayerPrefix& prefix,
                          std::vector<Var>* probs) {
  const int d = hn.value().cols();
  CDL_REQUIRE(d % heads == 0, "attention: dim not divisible by heads");
  for (const auto* v : {&prefix.cl_key, &prefix.cl_value, &prefix.kd_key, &prefix.kd_value})
    CDL_REQUIRE(!*v || (*v)->value().cols() == d, "prefix dim must equal the model dim");
  CDL_REQUIRE(prefix.cl_key.has_value() == prefix.cl_value.has_value() &&
                  prefix.kd_key.has_value() == prefix.kd_value.has_value(),
              "prefix key/value halves must come in pairs");

  Var q = add_row(matmul(hn, tape.param(block.wq)), tape.param(block.bq));
  Var k = add_row(matmul(hn, tape.param(block.wk)), tape.param(block.bk));
  Var v = add_row(matmul(hn, tape.param(block.wv)), tape.param(block.bv));

  std::vector<Var> ks, vs;
  if (prefix.cl_key) ks.push_back(*prefix.cl_key), vs.push_back(*prefix.cl_value);
  ks.push_back(k), vs.push_back(v);
  if (prefix.kd_key) ks.push_back(*prefix.kd_key), vs.push_back(*prefix.kd_value);
  if (ks.size() > 1) {
    k = concat_rows(ks);
    v = concat_rows(vs);
  }

  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    Var p = softmax(scale(matmul_nt(qh, kh), inv_sqrt));
    if (probs) probs->push_back(p);
    outs.push_back(matmul(p, vh));
  }
  Var merged = heads == 1 ? outs[0] : concat_cols(outs);
  return add_row(matmul(merged, tape.param(block.wo)), tape.param(block.bo));
}

Var transformer_block(Tape& tape, const BlockWeights& block, int heads, Var h, const LayerPrefix& prefix) {
  Var hn = layer_norm(h, tape.param(block.ln1_g), tape.param(block.ln1_b));
  h = add(h, attention_with_prefix(tape, block, heads, hn, prefix));
  Var hn2 = layer_norm(h, tape.param(block.ln2_g), tape.param(block.ln2_b));
  Var mlp = add_row(matmul(gelu(add_row(matmul(hn2, tape.param(block.w1)), tape.param(block.b1))),
                           tape.param(block.w2)),
                    tape.param(block.b2));
  return add(h, mlp);
}

Features forward_features(Tape& tape, const BackboneWeights& w, std::span<const double> image,
                          std::span<const LayerPrefix> prefixes, std::optional<Var> kd_token,
                          bool collect_features) {
  const ViTConfig& c = w.config;
  CDL_REQUIRE(prefixes.empty() || static_cast<int>(prefixes.size()) == c.blocks,
              "prefix set must be empty or cover every block");
  if (kd_token) CDL_REQUIRE(kd_token->value().rows() == 1 && kd_token->value().cols() == c.dim,
                            "KD token must be a [1 x D] row");
  static const LayerPrefix kEmpty;
  const int n_tokens = c.tokens();

  Features f;
  Var h = patch_embed(tape, w, image);
  for (int b = 0; b < c.blocks; ++b) {
    h = transformer_block(tape, w.blocks[b], c.heads, h, prefixes.empty() ? kEmpty : prefixes[b]);
    if (collect_features) f.block_features.push_back(kd_token && b > 0 ? slice_rows(h, 0, n_tokens) : h);
    if (b == 0 && kd_token) h = concat_rows({h, *kd_token});
  }
  Var out = layer_norm(h, tape.param(w.norm_g), tape.param(w.norm_b));
  f.class_embedding = slice_rows(out, 0, 1);
  if (kd_token) f.kd_embedding = slice_rows(out, n_tokens, n_tokens + 1);
  return f;
}

std::vector<double> query_encode(const BackboneWeights& w, std::span<const double> image) {
  Tape tape;
  Features f = forward_features(tape, w, image, {});
  return f.class_embedding.value().values();
}

ClassifierHead ClassifierHead::init(int dim, int classes, HeadRole role, SeededRng rng, const std::string& prefix) {
  ClassifierHead h;
  h.weight = xavier(prefix + "weight", dim, classes, rng);
  h.bias = filled(prefix + "bias", classes, 0.0);
  h.role = role;
  return h;
}

ClassMask ClassMask::range(int classes, int begin, int end) {
  CDL_REQUIRE(0 <= begin && begin <= end && end <= classes, "class mask range out of bounds");
  ClassMask m{std::vector<bool>(classes, false)};
  for (int i = begin; i < end; ++i) m.active[i] = true;
  return m;
}

int ClassMask::count() const {
  int n = 0;
  for (bool b : active) n += b;
  return n;
}

Var classify(Tape& tape, Var embedding, const ClassifierHead& head, const ClassMask* mask) {
  CDL_REQUIRE(embedding.value().cols() == head.weight.value.rows(),
              "classifier: embedding dim does not match the head");
  Var logits = add_row(matmul(embedding, tape.param(head.weight)), tape.param(head.bias));
  if (!mask) return logits;
  const int c = head.classes();
  CDL_REQUIRE(static_cast<int>(mask->active.size()) == c, "classifier: mask width mismatch");
  CDL_REQUIRE(mask->count() > 0, "classifier: empty class mask");
  Tensor offset({1, c});
  for (int i = 0; i < c; ++i) offset[i] = mask->active[i] ? 0.0 : kMaskedLogit;
  return add(logits, tape.constant(std::move(offset)));
}

FreezeAudit assert_frozen(const BackboneWeights& before, const BackboneWeights& after, bool allow_last_block) {
  CDL_REQUIRE(before.config == after.config, "assert_frozen: architecture mismatch");
  auto a = before.parameters();
  auto b = after.parameters();
  CDL_REQUIRE(a.size() == b.size(), "assert_frozen: parameter count mismatch");
  const std::string last = "blocks." + std::to_string(before.config.blocks - 1) + ".";
  FreezeAudit audit;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CDL_REQUIRE(a[i]->name == b[i]->name && a[i]->value.shape() == b[i]->value.shape(),
                "assert_frozen: architecture mismatch at " + a[i]->name);
    if (a[i]->value.bit_equal(b[i]->value)) continue;
    audit.changed.push_back(a[i]->name);
    if (allow_last_block && a[i]->name.starts_with(last)) continue;
    if (audit.pass) audit.first_difference = a[i]->name;
    audit.pass = false;
  }
  return audit;
}

}  // namespace cdl
