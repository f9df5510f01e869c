#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdl/autodiff.hpp"
#include "cdl/rng.hpp"
#include "cdl/weights_io.hpp"

namespace cdl {

struct ViTConfig {
  int image_size = 16;
  int channels = 3;
  int patch = 4;
  int dim = 32;
  int heads = 4;
  int blocks = 4;
  int mlp_ratio = 4;
  int num_classes = 30;

  int grid() const { return image_size / patch; }
  int patches() const { return grid() * grid(); }
  int tokens() const { return patches() + 1; }  // + class token
  int patch_dim() const { return channels * patch * patch; }
  int head_dim() const { return dim / heads; }
  void validate() const;

  static ViTConfig student_default();
  static ViTConfig teacher_default();
  bool operator==(const ViTConfig&) const = default;
};

struct BlockWeights {
  Parameter ln1_g, ln1_b;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_g, ln2_b;
  Parameter w1, b1, w2, b2;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

/// Transformer body shared by teacher and student models. Trainability is
/// controlled through the `frozen` flag and, for the ablation, the last block.
struct BackboneWeights {
  ViTConfig config;
  Parameter patch_w, patch_b;
  Parameter cls_token;
  Parameter pos_embed;
  std::vector<BlockWeights> blocks;
  Parameter norm_g, norm_b;
  bool frozen = false;

  static BackboneWeights init(const ViTConfig& config, SeededRng rng);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void set_frozen(bool f);
  // Freezes everything except the last block (unfreeze-last-block ablation).
  void unfreeze_last_block();
  std::uint64_t checksum() const;

  // CDLW entries under `prefix` ("backbone/" by convention); the config is
  // stored as an 8-element array named prefix + "config".
  std::vector<NamedTensor> to_named(const std::string& prefix = "backbone/") const;
  static BackboneWeights from_named(std::span<const NamedTensor> entries, const std::string& prefix = "backbone/");
};

/// Prefix rows appended to one layer's attention keys/values. CL prefixes go
/// in front of the token keys, KD prefixes after them.
struct LayerPrefix {
  std::optional<Var> cl_key, cl_value;
  std::optional<Var> kd_key, kd_value;
};

// Splits an [L x D] prompt into key (first L/2 rows) and value halves.
std::pair<Var, Var> split_prompt(Var prompt);

// Appends key/value halves of `prompt` to the CL (or KD) slot of `prefix`.
void append_cl_prompt(LayerPrefix& prefix, Var prompt);
void append_kd_prompt(LayerPrefix& prefix, Var prompt);

// Image [C x H x W] (channel-major) to row-major patch matrix [N x C*P*P].
Tensor extract_patches(const ViTConfig& config, std::span<const double> image);

// Class token plus patch embeddings with positional embeddings: [N+1 x D].
Var patch_embed(Tape& tape, const BackboneWeights& w, std::span<const double> image);

// Multi-head self attention over the normalized tokens `hn` with prefixes
// concatenated onto K and V. Output has as many rows as `hn`. When `probs`
// is given, the per-head attention weight matrices are appended to it.
Var attention_with_prefix(Tape& tape, const BlockWeights& block, int heads, Var hn, const LayerPrefix& prefix,
                          std::vector<Var>* probs = nullptr);

// One pre-norm transformer block.
Var transformer_block(Tape& tape, const BlockWeights& block, int heads, Var h, const LayerPrefix& prefix);

struct Features {
  Var class_embedding;                // [1 x D], after the final norm
  std::optional<Var> kd_embedding;    // [1 x D] when a KD token was inserted
  std::vector<Var> block_features;    // F_j: [N+1 x D] after block j (no KD token)
};

/// Full forward pass. `prefixes` is empty or has one entry per block. A KD
/// token, when given, is appended after the first block's output.
Features forward_features(Tape& tape, const BackboneWeights& w, std::span<const double> image,
                          std::span<const LayerPrefix> prefixes, std::optional<Var> kd_token = std::nullopt,
                          bool collect_features = false);

// Class embedding of a promptless pass through a frozen backbone.
std::vector<double> query_encode(const BackboneWeights& w, std::span<const double> image);

enum class HeadRole { Student, Kd, Teacher, Pretrain };

struct ClassifierHead {
  Parameter weight;  // [D x C]
  Parameter bias;    // [C]
  HeadRole role = HeadRole::Student;

  static ClassifierHead init(int dim, int classes, HeadRole role, SeededRng rng, const std::string& prefix);
  int classes() const { return weight.value.cols(); }
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
  std::vector<const Parameter*> parameters() const { return {&weight, &bias}; }
};

// Added to inactive logits during training.
inline constexpr double kMaskedLogit = -1e9;

/// Active-class mask over a head's output width.
struct ClassMask {
  std::vector<bool> active;
  static ClassMask all(int classes) { return {std::vector<bool>(classes, true)}; }
  static ClassMask range(int classes, int begin, int end);
  int count() const;
};

// Affine head on an embedding; inactive classes get kMaskedLogit added.
Var classify(Tape& tape, Var embedding, const ClassifierHead& head, const ClassMask* mask = nullptr);

struct FreezeAudit {
  bool pass = true;
  std::string first_difference;  // empty on pass
  std::vector<std::string> changed;
};

// Bitwise comparison of two backbones. With `allow_last_block`, changes
// confined to the last block still pass.
FreezeAudit assert_frozen(const BackboneWeights& before, const BackboneWeights& after, bool allow_last_block = false);

}  // namespace cdl
