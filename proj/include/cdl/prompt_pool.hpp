#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdl/autodiff.hpp"
#include "cdl/rng.hpp"
#include "cdl/vit.hpp"
#include "cdl/weights_io.hpp"

namespace cdl {

enum class PoolMethod { L2P, DualPrompt, CODA };

std::string to_string(PoolMethod m);
PoolMethod parse_pool_method(const std::string& s);  // ConfigError on unknown names

struct PoolConfig {
  PoolMethod method = PoolMethod::CODA;
  // L2P and CODA: pool size M. DualPrompt: number of E-prompts (one per task).
  int components = 20;
  int top_k = 2;           // L2P only
  int length = 8;          // CL prompt length, even
  std::vector<int> layers; // 0-based blocks; DualPrompt E-prompt blocks
  std::vector<int> g_layers;  // DualPrompt G-prompt blocks
  int g_length = 0;

  // Desk-scale defaults sized to the backbone depth and task count.
  static PoolConfig desk(PoolMethod method, int blocks, int tasks);
  // Full-scale values for a 12-block ViT.
  static PoolConfig full_scale(PoolMethod method, int tasks);
  void validate(int blocks, int tasks) const;
  bool operator==(const PoolConfig&) const = default;
};

// Blocks receiving the G and E prompts when the full-scale placement (G in
// blocks 1-2, E in 3-5 of 12) is scaled to `blocks` blocks.
std::pair<std::vector<int>, std::vector<int>> dualprompt_layers(int blocks);

/// Learnable continual-learning state. CODA components are grouped into one
/// partition per task; only the current task's partition is trainable.
struct PromptPool {
  struct Partition {
    Parameter keys;       // [m x Dk]
    Parameter attention;  // [m x Dk]
    std::vector<Parameter> prompts;  // per covered layer, [m x L*D] (one flattened prompt per row)
  };

  PoolConfig config;
  int key_dim = 0;
  int dim = 0;
  int tasks = 1;
  int current_task = 0;

  // L2P: keys [M x Dk], prompts[layer][i] [L x D].
  // DualPrompt: keys are the E-keys [T x Dk], prompts[layer][t] the E-prompts.
  Parameter keys;
  std::vector<std::vector<Parameter>> prompts;
  std::vector<Parameter> g_prompts;  // DualPrompt, per G layer [L_g x D]
  std::vector<Partition> partitions; // CODA

  static PromptPool init(const PoolConfig& config, int key_dim, int dim, int tasks, SeededRng rng);

  // Moves to task t and updates trainability (CODA partitions).
  void begin_task(int t);
  // Number of CODA components in use after task t: partitions [0, t].
  int active_components(int t) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::uint64_t checksum() const;

  std::vector<NamedTensor> to_named(const std::string& prefix = "pool/") const;
  // Restores values into an already-initialized pool of the same layout.
  void load_named(std::span<const NamedTensor> entries, const std::string& prefix = "pool/");
};

struct Selection {
  std::vector<int> indices;           // L2P top-K, DualPrompt chosen E-prompt
  std::vector<double> similarities;   // γ(q, k_i) for every candidate key
  std::optional<Var> alpha;           // CODA weights [1 x m]
};

// Indices of the K largest cosine similarities; ties go to the lower index.
Selection l2p_select(std::span<const double> query, const Tensor& keys, int k);

// Σ (1 − γ(q, k)) over the selected key rows.
Var l2p_key_loss(Tape& tape, std::span<const double> query, std::span<const Var> selected_keys);

// Train time: E-prompt of `task_id`. Test time (no task id): nearest of the
// first `seen` E-keys.
Selection dualprompt_select(std::span<const double> query, const Tensor& e_keys, std::optional<int> task_id,
                            int seen);

// α_i = γ(q ⊙ A_i, k_i) for every row of `keys`/`attention`, as a [1 x m] row.
Var coda_weights(Tape& tape, std::span<const double> query, Var keys, Var attention);
std::vector<double> coda_weights(std::span<const double> query, const Tensor& keys, const Tensor& attention);

// Σ α_i P_i for flattened prompts [m x L*D]; returns [length x dim].
Var coda_compose(Var alpha, Var prompts, int length, int dim);

// ‖B Bᵀ − I‖_F with one row of B per component.
Var orthogonality_loss(Var b);

// L_pool: λ·Σ(1 − γ) over the selected keys (L2P, DualPrompt) or
// λ·(L_or(P) + L_or(K) + L_or(A)) over the components in use (CODA).
Var pool_loss(Tape& tape, const PromptPool& pool, std::span<const double> query, const Selection& selection,
              int task, double lambda);

struct PoolForward {
  std::vector<LayerPrefix> prefixes;  // one per block
  std::optional<Var> loss;            // λ-weighted pool loss, training only
  Selection selection;
};

/// Builds the CL prefixes for one sample. `task` is the task being trained
/// (training) or the last task trained (evaluation).
PoolForward apply_pool(Tape& tape, const PromptPool& pool, std::span<const double> query, int task, bool training,
                       double lambda, int blocks);

}  // namespace cdl
