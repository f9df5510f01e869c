#include "cdl/prompt_pool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdl/error.hpp"

namespace cdl {

std::string to_string(PoolMethod m) {
  switch (m) {
    case PoolMethod::L2P: return "l2p";
    case PoolMethod::DualPrompt: return "dualprompt";
    case PoolMethod::CODA: return "coda";
  }
  return "?";
}

PoolMethod parse_pool_method(const std::string& s) {
  if (s == "l2p") return PoolMethod::L2P;
  if (s == "dualprompt") return PoolMethod::DualPrompt;
  if (s == "coda") return PoolMethod::CODA;
  throw ConfigError("unknown pool method '" + s + "' (expected l2p, dualprompt or coda)");
}

std::pair<std::vector<int>, std::vector<int>> dualprompt_layers(int blocks) {
  CDL_REQUIRE(blocks >= 2, "DualPrompt needs at least two blocks");
  const double s = blocks / 12.0;
  const int g_end = std::max(1, static_cast<int>(std::lround(2 * s)));
  const int e_end = std::min(blocks, std::max(g_end + 1, static_cast<int>(std::lround(5 * s))));
  std::vector<int> g, e;
  for (int b = 0; b < g_end; ++b) g.push_back(b);
  for (int b = g_end; b < e_end; ++b) e.push_back(b);
  return {g, e};
}

PoolConfig PoolConfig::desk(PoolMethod method, int blocks, int tasks) {
  PoolConfig c;
  c.method = method;
  switch (method) {
    case PoolMethod::L2P:
      c.components = 10;
      c.top_k = 2;
      c.length = 20;
      c.layers = {0};
      break;
    case PoolMethod::DualPrompt: {
      c.components = tasks;
      c.length = 20;
      c.g_length = 20;
      std::tie(c.g_layers, c.layers) = dualprompt_layers(blocks);
      break;
    }
    case PoolMethod::CODA:
      c.components = 4 * tasks;
      c.length = 8;
      for (int b = 0; b < std::min(5, blocks); ++b) c.layers.push_back(b);
      break;
  }
  return c;
}

PoolConfig PoolConfig::full_scale(PoolMethod method, int tasks) {
  PoolConfig c = desk(method, 12, tasks);
  switch (method) {
    case PoolMethod::L2P: c.components = 30; break;
    case PoolMethod::DualPrompt: c.components = 10; break;
    case PoolMethod::CODA: c.components = 100; break;
  }
  return c;
}

void PoolConfig::validate(int blocks, int tasks) const {
  auto check_layers = [&](const std::vector<int>& ls, const char* what) {
    for (int l : ls)
      if (l < 0 || l >= blocks) throw ConfigError(std::string(what) + " layer " + std::to_string(l + 1) + " outside 1.." +
                                                  std::to_string(blocks));
  };
  if (length <= 0 || length % 2) throw ConfigError("CL prompt length must be positive and even");
  check_layers(layers, "prompt");
  if (layers.empty()) throw ConfigError("prompt pool covers no layers");
  switch (method) {
    case PoolMethod::L2P:
      if (top_k < 1 || top_k > components) throw ConfigError("L2P needs 1 <= K <= M");
      break;
    case PoolMethod::DualPrompt:
      if (components < tasks) throw ConfigError("DualPrompt needs one E-prompt per task");
      if (g_length <= 0 || g_length % 2) throw ConfigError("G-prompt length must be positive and even");
      check_layers(g_layers, "G-prompt");
      break;
    case PoolMethod::CODA:
      if (components < tasks || components % tasks)
        throw ConfigError("CODA pool size must be a positive multiple of the task count");
      break;
  }
}

namespace {

Parameter uniform_param(const std::string& name, Shape shape, double limit, SeededRng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return Parameter(name, std::move(t));
}

Parameter normal_param(const std::string& name, Shape shape, SeededRng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, 0.02);
  return Parameter(name, std::move(t));
}

}  // namespace

PromptPool PromptPool::init(const PoolConfig& config, int key_dim, int dim, int tasks, SeededRng rng) {
  CDL_REQUIRE(key_dim > 0 && dim > 0 && tasks > 0, "pool dims must be positive");
  PromptPool p;
  p.config = config;
  p.key_dim = key_dim;
  p.dim = dim;
  p.tasks = tasks;
  const double lim = 1.0 / std::sqrt(static_cast<double>(key_dim));
  const int n_layers = static_cast<int>(config.layers.size());
  if (config.method == PoolMethod::CODA) {
    const int m = config.components / tasks;
    for (int t = 0; t < tasks; ++t) {
      const std::string base = "coda." + std::to_string(t) + ".";
      Partition part{uniform_param(base + "keys", {m, key_dim}, lim, rng),
                     uniform_param(base + "attention", {m, key_dim}, lim, rng),
                     {}};
      for (int l = 0; l < n_layers; ++l)
        part.prompts.push_back(normal_param(base + "prompts." + std::to_string(l), {m, config.length * dim}, rng));
      p.partitions.push_back(std::move(part));
    }
  } else {
    p.keys = uniform_param("keys", {config.components, key_dim}, lim, rng);
    p.prompts.resize(n_layers);
    for (int l = 0; l < n_layers; ++l)
      for (int i = 0; i < config.components; ++i)
        p.prompts[l].push_back(
            normal_param("prompts." + std::to_string(l) + "." + std::to_string(i), {config.length, dim}, rng));
    for (std::size_t l = 0; l < config.g_layers.size(); ++l)
      p.g_prompts.push_back(normal_param("g." + std::to_string(l), {config.g_length, dim}, rng));
  }
  p.begin_task(0);
  return p;
}

void PromptPool::begin_task(int t) {
  CDL_REQUIRE(t >= 0 && t < tasks, "task index out of range");
  current_task = t;
  for (int i = 0; i < static_cast<int>(partitions.size()); ++i) {
    Partition& part = partitions[i];
    part.keys.trainable = part.attention.trainable = (i == t);
    for (Parameter& pr : part.prompts) pr.trainable = (i == t);
  }
}

int PromptPool::active_components(int t) const {
  CDL_REQUIRE(config.method == PoolMethod::CODA, "active_components is CODA only");
  return (t + 1) * (config.components / tasks);
}

std::vector<Parameter*> PromptPool::parameters() {
  std::vector<Parameter*> out;
  for (auto* p : std::as_const(*this).parameters()) out.push_back(const_cast<Parameter*>(p));
  return out;
}

std::vector<const Parameter*> PromptPool::parameters() const {
  std::vector<const Parameter*> out;
  if (config.method == PoolMethod::CODA) {
    for (const Partition& part : partitions) {
      out.push_back(&part.keys);
      out.push_back(&part.attention);
      for (const Parameter& pr : part.prompts) out.push_back(&pr);
    }
    return out;
  }
  out.push_back(&keys);
  for (const auto& layer : prompts)
    for (const Parameter& pr : layer) out.push_back(&pr);
  for (const Parameter& g : g_prompts) out.push_back(&g);
  return out;
}

std::uint64_t PromptPool::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter* p : parameters()) h = cdl::checksum(p->value, h);
  return h;
}

std::vector<NamedTensor> PromptPool::to_named(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const Parameter* p : parameters()) out.push_back({prefix + p->name, p->value});
  return out;
}

void PromptPool::load_named(std::span<const NamedTensor> entries, const std::string& prefix) {
  for (Parameter* p : parameters()) {
    const Tensor& v = find_entry(entries, prefix + p->name);
    if (v.shape() != p->value.shape()) throw FormatError("shape mismatch for " + prefix + p->name);
    p->value = v;
  }
}

Selection l2p_select(std::span<const double> query, const Tensor& keys, int k) {
  const int m = keys.rows();
  CDL_REQUIRE(k >= 1 && k <= m, "L2P: need 1 <= K <= M, got K=" + std::to_string(k));
  Selection s;
  for (int i = 0; i < m; ++i)
    s.similarities.push_back(cosine_similarity(query, keys.span().subspan(static_cast<std::size_t>(i) * keys.cols(), keys.cols())));
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s.similarities[a] > s.similarities[b]; });
  s.indices.assign(order.begin(), order.begin() + k);
  return s;
}

Var l2p_key_loss(Tape& tape, std::span<const double> query, std::span<const Var> selected_keys) {
  CDL_REQUIRE(!selected_keys.empty(), "key loss over an empty selection");
  Var q = tape.constant(Tensor::vector({query.begin(), query.end()}));
  std::vector<Var> terms;
  for (const Var& k : selected_keys) terms.push_back(cosine_similarity(q, k));
  Var total = sum(concat_cols(terms));
  return add_constant(scale(total, -1.0), static_cast<double>(selected_keys.size()));
}

Selection dualprompt_select(std::span<const double> query, const Tensor& e_keys, std::optional<int> task_id,
                            int seen) {
  Selection s;
  const int n = e_keys.rows();
  if (task_id) {
    CDL_REQUIRE(*task_id >= 0 && *task_id < n, "DualPrompt: unknown task id " + std::to_string(*task_id));
    s.indices = {*task_id};
    return s;
  }
  CDL_REQUIRE(seen >= 1 && seen <= n, "DualPrompt: seen task count out of range");
  int best = 0;
  for (int i = 0; i < seen; ++i) {
    s.similarities.push_back(cosine_similarity(query, e_keys.span().subspan(static_cast<std::size_t>(i) * e_keys.cols(), e_keys.cols())));
    if (s.similarities[i] > s.similarities[best]) best = i;
  }
  s.indices = {best};
  return s;
}

Var coda_weights(Tape& tape, std::span<const double> query, Var keys, Var attention) {
  const int m = keys.value().rows(), dk = keys.value().cols();
  CDL_REQUIRE(static_cast<int>(query.size()) == dk, "CODA: query dim does not match the keys");
  CDL_REQUIRE(attention.shape() == keys.shape(), "CODA: attention and key shapes differ");
  Var q = tape.constant(Tensor({1, dk}, std::vector<double>(query.begin(), query.end())));
  std::vector<Var> alphas;
  alphas.reserve(m);
  for (int i = 0; i < m; ++i)
    alphas.push_back(cosine_similarity(mul(q, slice_rows(attention, i, i + 1)), slice_rows(keys, i, i + 1)));
  return concat_cols(alphas);
}

std::vector<double> coda_weights(std::span<const double> query, const Tensor& keys, const Tensor& attention) {
  CDL_REQUIRE(keys.same_shape(attention), "CODA: attention and key shapes differ");
  const int m = keys.rows(), dk = keys.cols();
  CDL_REQUIRE(static_cast<int>(query.size()) == dk, "CODA: query dim does not match the keys");
  std::vector<double> alpha(m), masked(dk);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < dk; ++j) masked[j] = query[j] * attention.at(i, j);
    alpha[i] = cosine_similarity(masked, keys.span().subspan(static_cast<std::size_t>(i) * dk, dk));
  }
  return alpha;
}

Var coda_compose(Var alpha, Var prompts, int length, int dim) {
  CDL_REQUIRE(alpha.value().cols() == prompts.value().rows(), "CODA: weight count does not match the components");
  CDL_REQUIRE(prompts.value().cols() == length * dim, "CODA: prompt width does not match length x dim");
  return reshape(matmul(alpha, prompts), {length, dim});
}

Var orthogonality_loss(Var b) {
  const int m = b.value().rows();
  Tensor eye({m, m});
  for (int i = 0; i < m; ++i) eye.at(i, i) = 1.0;
  Var diff = sub(matmul_nt(b, b), b.tape->constant(std::move(eye)));
  return sqrt(sum(mul(diff, diff)));
}

namespace {

struct CodaVars {
  Var keys, attention;
  std::vector<Var> prompts;  // per covered layer
};

CodaVars coda_vars(Tape& tape, const PromptPool& pool, int task) {
  CDL_REQUIRE(task >= 0 && task < pool.tasks, "CODA: task index out of range");
  std::vector<Var> ks, as;
  std::vector<std::vector<Var>> ps(pool.config.layers.size());
  for (int p = 0; p <= task; ++p) {
    const auto& part = pool.partitions[p];
    ks.push_back(tape.param(part.keys));
    as.push_back(tape.param(part.attention));
    for (std::size_t l = 0; l < ps.size(); ++l) ps[l].push_back(tape.param(part.prompts[l]));
  }
  auto cat = [](const std::vector<Var>& v) { return v.size() == 1 ? v[0] : concat_rows(v); };
  CodaVars out{cat(ks), cat(as), {}};
  for (const auto& l : ps) out.prompts.push_back(cat(l));
  return out;
}

Var key_loss_for(Tape& tape, const PromptPool& pool, std::span<const double> query, const Selection& sel) {
  Var keys = tape.param(pool.keys);
  std::vector<Var> rows;
  for (int i : sel.indices) rows.push_back(slice_rows(keys, i, i + 1));
  return l2p_key_loss(tape, query, rows);
}

Var coda_pool_loss(const CodaVars& v) {
  Var total = add(orthogonality_loss(v.keys), orthogonality_loss(v.attention));
  for (const Var& p : v.prompts) total = add(total, orthogonality_loss(p));
  return total;
}

}  // namespace

Var pool_loss(Tape& tape, const PromptPool& pool, std::span<const double> query, const Selection& selection,
              int task, double lambda) {
  CDL_REQUIRE(lambda >= 0.0, "pool loss weight must be non-negative");
  if (pool.config.method == PoolMethod::CODA) {
    CDL_REQUIRE(selection.alpha.has_value(), "pool_loss: CODA selection expected");
    return scale(coda_pool_loss(coda_vars(tape, pool, task)), lambda);
  }
  CDL_REQUIRE(!selection.alpha.has_value() && !selection.indices.empty(), "pool_loss: key selection expected");
  return scale(key_loss_for(tape, pool, query, selection), lambda);
}

PoolForward apply_pool(Tape& tape, const PromptPool& pool, std::span<const double> query, int task, bool training,
                       double lambda, int blocks) {
  CDL_REQUIRE(static_cast<int>(query.size()) == pool.key_dim, "query dim does not match the pool keys");
  PoolForward out;
  out.prefixes.resize(blocks);
  const auto& layers = pool.config.layers;
  switch (pool.config.method) {
    case PoolMethod::L2P: {
      out.selection = l2p_select(query, pool.keys.value, pool.config.top_k);
      for (std::size_t l = 0; l < layers.size(); ++l)
        for (int i : out.selection.indices) append_cl_prompt(out.prefixes[layers[l]], tape.param(pool.prompts[l][i]));
      if (training) out.loss = scale(key_loss_for(tape, pool, query, out.selection), lambda);
      break;
    }
    case PoolMethod::DualPrompt: {
      out.selection = training ? dualprompt_select(query, pool.keys.value, task, task + 1)
                               : dualprompt_select(query, pool.keys.value, std::nullopt, task + 1);
      for (std::size_t l = 0; l < pool.config.g_layers.size(); ++l)
        append_cl_prompt(out.prefixes[pool.config.g_layers[l]], tape.param(pool.g_prompts[l]));
      const int e = out.selection.indices[0];
      for (std::size_t l = 0; l < layers.size(); ++l) append_cl_prompt(out.prefixes[layers[l]], tape.param(pool.prompts[l][e]));
      if (training) out.loss = scale(key_loss_for(tape, pool, query, out.selection), lambda);
      break;
    }
    case PoolMethod::CODA: {
      CodaVars v = coda_vars(tape, pool, task);
      Var alpha = coda_weights(tape, query, v.keys, v.attention);
      out.selection.alpha = alpha;
      for (std::size_t l = 0; l < layers.size(); ++l)
        append_cl_prompt(out.prefixes[layers[l]], coda_compose(alpha, v.prompts[l], pool.config.length, pool.dim));
      if (training) out.loss = scale(coda_pool_loss(v), lambda);
      break;
    }
  }
  return out;
}

}  // namespace cdl
