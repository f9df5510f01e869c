#include "cdl/experiment.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cdl/error.hpp"

namespace cdl {

using nlohmann::json;

namespace {

// Walks one JSON object, remembering which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + where() + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  void mark(const std::string& key) { used_.insert(key); }

  template <class T>
  void get(const std::string& key, T& dst) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw 0;
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw 0;
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) throw 0;
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw 0;
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw 0;
      }
      dst = v.get<T>();
    } catch (...) {
      throw ConfigError("type mismatch for key '" + where(key) + "'");
    }
  }

  template <class T>
  void get_list(const std::string& key, std::vector<T>& dst) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError("type mismatch for key '" + where(key) + "': expected a list");
    std::vector<T> out;
    for (const json& e : v) {
      if (!e.is_number_integer() || (std::is_unsigned_v<T> && !e.is_number_unsigned() && e.get<long long>() < 0))
        throw ConfigError("type mismatch for key '" + where(key) + "': expected a list of integers");
      out.push_back(e.get<T>());
    }
    dst = std::move(out);
  }

  std::optional<std::string> get_name(const std::string& key) {
    std::string s;
    if (!j_.contains(key)) return std::nullopt;
    get(key, s);
    return s;
  }

  Reader child(const std::string& key) {
    used_.insert(key);
    return Reader(j_.at(key), where(key));
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!used_.count(key)) throw ConfigError("unknown key '" + where(key) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <class T, class Parse>
T named(Reader& r, const std::string& key, T current, Parse parse) {
  auto s = r.get_name(key);
  if (!s) return current;
  try {
    return parse(*s);
  } catch (const ConfigError& e) {
    throw ConfigError("bad value for key '" + r.where(key) + "': " + e.what());
  }
}

void read_vit(Reader r, ViTConfig& v) {
  r.get("image_size", v.image_size);
  r.get("channels", v.channels);
  r.get("patch", v.patch);
  r.get("dim", v.dim);
  r.get("heads", v.heads);
  r.get("blocks", v.blocks);
  r.get("mlp_ratio", v.mlp_ratio);
  r.get("num_classes", v.num_classes);
  r.finish();
}

json vit_json(const ViTConfig& v) {
  return {{"image_size", v.image_size}, {"channels", v.channels}, {"patch", v.patch},         {"dim", v.dim},
          {"heads", v.heads},           {"blocks", v.blocks},     {"mlp_ratio", v.mlp_ratio}, {"num_classes", v.num_classes}};
}

void apply_preset(const std::string& name, ExperimentConfig& c) {
  const auto dash = name.find('-');
  if (dash == std::string::npos) throw ConfigError("preset '" + name + "' is not of the form <pool>-<method>");
  c.pool = parse_pool_method(name.substr(0, dash));
  c.methods = {parse_distill_method(name.substr(dash + 1))};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Left-aligned to `width` display columns (the ± sign is one column, two bytes).
std::string pad(const std::string& s, std::size_t width) {
  std::size_t cols = 0;
  for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80;
  return cols >= width ? s + " " : s + std::string(width - cols, ' ');
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// RFC 4180 fields: quoted when they contain a comma or a quote.
std::vector<std::string> split_csv(const std::string& line, std::size_t n) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch != '"') {
        cur += ch;
      } else if (i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else {
        quoted = false;
      }
    } else if (ch == '"' && cur.empty()) {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw FormatError("line " + std::to_string(n) + ": unterminated quote");
  out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s) {
  CDL_REQUIRE(s.find_first_of("\r\n") == std::string::npos, "CSV field contains a line break: " + s);
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + '"';
}

template <class T>
T parse_number(const std::string& s, const char* what, std::size_t line) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw FormatError("line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  return v;
}

std::pair<double, double> mean_pop_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << s;
}

}  // namespace

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  auto spec_eq = [](const SyntheticDatasetSpec& a, const SyntheticDatasetSpec& b) {
    return a.seed == b.seed && a.pretrain_classes == b.pretrain_classes && a.cl_classes == b.cl_classes &&
           a.image_size == b.image_size && a.channels == b.channels && a.train_per_class == b.train_per_class &&
           a.test_per_class == b.test_per_class && a.noise == b.noise && a.max_shift == b.max_shift &&
           a.contrast_lo == b.contrast_lo && a.contrast_hi == b.contrast_hi && a.basis_size == b.basis_size &&
           a.patterns_per_class == b.patterns_per_class;
  };
  auto distill_eq = [](const DistillConfig& a, const DistillConfig& b) {
    return a.method == b.method && a.alpha == b.alpha && a.lambda == b.lambda && a.tau == b.tau &&
           a.kd_prompt_length == b.kd_prompt_length && a.kd_prompt_depth == b.kd_prompt_depth && a.scope == b.scope &&
           a.kd_prompts == b.kd_prompts && a.kd_classifier == b.kd_classifier;
  };
  return seeds == o.seeds && pool == o.pool && methods == o.methods && tasks == o.tasks && epochs == o.epochs &&
         batch_size == o.batch_size && lr == o.lr && unfreeze_last_block == o.unfreeze_last_block &&
         distill_eq(distill, o.distill) && sweep == o.sweep && spec_eq(dataset, o.dataset) && student == o.student &&
         teacher == o.teacher && pretrain == o.pretrain && data_dir == o.data_dir && backbone_dir == o.backbone_dir &&
         auto_generate == o.auto_generate;
}

ExperimentConfig parse_config(std::string_view text) {
  json doc;
  std::string_view trimmed = text;
  while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.front()))) trimmed.remove_prefix(1);
  if (trimmed.empty()) {
    doc = json::object();
  } else {
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("malformed configuration: ") + e.what());
    }
  }

  ExperimentConfig c;
  Reader r(doc, "");
  if (auto p = r.get_name("preset")) {
    try {
      apply_preset(*p, c);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("bad value for key 'preset': ") + e.what());
    }
  }
  r.get_list("seeds", c.seeds);
  c.pool = named(r, "pool", c.pool, parse_pool_method);
  if (r.has("methods")) {
    r.mark("methods");
    std::vector<std::string> names;
    const json& v = doc.at("methods");
    if (!v.is_array()) throw ConfigError("type mismatch for key 'methods': expected a list of method names");
    for (const json& e : v) {
      if (!e.is_string()) throw ConfigError("type mismatch for key 'methods': expected a list of method names");
      names.push_back(e.get<std::string>());
    }
    c.methods.clear();
    for (const std::string& n : names) {
      try {
        c.methods.push_back(parse_distill_method(n));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("bad value for key 'methods': ") + e.what());
      }
    }
  }
  r.get("tasks", c.tasks);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("unfreeze_last_block", c.unfreeze_last_block);
  r.get("data_dir", c.data_dir);
  r.get("backbone_dir", c.backbone_dir);
  r.get("auto_generate", c.auto_generate);

  if (r.has("distill")) {
    Reader d = r.child("distill");
    d.get("alpha", c.distill.alpha);
    d.get("lambda", c.distill.lambda);
    d.get("tau", c.distill.tau);
    d.get("kd_prompt_length", c.distill.kd_prompt_length);
    d.get("kd_prompt_depth", c.distill.kd_prompt_depth);
    c.distill.scope = named(d, "scope", c.distill.scope, parse_class_scope);
    d.get("kd_prompts", c.distill.kd_prompts);
    d.get("kd_classifier", c.distill.kd_classifier);
    d.finish();
  }
  if (r.has("sweep")) {
    Reader s = r.child("sweep");
    s.get_list("kd_prompt_lengths", c.sweep.kd_prompt_lengths);
    s.get_list("kd_prompt_depths", c.sweep.kd_prompt_depths);
    s.get("kd_grid", c.sweep.kd_grid);
    s.get("unfreeze", c.sweep.unfreeze);
    s.finish();
  }
  if (r.has("dataset")) {
    Reader d = r.child("dataset");
    SyntheticDatasetSpec& s = c.dataset;
    d.get("seed", s.seed);
    d.get("pretrain_classes", s.pretrain_classes);
    d.get("cl_classes", s.cl_classes);
    d.get("image_size", s.image_size);
    d.get("channels", s.channels);
    d.get("train_per_class", s.train_per_class);
    d.get("test_per_class", s.test_per_class);
    d.get("noise", s.noise);
    d.get("max_shift", s.max_shift);
    d.get("contrast_lo", s.contrast_lo);
    d.get("contrast_hi", s.contrast_hi);
    d.get("basis_size", s.basis_size);
    d.get("patterns_per_class", s.patterns_per_class);
    d.finish();
  }
  if (r.has("student")) read_vit(r.child("student"), c.student);
  if (r.has("teacher")) read_vit(r.child("teacher"), c.teacher);
  if (r.has("pretrain")) {
    Reader p = r.child("pretrain");
    p.get("epochs", c.pretrain.epochs);
    p.get("seed", c.pretrain.seed);
    p.get("batch_size", c.pretrain.batch_size);
    p.get("lr", c.pretrain.lr);
    p.finish();
  }
  r.finish();

  if (c.seeds.empty()) throw ConfigError("'seeds' must not be empty");
  if (c.methods.empty() && !c.sweep.kd_grid && c.sweep.kd_prompt_lengths.empty() && c.sweep.kd_prompt_depths.empty() &&
      !c.sweep.unfreeze)
    throw ConfigError("'methods' is empty and no sweep is enabled");
  if (c.tasks < 1) throw ConfigError("'tasks' must be at least 1");
  if (c.epochs < 1) throw ConfigError("'epochs' must be at least 1");
  if (c.batch_size < 1) throw ConfigError("'batch_size' must be at least 1");
  if (!(c.lr >= 0.0)) throw ConfigError("'lr' must be non-negative");
  if (c.pretrain.epochs < 0) throw ConfigError("'pretrain.epochs' must be non-negative");
  if (c.dataset.cl_classes % c.tasks != 0)
    throw ConfigError("'dataset.cl_classes' (" + std::to_string(c.dataset.cl_classes) + ") is not divisible by 'tasks' (" +
                      std::to_string(c.tasks) + ")");
  for (const ViTConfig* v : {&c.student, &c.teacher}) {
    try {
      v->validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(std::string(v == &c.student ? "student" : "teacher") + ": " + e.what());
    }
    if (v->image_size != c.dataset.image_size || v->channels != c.dataset.channels)
      throw ConfigError("model image geometry does not match 'dataset'");
  }
  try {
    c.dataset.validate();
    c.distill.validate(c.student.blocks);
    PoolConfig::desk(c.pool, c.student.blocks, c.tasks).validate(c.student.blocks, c.tasks);
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  for (int len : c.sweep.kd_prompt_lengths)
    if (len < 2 || len % 2) throw ConfigError("'sweep.kd_prompt_lengths' entries must be even and at least 2");
  for (int d : c.sweep.kd_prompt_depths)
    if (d < 0 || d > c.student.blocks)
      throw ConfigError("'sweep.kd_prompt_depths' entries must lie in [0, student.blocks]");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string echo_config(const ExperimentConfig& c) {
  json methods = json::array();
  for (DistillMethod m : c.methods) methods.push_back(to_string(m));
  const SyntheticDatasetSpec& s = c.dataset;
  json doc = {
      {"seeds", c.seeds},
      {"pool", to_string(c.pool)},
      {"methods", methods},
      {"tasks", c.tasks},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"unfreeze_last_block", c.unfreeze_last_block},
      {"distill",
       {{"alpha", c.distill.alpha},
        {"lambda", c.distill.lambda},
        {"tau", c.distill.tau},
        {"kd_prompt_length", c.distill.kd_prompt_length},
        {"kd_prompt_depth", c.distill.kd_prompt_depth},
        {"scope", to_string(c.distill.scope)},
        {"kd_prompts", c.distill.kd_prompts},
        {"kd_classifier", c.distill.kd_classifier}}},
      {"sweep",
       {{"kd_prompt_lengths", c.sweep.kd_prompt_lengths},
        {"kd_prompt_depths", c.sweep.kd_prompt_depths},
        {"kd_grid", c.sweep.kd_grid},
        {"unfreeze", c.sweep.unfreeze}}},
      {"dataset",
       {{"seed", s.seed},
        {"pretrain_classes", s.pretrain_classes},
        {"cl_classes", s.cl_classes},
        {"image_size", s.image_size},
        {"channels", s.channels},
        {"train_per_class", s.train_per_class},
        {"test_per_class", s.test_per_class},
        {"noise", s.noise},
        {"max_shift", s.max_shift},
        {"contrast_lo", s.contrast_lo},
        {"contrast_hi", s.contrast_hi},
        {"basis_size", s.basis_size},
        {"patterns_per_class", s.patterns_per_class}}},
      {"student", vit_json(c.student)},
      {"teacher", vit_json(c.teacher)},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"seed", c.pretrain.seed},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr}}},
      {"data_dir", c.data_dir},
      {"backbone_dir", c.backbone_dir},
      {"auto_generate", c.auto_generate},
  };
  return doc.dump(2) + "\n";
}

RunConfig base_run_config(const ExperimentConfig& c, std::uint64_t seed) {
  RunConfig r;
  r.seed = seed;
  r.epochs = c.epochs;
  r.batch_size = c.batch_size;
  r.lr = c.lr;
  r.student_pool = PoolConfig::desk(c.pool, c.student.blocks, c.tasks);
  r.teacher_pool = PoolConfig::desk(c.pool, c.teacher.blocks, c.tasks);
  r.distill = c.distill;
  r.unfreeze_last_block = c.unfreeze_last_block;
  return r;
}

std::vector<RunCell> plan_cells(const ExperimentConfig& c, std::uint64_t seed) {
  const RunConfig base = base_run_config(c, seed);
  std::vector<RunCell> cells;
  for (DistillMethod m : c.methods) {
    RunCell cell{to_string(m), base};
    cell.config.distill.method = m;
    cells.push_back(cell);
  }
  auto kdp = [&](std::string label) {
    RunCell cell{std::move(label), base};
    cell.config.distill.method = DistillMethod::KDP;
    return cell;
  };
  for (int len : c.sweep.kd_prompt_lengths) {
    RunCell cell = kdp("kdp[len=" + std::to_string(len) + "]");
    cell.config.distill.kd_prompt_length = len;
    cells.push_back(cell);
  }
  for (int d : c.sweep.kd_prompt_depths) {
    RunCell cell = kdp("kdp[depth=" + std::to_string(d) + "]");
    cell.config.distill.kd_prompt_depth = d;
    cells.push_back(cell);
  }
  if (c.sweep.kd_grid)
    for (int p : {0, 1})
      for (int k : {0, 1}) {
        RunCell cell = kdp("kdp[prompts=" + std::to_string(p) + ",classifier=" + std::to_string(k) + "]");
        cell.config.distill.kd_prompts = p;
        cell.config.distill.kd_classifier = k;
        cells.push_back(cell);
      }
  if (c.sweep.unfreeze) {
    RunCell cell = kdp("kdp[unfreeze=last]");
    cell.config.unfreeze_last_block = true;
    cells.push_back(cell);
  }
  return cells;
}

std::vector<ReportRow> result_rows(const std::string& run_id, std::uint64_t seed, const std::string& pool,
                                   const std::string& distill, const ResultMatrix& r) {
  std::vector<ReportRow> rows;
  for (int i = 0; i < r.tasks(); ++i)
    for (int j = 0; j <= i; ++j) rows.push_back({run_id, seed, pool, distill, RowKind::Cell, i, j, r.at(i, j)});
  rows.push_back({run_id, seed, pool, distill, RowKind::Acc, 0, 0, avg_accuracy(r)});
  if (r.tasks() >= 2) rows.push_back({run_id, seed, pool, distill, RowKind::Forgetting, 0, 0, forgetting(r)});
  return rows;
}

void write_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << kCsvHeader << '\n';
  for (const ReportRow& r : rows) {
    out << csv_field(r.run_id) << ',' << r.seed << ',' << csv_field(r.pool) << ',' << csv_field(r.distill) << ',';
    switch (r.kind) {
      case RowKind::Cell:
        out << r.trained_task << ',' << r.eval_task;
        break;
      case RowKind::Acc:
        out << "ACC,";
        break;
      case RowKind::Forgetting:
        out << "FORGETTING,";
        break;
    }
    out << ',' << fmt(r.accuracy) << '\n';
  }
}

std::vector<ReportRow> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("results CSV: missing or wrong header");
  std::vector<ReportRow> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto f = split_csv(line, n);
    if (f.size() != 7) throw FormatError("line " + std::to_string(n) + ": expected 7 fields");
    ReportRow r;
    r.run_id = f[0];
    r.seed = parse_number<std::uint64_t>(f[1], "seed", n);
    r.pool = f[2];
    r.distill = f[3];
    if (f[4] == "ACC" || f[4] == "FORGETTING") {
      if (!f[5].empty()) throw FormatError("line " + std::to_string(n) + ": summary row with an eval task");
      r.kind = f[4] == "ACC" ? RowKind::Acc : RowKind::Forgetting;
    } else {
      r.trained_task = parse_number<int>(f[4], "trained_task", n);
      r.eval_task = parse_number<int>(f[5], "eval_task", n);
    }
    r.accuracy = parse_number<double>(f[6], "accuracy", n);
    rows.push_back(std::move(r));
  }
  return rows;
}

Report emit_report(const std::vector<ReportRow>& rows) {
  struct Acc {
    std::string pool, method;
    std::vector<double> acc, forg;
    std::set<std::uint64_t> seeds;
    std::map<std::string, int> tasks;  // run_id -> last trained task
    std::map<std::string, std::map<int, double>> finals;
  };
  std::vector<Acc> groups;
  auto group = [&](const ReportRow& r) -> Acc& {
    for (Acc& g : groups)
      if (g.pool == r.pool && g.method == r.distill) return g;
    groups.push_back({r.pool, r.distill, {}, {}, {}, {}, {}});
    return groups.back();
  };
  for (const ReportRow& r : rows) {
    Acc& g = group(r);
    g.seeds.insert(r.seed);
    if (r.kind == RowKind::Acc) g.acc.push_back(r.accuracy);
    if (r.kind == RowKind::Forgetting) g.forg.push_back(r.accuracy);
    if (r.kind == RowKind::Cell) {
      int& last = g.tasks[r.run_id];
      last = std::max(last, r.trained_task);
      g.finals[r.run_id][r.trained_task * 100000 + r.eval_task] = r.accuracy;
    }
  }
  if (groups.empty()) throw EmptyReport("no completed runs to report");

  Report rep;
  for (const Acc& g : groups) {
    if (g.acc.empty()) throw FormatError("runs for " + g.method + " have no ACC row");
    SummaryEntry e;
    e.pool = g.pool;
    e.method = g.method;
    std::tie(e.acc_mean, e.acc_std) = mean_pop_std(g.acc);
    e.forgetting_undefined = g.forg.empty();
    if (!g.forg.empty()) std::tie(e.forgetting_mean, e.forgetting_std) = mean_pop_std(g.forg);
    e.seeds = static_cast<int>(g.acc.size());
    // Final-row accuracy per task, averaged over runs.
    std::vector<double> sum;
    int runs = 0;
    for (const auto& [id, last] : g.tasks) {
      const auto& cells = g.finals.at(id);
      if (sum.empty()) sum.assign(last + 1, 0.0);
      if (static_cast<int>(sum.size()) != last + 1) throw FormatError("runs for " + g.method + " differ in task count");
      for (int j = 0; j <= last; ++j) {
        auto it = cells.find(last * 100000 + j);
        if (it == cells.end()) throw FormatError("run " + id + " is missing its final-row entry for task " + std::to_string(j));
        sum[j] += it->second;
      }
      ++runs;
    }
    for (double& v : sum) v /= runs;
    e.final_curve = sum;
    rep.entries.push_back(std::move(e));
  }

  std::ostringstream txt, csv;
  json summary = json::array(), curves = json::object();
  char line[256];
  txt << pad("pool", 11) << pad("method", 31) << pad("Avg. Acc", 19) << pad("Forgetting", 19) << "seeds\n";
  csv << "pool,method,acc_mean,acc_std,forgetting_mean,forgetting_std,seeds\n";
  for (const SummaryEntry& e : rep.entries) {
    const std::string f = e.forgetting_undefined ? "undefined" : fixed2(e.forgetting_mean) + " ± " + fixed2(e.forgetting_std);
    txt << pad(e.pool, 11) << pad(e.method, 31) << pad(fixed2(e.acc_mean) + " ± " + fixed2(e.acc_std), 19) << pad(f, 19)
        << e.seeds << "\n";
    csv << csv_field(e.pool) << ',' << csv_field(e.method) << ',' << fmt(e.acc_mean) << ',' << fmt(e.acc_std) << ','
        << fmt(e.forgetting_mean) << ',' << fmt(e.forgetting_std) << ',' << e.seeds << '\n';
    json entry = {{"pool", e.pool},
                  {"method", e.method},
                  {"acc_mean", e.acc_mean},
                  {"acc_std", e.acc_std},
                  {"forgetting_mean", e.forgetting_mean},
                  {"forgetting_std", e.forgetting_std},
                  {"seeds", e.seeds}};
    if (e.forgetting_undefined) entry["forgetting_undefined"] = true;
    summary.push_back(entry);
    curves[e.pool + "/" + e.method] = e.final_curve;
  }

  auto find = [&](const std::string& method) -> const SummaryEntry* {
    for (const SummaryEntry& e : rep.entries)
      if (e.method == method) return &e;
    return nullptr;
  };
  json doc = {{"summary", summary}, {"curves", curves}};

  // KD prompt x KD classifier grid.
  bool grid = true;
  for (int p : {0, 1})
    for (int k : {0, 1})
      grid = grid && find("kdp[prompts=" + std::to_string(p) + ",classifier=" + std::to_string(k) + "]");
  if (grid) {
    txt << "\nKD prompts x KD classifier (Avg. Acc / Forgetting)\n";
    std::snprintf(line, sizeof line, "%-14s %-22s %-22s\n", "", "classifier off", "classifier on");
    txt << line;
    json cells = json::array();
    for (int p : {0, 1}) {
      std::string row[2];
      for (int k : {0, 1}) {
        const SummaryEntry* e = find("kdp[prompts=" + std::to_string(p) + ",classifier=" + std::to_string(k) + "]");
        row[k] = fixed2(e->acc_mean) + " / " + fixed2(e->forgetting_mean);
        cells.push_back({{"kd_prompts", p == 1},
                         {"kd_classifier", k == 1},
                         {"acc_mean", e->acc_mean},
                         {"acc_std", e->acc_std},
                         {"forgetting_mean", e->forgetting_mean},
                         {"forgetting_std", e->forgetting_std}});
      }
      std::snprintf(line, sizeof line, "%-14s %-22s %-22s\n", p ? "prompts on" : "prompts off", row[0].c_str(),
                    row[1].c_str());
      txt << line;
    }
    doc["kd_grid"] = cells;
  }

  // Length and depth sweeps.
  auto sweep = [&](const std::string& key, const std::string& title, const std::string& field) {
    std::vector<std::pair<int, const SummaryEntry*>> pts;
    const std::string prefix = "kdp[" + key + "=";
    for (const SummaryEntry& e : rep.entries)
      if (e.method.rfind(prefix, 0) == 0 && e.method.back() == ']')
        pts.emplace_back(std::stoi(e.method.substr(prefix.size(), e.method.size() - prefix.size() - 1)), &e);
    if (pts.empty()) return;
    std::sort(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.first < b.first; });
    txt << "\n" << title << "\n";
    json arr = json::array();
    for (auto& [v, e] : pts) {
      std::snprintf(line, sizeof line, "  %-6d %s ± %s\n", v, fixed2(e->acc_mean).c_str(), fixed2(e->acc_std).c_str());
      txt << line;
      arr.push_back({{field, v}, {"acc_mean", e->acc_mean}, {"acc_std", e->acc_std}, {"forgetting_mean", e->forgetting_mean}});
    }
    doc["sweeps"][field] = arr;
  };
  sweep("len", "KD prompt length sweep (Avg. Acc)", "kd_prompt_length");
  sweep("depth", "KD prompt depth sweep (Avg. Acc)", "kd_prompt_depth");

  rep.text = txt.str();
  rep.csv = csv.str();
  rep.json = doc.dump(2) + "\n";
  return rep;
}

std::filesystem::path resolve_dir(const std::filesystem::path& out, const std::string& dir) {
  std::filesystem::path p(dir);
  return p.is_absolute() ? p : out / p;
}

namespace {

Dataset obtain_dataset(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log) {
  const auto dir = resolve_dir(out, c.data_dir);
  if (std::filesystem::exists(dir / "train.cdld") && std::filesystem::exists(dir / "test.cdld")) {
    Dataset d = load_dataset(dir);
    if (d.train.n_classes != c.dataset.total_classes() || d.train.pretrain_class_count != c.dataset.pretrain_classes ||
        d.train.height != c.dataset.image_size || d.train.channels != c.dataset.channels)
      throw ConfigError("dataset in " + dir.string() + " does not match the 'dataset' section");
    return d;
  }
  if (!c.auto_generate)
    throw MissingInput("no dataset in " + dir.string() + "; create it with: cdl gen-data --config <config> --out " +
                       out.string());
  log << "generating dataset into " << dir << "\n";
  Dataset d = generate_synthetic_dataset(c.dataset);
  save_dataset(dir, d);
  return d;
}

std::shared_ptr<const BackboneWeights> obtain_backbone(const ExperimentConfig& c, const std::filesystem::path& out,
                                                       const Dataset& d, const char* role, const ViTConfig& vc,
                                                       std::ostream& log) {
  const auto path = resolve_dir(out, c.backbone_dir) / (std::string(role) + ".cdlw");
  if (std::filesystem::exists(path)) {
    BackboneWeights w = BackboneWeights::from_named(load_weights(path));
    if (!(w.config == vc)) throw ConfigError(path.string() + " was pretrained with a different '" + role + "' geometry");
    w.set_frozen(true);
    return std::make_shared<const BackboneWeights>(std::move(w));
  }
  if (!c.auto_generate)
    throw MissingInput("no " + std::string(role) + " backbone at " + path.string() +
                       "; create it with: cdl pretrain --config <config> --out " + out.string());
  log << "pretraining " << role << " backbone\n";
  const TaskStream stream = make_task_stream(d, c.tasks, 0);
  PretrainResult p = pretrain_backbone(vc, d, stream, c.pretrain.epochs,
                                       c.pretrain.seed + (std::string(role) == "teacher"), c.pretrain.batch_size,
                                       c.pretrain.lr);
  std::filesystem::create_directories(path.parent_path());
  save_weights(path, p.backbone.to_named());
  return std::make_shared<const BackboneWeights>(std::move(p.backbone));
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log) {
  const auto dir = resolve_dir(out, c.data_dir);
  Dataset d = generate_synthetic_dataset(c.dataset);
  save_dataset(dir, d);
  log << "wrote " << d.train.size() << " train and " << d.test.size() << " test samples to " << dir.string() << "\n";
}

void cmd_pretrain(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log) {
  const Dataset d = obtain_dataset(c, out, log);
  const TaskStream stream = make_task_stream(d, c.tasks, 0);
  const auto dir = resolve_dir(out, c.backbone_dir);
  std::filesystem::create_directories(dir);
  for (const char* role : {"student", "teacher"}) {
    const ViTConfig& vc = std::string(role) == "student" ? c.student : c.teacher;
    PretrainResult p = pretrain_backbone(vc, d, stream, c.pretrain.epochs,
                                         c.pretrain.seed + (std::string(role) == "teacher"), c.pretrain.batch_size,
                                         c.pretrain.lr);
    save_weights(dir / (std::string(role) + ".cdlw"), p.backbone.to_named());
    log << role << ": pretraining accuracy train " << fixed2(p.train_accuracy) << "%, test "
        << fixed2(p.test_accuracy) << "%\n";
  }
}

RunOutput cmd_run(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log) {
  const Dataset d = obtain_dataset(c, out, log);
  auto student = obtain_backbone(c, out, d, "student", c.student, log);
  auto teacher = obtain_backbone(c, out, d, "teacher", c.teacher, log);
  std::filesystem::create_directories(out);
  write_text(out / "config.json", echo_config(c));

  RunOutput res;
  const std::string pool = to_string(c.pool);
  for (std::uint64_t seed : c.seeds) {
    const TaskStream stream = make_task_stream(d, c.tasks, seed);
    const RunConfig base = base_run_config(c, seed);
    const TeacherTrajectory tr = train_teacher(d, stream, teacher, base);
    const std::string tid = pool + "/teacher/seed" + std::to_string(seed);
    for (ReportRow& r : result_rows(tid, seed, pool, "teacher", tr.results)) res.rows.push_back(std::move(r));
    log << tid << ": ACC " << fixed2(tr.report.avg_accuracy) << "\n";
    for (const RunCell& cell : plan_cells(c, seed)) {
      RunResult r = cdl_run(d, stream, tr, student, cell.config);
      if (!r.audit.backbone_discipline || !r.audit.teacher_stable() || r.audit.out_of_task_reads != 0)
        throw ContractViolation("run " + cell.label + " broke the frozen-backbone or rehearsal discipline");
      const std::string id = pool + "/" + cell.label + "/seed" + std::to_string(seed);
      for (ReportRow& row : result_rows(id, seed, pool, cell.label, r.student)) res.rows.push_back(std::move(row));
      log << id << ": ACC " << fixed2(r.student_report.avg_accuracy);
      if (!r.student_report.forgetting_undefined) log << ", forgetting " << fixed2(r.student_report.forgetting);
      log << "\n";
    }
  }

  std::ostringstream csv;
  write_csv(csv, res.rows);
  write_text(out / "results.csv", csv.str());
  res.report = emit_report(res.rows);
  write_text(out / "summary.txt", res.report.text);
  write_text(out / "summary.json", res.report.json);
  write_text(out / "summary.csv", res.report.csv);
  return res;
}

Report cmd_report(const std::filesystem::path& out) {
  std::ifstream in(out / "results.csv");
  if (!in) throw MissingInput("no results.csv in " + out.string() + "; produce it with: cdl run --config <config> --out " + out.string());
  Report rep = emit_report(read_csv(in));
  write_text(out / "summary.txt", rep.text);
  write_text(out / "summary.json", rep.json);
  write_text(out / "summary.csv", rep.csv);
  return rep;
}

}  // namespace cdl
