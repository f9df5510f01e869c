// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdl/error.hpp"
#include "cdl/experiment.hpp"
#include "cdl/gradcheck_suite.hpp"
#include "cdl/model.hpp"
#include "oracle.hpp"

using namespace cdl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f2(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2f", v);
  return b;
}

std::string sci(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2e", v);
  return b;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---- 1: gradient suite ------------------------------------------------------
Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto rows = run_gradcheck(gradcheck_suite());
  const double secs = seconds_since(t0);
  std::map<std::string, double> worst;
  std::map<std::string, int> count;
  std::string failed;
  const std::map<std::string, double> required{{"primitive", 1e-5}, {"loss", 1e-4}, {"composite", 1e-3}};
  for (const auto& r : rows) {
    worst[r.kind] = std::max(worst[r.kind], r.error);
    ++count[r.kind];
    if (!r.pass || r.tolerance > required.at(r.kind) || !(r.error <= required.at(r.kind))) failed += " " + r.name;
  }
  std::ostringstream d;
  for (const auto& [kind, n] : count) d << n << " " << kind << " (max " << sci(worst[kind]) << ") ";
  d << "in " << f2(secs) << " s";
  if (!failed.empty()) d << "; failing:" << failed;
  return {failed.empty() && count["composite"] >= 1 && count["loss"] >= 1 && secs <= 120.0, d.str()};
}

// ---- 2: DKD decomposition ----------------------------------------------------
double kl_oracle(const std::vector<double>& zt, const std::vector<double>& zs, double tau) {
  auto pt = oracle::softmax(zt, tau), ps = oracle::softmax(zs, tau);
  double s = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i) s += pt[i] * std::log(pt[i] / ps[i]);
  return s;
}

Outcome dkd_decomposition() {
  SeededRng rng(2024);
  double worst = 0.0, worst_two = 0.0;
  int two = 0;
  for (int i = 0; i < 1000; ++i) {
    const int c = rng.uniform_int(2, 10);
    const double tau = std::vector<double>{1.0, 2.0, 4.0}[rng.uniform_int(0, 2)];
    std::vector<double> zs(c), zt(c);
    for (double& v : zs) v = rng.uniform(-5.0, 5.0);
    for (double& v : zt) v = rng.uniform(-5.0, 5.0);
    const int target = rng.uniform_int(0, c - 1);
    Tape t;
    auto terms = dkd_loss(t.constant(Tensor({1, c}, zs)), t.constant(Tensor({1, c}, zt)), target, tau);
    worst = std::max(worst, std::abs(terms.tckd.item() + terms.nckd.item() - kl_oracle(zt, zs, tau)));
    if (c == 2) {
      ++two;
      worst_two = std::max(worst_two, std::abs(terms.nckd.item()));
    }
  }
  return {worst <= 1e-9 && worst_two == 0.0 && two > 0,
          "max |TCKD+NCKD-KL| " + sci(worst) + " over 1000 draws; 2-class NCKD max " + sci(worst_two) + " over " +
              std::to_string(two) + " draws"};
}

// ---- 3: metric oracles -------------------------------------------------------
Outcome metric_oracles() {
  SeededRng rng(7);
  int mismatches = 0;
  for (int k = 0; k < 100; ++k) {
    const int T = rng.uniform_int(2, 8);
    ResultMatrix r(T);
    std::vector<std::vector<double>> m(T, std::vector<double>(T));
    for (int i = 0; i < T; ++i)
      for (int j = 0; j <= i; ++j) r.set(i, j, m[i][j] = std::round(rng.uniform(0.0, 100.0) * 4.0) / 4.0);
    double acc = 0.0, forg = 0.0;
    for (int j = 0; j < T; ++j) acc += m[T - 1][j];
    acc /= T;
    for (int i = 0; i < T - 1; ++i) forg += m[i][i] - m[T - 1][i];
    forg /= T - 1;
    if (avg_accuracy(r) != acc || forgetting(r) != forg) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 100 matrices"};
}

// ---- 4-6: desk benchmark -----------------------------------------------------
struct DeskRuns {
  std::map<std::string, std::vector<double>> acc, forg;  // per method label, per seed
  std::vector<double> teacher_acc;
  double benchmark_seconds = 0.0;
  int runs = 0, frozen_violations = 0, read_violations = 0, discipline_violations = 0;
  std::string first_violation;
};

DeskRuns desk_benchmark(const ExperimentConfig& c, bool unfreeze, std::ostream& log) {
  DeskRuns out;
  const auto t0 = Clock::now();
  double unfrozen_seconds = 0.0;  // excluded from the benchmark time
  const Dataset data = generate_synthetic_dataset(c.dataset);
  const TaskStream pre_stream = make_task_stream(data, c.tasks, 0);
  auto pretrain = [&](const ViTConfig& vc, std::uint64_t seed) {
    PretrainResult p = pretrain_backbone(vc, data, pre_stream, c.pretrain.epochs, seed, c.pretrain.batch_size, c.pretrain.lr);
    log << "  pretrained dim " << vc.dim << " x " << vc.blocks << ": train " << f2(p.train_accuracy) << "%, test "
        << f2(p.test_accuracy) << "% (" << f2(seconds_since(t0)) << " s)" << std::endl;
    return std::make_shared<const BackboneWeights>(std::move(p.backbone));
  };
  auto student = pretrain(c.student, c.pretrain.seed);
  auto teacher = pretrain(c.teacher, c.pretrain.seed + 1);

  auto note = [&](const std::string& id, const RunResult& r, bool frozen) {
    ++out.runs;
    const RunAudit& a = r.audit;
    const bool checksums = a.teacher_backbone_before == a.teacher_backbone_after && a.teacher_stable() &&
                           (!frozen || a.student_backbone_before == a.student_backbone_after);
    if (!checksums) ++out.frozen_violations;
    if (!a.backbone_discipline) ++out.discipline_violations;
    if (a.out_of_task_reads != 0) ++out.read_violations;
    if ((!checksums || !a.backbone_discipline || a.out_of_task_reads) && out.first_violation.empty()) out.first_violation = id;
  };

  for (std::uint64_t seed : c.seeds) {
    const TaskStream stream = make_task_stream(data, c.tasks, seed);
    const RunConfig base = base_run_config(c, seed);
    const TeacherTrajectory tr = train_teacher(data, stream, teacher, base);
    out.teacher_acc.push_back(tr.report.avg_accuracy);
    log << "  seed " << seed << " teacher ACC " << f2(tr.report.avg_accuracy) << " (" << f2(tr.report.wall_seconds) << " s)"
        << std::endl;
    for (const RunCell& cell : plan_cells(c, seed)) {
      RunResult r = cdl_run(data, stream, tr, student, cell.config);
      note(cell.label, r, true);
      out.acc[cell.label].push_back(r.student_report.avg_accuracy);
      out.forg[cell.label].push_back(r.student_report.forgetting);
      log << "  seed " << seed << " " << cell.label << " ACC " << f2(r.student_report.avg_accuracy) << " F "
          << f2(r.student_report.forgetting) << " (" << f2(r.student_report.wall_seconds) << " s)" << std::endl;
    }
    out.benchmark_seconds = seconds_since(t0) - unfrozen_seconds;
    if (unfreeze) {
      const auto u0 = Clock::now();
      RunConfig cfg = base;
      cfg.distill.method = DistillMethod::KDP;
      cfg.unfreeze_last_block = true;
      RunResult r = cdl_run(data, stream, tr, student, cfg);
      note("kdp[unfreeze=last]", r, false);
      unfrozen_seconds += seconds_since(u0);
      out.acc["unfrozen"].push_back(r.student_report.avg_accuracy);
      out.forg["unfrozen"].push_back(r.student_report.forgetting);
      log << "  seed " << seed << " kdp[unfreeze=last] ACC " << f2(r.student_report.avg_accuracy) << " F "
          << f2(r.student_report.forgetting) << " (" << f2(r.student_report.wall_seconds) << " s)" << std::endl;
    }
  }
  return out;
}

Outcome frozen_discipline(const DeskRuns& d) {
  const bool ok = d.runs > 0 && d.frozen_violations == 0 && d.read_violations == 0 && d.discipline_violations == 0;
  std::string detail = std::to_string(d.runs) + " complete 5-task runs; checksum mismatches " +
                       std::to_string(d.frozen_violations) + ", out-of-task reads in " +
                       std::to_string(d.read_violations) + " runs, discipline breaches " +
                       std::to_string(d.discipline_violations);
  if (!d.first_violation.empty()) detail += " (first: " + d.first_violation + ")";
  return {ok, detail};
}

Outcome table_ordering(const DeskRuns& d) {
  const double teacher = mean(d.teacher_acc), none = mean(d.acc.at("none")), kd = mean(d.acc.at("kd")),
               kdp = mean(d.acc.at("kdp"));
  std::vector<double> gain;
  for (std::size_t i = 0; i < d.acc.at("kdp").size(); ++i) gain.push_back(d.acc.at("kdp")[i] - d.acc.at("none")[i]);
  const bool a = teacher > none, b = mean(gain) > 0.0, c = kdp >= kd, t = d.benchmark_seconds <= 1800.0;
  std::string detail = "teacher " + f2(teacher) + (a ? " > " : " !> ") + "none " + f2(none) + "; KDP-none " +
                       f2(mean(gain)) + (b ? " > 0" : " !> 0") + "; KDP " + f2(kdp) + (c ? " >= " : " !>= ") + "KD " +
                       f2(kd) + "; " + f2(d.benchmark_seconds / 60.0) + " min";
  return {a && b && c && t, detail};
}

Outcome unfreeze_ablation(const DeskRuns& d) {
  const double frozen = mean(d.forg.at("kdp")), unfrozen = mean(d.forg.at("unfrozen"));
  const bool ok = unfrozen >= 2.0 * frozen;
  return {ok, "forgetting unfrozen " + f2(unfrozen) + " vs frozen KDP " + f2(frozen) + " (ratio " +
                  f2(frozen > 0 ? unfrozen / frozen : INFINITY) + ", need >= 2); ACC " + f2(mean(d.acc.at("unfrozen"))) +
                  " vs " + f2(mean(d.acc.at("kdp")))};
}

// ---- 7: ablation grid --------------------------------------------------------
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome ablation_grid(const ExperimentConfig& c, const fs::path& work) {
  std::vector<std::string> missing;
  fs::remove_all(work);
  std::ostringstream log;
  const RunOutput run = cmd_run(c, work / "a", log);
  const std::string summary = slurp(work / "a" / "summary.json");
  const Report again = cmd_report(work / "a");
  cmd_run(c, work / "b", log);
  const bool deterministic = again.json == summary && slurp(work / "a" / "results.csv") == slurp(work / "b" / "results.csv") &&
                             slurp(work / "b" / "summary.json") == summary;

  const auto doc = nlohmann::json::parse(summary);
  std::set<std::pair<bool, bool>> cells;
  if (doc.contains("kd_grid"))
    for (const auto& g : doc["kd_grid"]) cells.insert({g["kd_prompts"].get<bool>(), g["kd_classifier"].get<bool>()});
  if (cells.size() != 4) missing.push_back("grid");
  auto sweep = [&](const char* key, std::vector<int> want) {
    std::vector<int> got;
    if (doc.contains("sweeps") && doc["sweeps"].contains(key))
      for (const auto& p : doc["sweeps"][key]) got.push_back(p[key].get<int>());
    if (got != want) missing.push_back(key);
  };
  sweep("kd_prompt_length", {2, 4, 6, 8});
  std::vector<int> depths;
  for (int d = 1; d <= c.student.blocks; ++d) depths.push_back(d);
  sweep("kd_prompt_depth", depths);
  const bool text = run.report.text.find("KD prompts x KD classifier") != std::string::npos &&
                    run.report.text.find("length sweep") != std::string::npos &&
                    run.report.text.find("depth sweep") != std::string::npos;
  if (!text) missing.push_back("text tables");
  fs::remove_all(work);
  std::string detail = "grid cells " + std::to_string(cells.size()) + "/4, length {2,4,6,8}, depth {1.." +
                       std::to_string(c.student.blocks) + "}, rerun " + (deterministic ? "byte-identical" : "DIFFERS");
  for (const auto& m : missing) detail += "; missing " + m;
  return {missing.empty() && deterministic, detail};
}

// ---- 8: prefix no-op ---------------------------------------------------------
Outcome prefix_noop() {
  double attn = 0.0;
  for (int heads : {1, 2, 4}) {
    ViTConfig c;
    c.image_size = 4;
    c.patch = 2;
    c.dim = 8;
    c.heads = heads;
    c.blocks = 1;
    BackboneWeights w = BackboneWeights::init(c, SeededRng(heads));
    SeededRng rng(10 + heads);
    for (Parameter* p : w.parameters())
      for (double& v : p->value.values()) v += rng.normal(0.0, 0.1);
    Tensor x({5, c.dim});
    for (double& v : x.values()) v = rng.uniform(-2.0, 2.0);
    Tape t;
    Var out = attention_with_prefix(t, w.blocks[0], heads, t.constant(x), LayerPrefix{});
    const auto ref = oracle::attention(oracle::from_tensor(x), w.blocks[0], heads, {});
    for (int i = 0; i < out.value().rows(); ++i)
      for (int j = 0; j < out.value().cols(); ++j) attn = std::max(attn, std::abs(out.value().at(i, j) - ref[i][j]));
  }

  ViTConfig sc;
  sc.image_size = 4;
  sc.channels = 2;
  sc.patch = 2;
  sc.dim = 8;
  sc.heads = 2;
  sc.blocks = 2;
  sc.mlp_ratio = 2;
  ViTConfig tc = sc;
  tc.dim = 12;
  tc.blocks = 3;
  auto frozen = [](const ViTConfig& c, std::uint64_t seed) {
    auto w = BackboneWeights::init(c, SeededRng(seed));
    SeededRng rng(seed + 1);
    for (Parameter* p : w.parameters())
      for (double& v : p->value.values()) v += rng.normal(0.0, 0.05);
    w.set_frozen(true);
    return std::make_shared<const BackboneWeights>(std::move(w));
  };
  auto sbb = frozen(sc, 30), tbb = frozen(tc, 31);
  PoolConfig pool = PoolConfig::desk(PoolMethod::CODA, sc.blocks, 3);
  PoolConfig tpool = PoolConfig::desk(PoolMethod::CODA, tc.blocks, 3);
  ModelShape shape{.tasks = 3, .classes_per_task = 2, .lambda = 1.0, .teacher_dim = tc.dim, .teacher_blocks = tc.blocks};
  CLModel teacher = make_model(tbb, tpool, shape, DistillConfig{}, SeededRng(32));
  double loss = 0.0;
  SeededRng rng(33);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> img(sc.channels * sc.image_size * sc.image_size);
    for (double& v : img) v = rng.uniform();
    TeacherTargets targets = teacher_targets(teacher, img, model_query(teacher, img), 1, true);
    DistillConfig zero{.method = DistillMethod::KDP, .kd_prompt_depth = 0};
    DistillConfig deit{.method = DistillMethod::DeiT};
    CLModel a = make_model(sbb, pool, shape, zero, SeededRng(34 + trial));
    CLModel b = make_model(sbb, pool, shape, deit, SeededRng(34 + trial));
    const auto q = model_query(a, img);
    Tape ta, tb;
    const double la = kdp_student_loss(ta, a, img, q, 2 + trial % 2, 1, &targets).total.item();
    const double lb = kdp_student_loss(tb, b, img, q, 2 + trial % 2, 1, &targets).total.item();
    loss = std::max(loss, std::abs(la - lb));
  }
  return {attn <= 1e-12 && loss <= 1e-12,
          "empty-prefix attention max diff " + sci(attn) + "; KDP(depth 0) vs DeiT loss max diff " + sci(loss)};
}

ExperimentConfig desk_config(std::uint64_t seeds) {
  nlohmann::json j = {{"methods", {"none", "kd", "kdp"}}};
  std::vector<std::uint64_t> s;
  for (std::uint64_t i = 0; i < seeds; ++i) s.push_back(i);
  j["seeds"] = s;
  return parse_config(j.dump());
}

// Reduced geometry for the sweep-structure check; the grid and sweeps are
// structural, so the full desk scale adds run time and nothing else.
ExperimentConfig grid_config() {
  return parse_config(R"({
    "methods": [], "tasks": 2, "epochs": 1, "batch_size": 8, "auto_generate": true,
    "sweep": {"kd_prompt_lengths": [2, 4, 6, 8], "kd_prompt_depths": [1, 2, 3], "kd_grid": true},
    "dataset": {"pretrain_classes": 2, "cl_classes": 4, "image_size": 8, "train_per_class": 8, "test_per_class": 4},
    "student": {"image_size": 8, "patch": 4, "dim": 8, "heads": 2, "blocks": 3, "mlp_ratio": 2},
    "teacher": {"image_size": 8, "patch": 4, "dim": 12, "heads": 2, "blocks": 4, "mlp_ratio": 2},
    "pretrain": {"epochs": 1, "batch_size": 8}
  })");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::set<int> only;
  int seeds = 5;
  std::string work = (fs::temp_directory_path() / "cdl_acceptance").string();
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--seeds", seeds, "Seeds for the desk benchmark")->check(CLI::Range(1, 100));
  app.add_option("--work", work, "Scratch directory for the report check");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int k) { return only.empty() || only.count(k); };

  std::vector<std::pair<int, Outcome>> results;
  auto record = [&](int k, const std::function<Outcome()>& f) {
    if (!wanted(k)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << k << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    results.emplace_back(k, o);
  };

  record(1, gradient_suite);
  record(2, dkd_decomposition);
  record(3, metric_oracles);
  record(8, prefix_noop);
  record(7, [&] { return ablation_grid(grid_config(), work); });
  if (wanted(4) || wanted(5) || wanted(6)) {
    std::optional<DeskRuns> desk;
    std::string error;
    try {
      std::cout << "desk benchmark (" << seeds << " seeds)" << std::endl;
      desk = desk_benchmark(desk_config(seeds), wanted(6), std::cout);
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto from_desk = [&](Outcome (*f)(const DeskRuns&)) {
      return [&, f] { return desk ? f(*desk) : Outcome{false, "desk benchmark failed: " + error}; };
    };
    record(4, from_desk(frozen_discipline));
    record(5, from_desk(table_ordering));
    record(6, from_desk(unfreeze_ablation));
  }

  std::sort(results.begin(), results.end(), [](auto& a, auto& b) { return a.first < b.first; });
  std::cout << "\nsummary\n";
  bool all = true;
  for (const auto& [k, o] : results) {
    std::cout << "  criterion " << k << ": " << (o.pass ? "PASS" : "FAIL") << "\n";
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
