#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cdl/error.hpp"
#include "cdl/experiment.hpp"
#include "cdl/gradcheck_suite.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRunFailure = 1;
constexpr int kConfigError = 2;

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON configuration file (defaults apply when omitted)");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Seed override");
}

cdl::ExperimentConfig load(const Common& c) {
  return c.config.empty() ? cdl::parse_config("") : cdl::load_config(c.config);
}

int grad_check(const Common& c) {
  const auto rows = cdl::run_gradcheck(cdl::gradcheck_suite());
  bool ok = true;
  std::printf("%-44s %-10s %-12s %-10s %s\n", "check", "kind", "rel.error", "tol", "result");
  for (const auto& r : rows) {
    std::printf("%-44s %-10s %-12.3e %-10.0e %s%s%s\n", r.name.c_str(), r.kind.c_str(), r.error, r.tolerance,
                r.pass ? "pass" : "FAIL", r.detail.empty() ? "" : "  ", r.detail.c_str());
    ok = ok && r.pass;
  }
  if (!c.config.empty() || c.out != ".") {
    std::filesystem::create_directories(c.out);
    std::ofstream csv(std::filesystem::path(c.out) / "gradcheck.csv");
    csv << "check,kind,rel_error,tolerance,pass\n";
    for (const auto& r : rows)
      csv << r.name << ',' << r.kind << ',' << r.error << ',' << r.tolerance << ',' << (r.pass ? 1 : 0) << '\n';
  }
  return ok ? kOk : kRunFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with prompt-based knowledge distillation on a synthetic benchmark"};
  app.require_subcommand(1);
  Common common;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain", "Pretrain and freeze the student and teacher backbones");
  auto* run = app.add_subcommand("run", "Run every (seed x method) cell and write results and a summary");
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op and loss");
  auto* rep = app.add_subcommand("report", "Summarize results.csv in the output directory");
  for (auto* cmd : {gen, pre, run, grad, rep}) add_common(cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (grad->parsed()) return grad_check(common);
    const std::filesystem::path out(common.out);
    if (rep->parsed()) {
      std::cout << cdl::cmd_report(out).text;
      return kOk;
    }
    cdl::ExperimentConfig cfg = load(common);
    if (gen->parsed()) {
      if (common.seed) cfg.dataset.seed = *common.seed;
      cdl::cmd_gen_data(cfg, out, std::cout);
    } else if (pre->parsed()) {
      if (common.seed) cfg.pretrain.seed = *common.seed;
      cdl::cmd_pretrain(cfg, out, std::cout);
    } else {
      if (common.seed) cfg.seeds = {*common.seed};
      std::cout << cdl::cmd_run(cfg, out, std::cout).report.text;
    }
    return kOk;
  } catch (const cdl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
}
