#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cdl/harness.hpp"

namespace cdl {

// A required input (dataset, backbone) is absent; the message names the
// command that produces it.
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// `report` was asked to summarize zero runs.
class EmptyReport : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainSettings {
  int epochs = 2;
  std::uint64_t seed = 100;
  int batch_size = 32;
  double lr = 1e-3;
  bool operator==(const PretrainSettings&) const = default;
};

struct SweepSettings {
  std::vector<int> kd_prompt_lengths;  // KDP variants "kdp[len=L]"
  std::vector<int> kd_prompt_depths;   // KDP variants "kdp[depth=n]"
  bool kd_grid = false;                // KD prompts x KD classifier cells
  bool unfreeze = false;               // KDP with the last block trainable
  bool operator==(const SweepSettings&) const = default;
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0};
  PoolMethod pool = PoolMethod::CODA;
  std::vector<DistillMethod> methods{DistillMethod::KDP};
  int tasks = 5;
  int epochs = 5;
  int batch_size = 32;
  double lr = 1e-3;
  bool unfreeze_last_block = false;
  DistillConfig distill;
  SweepSettings sweep;
  SyntheticDatasetSpec dataset;
  ViTConfig student = ViTConfig::student_default();
  ViTConfig teacher = ViTConfig::teacher_default();
  PretrainSettings pretrain;
  std::string data_dir = "data";          // relative paths resolve against the output directory
  std::string backbone_dir = "backbones";
  bool auto_generate = false;

  bool operator==(const ExperimentConfig&) const;
};

// Strict: unknown keys and type mismatches raise ConfigError naming the key.
// A "preset" such as "coda-kdp" sets pool and methods before other keys apply.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Fully resolved document; parse_config(echo_config(c)) == c.
std::string echo_config(const ExperimentConfig& c);

struct RunCell {
  std::string label;  // e.g. "kdp", "kdp[len=4]", "kdp[prompts=0,classifier=1]"
  RunConfig config;
};

// Every student cell of one seed, in a fixed order.
std::vector<RunCell> plan_cells(const ExperimentConfig& c, std::uint64_t seed);

RunConfig base_run_config(const ExperimentConfig& c, std::uint64_t seed);

enum class RowKind { Cell, Acc, Forgetting };

struct ReportRow {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string pool;
  std::string distill;
  RowKind kind = RowKind::Cell;
  int trained_task = 0;  // Cell rows only
  int eval_task = 0;
  double accuracy = 0.0;
  bool operator==(const ReportRow&) const = default;
};

inline constexpr std::string_view kCsvHeader = "run_id,seed,pool,distill,trained_task,eval_task,accuracy";

// Cell rows of R followed by ACC and (for T >= 2) FORGETTING rows.
std::vector<ReportRow> result_rows(const std::string& run_id, std::uint64_t seed, const std::string& pool,
                                   const std::string& distill, const ResultMatrix& r);

void write_csv(std::ostream& out, const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_csv(std::istream& in);  // FormatError on malformed input

struct SummaryEntry {
  std::string pool;
  std::string method;
  double acc_mean = 0.0, acc_std = 0.0;
  double forgetting_mean = 0.0, forgetting_std = 0.0;
  bool forgetting_undefined = false;
  int seeds = 0;
  std::vector<double> final_curve;  // mean final accuracy per task
};

struct Report {
  std::vector<SummaryEntry> entries;  // first-appearance order
  std::string text;
  std::string json;
  std::string csv;
};

// Mean and population std over seeds per (pool, method).
Report emit_report(const std::vector<ReportRow>& rows);

struct RunOutput {
  std::vector<ReportRow> rows;
  Report report;
};

// Dataset and backbone locations for a config under `out`.
std::filesystem::path resolve_dir(const std::filesystem::path& out, const std::string& dir);

void cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
void cmd_pretrain(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
// Writes results.csv, config.json, summary.{txt,json,csv} into `out`.
RunOutput cmd_run(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
Report cmd_report(const std::filesystem::path& out);

}  // namespace cdl
