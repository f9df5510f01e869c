#include "cdl/metrics.hpp"

#include "cdl/error.hpp"

namespace cdl {

ResultMatrix::ResultMatrix(int tasks) {
  CDL_REQUIRE(tasks >= 1, "result matrix needs at least one task");
  for (int i = 0; i < tasks; ++i) {
    rows_.emplace_back(i + 1, 0.0);
    filled_.emplace_back(i + 1, false);
  }
}

void ResultMatrix::set(int i, int j, double accuracy) {
  CDL_REQUIRE(0 <= j && j <= i && i < tasks(), "result entry outside the lower triangle");
  CDL_REQUIRE(accuracy >= 0.0 && accuracy <= 100.0, "accuracy must be a percentage");
  rows_[i][j] = accuracy;
  filled_[i][j] = true;
}

bool ResultMatrix::has(int i, int j) const { return 0 <= j && j <= i && i < tasks() && filled_[i][j]; }

double ResultMatrix::at(int i, int j) const {
  CDL_REQUIRE(has(i, j), "result entry not filled");
  return rows_[i][j];
}

bool ResultMatrix::complete() const {
  if (rows_.empty()) return false;
  for (const auto& row : filled_)
    for (bool f : row)
      if (!f) return false;
  return true;
}

double avg_accuracy(const ResultMatrix& r) {
  CDL_REQUIRE(r.complete(), "avg_accuracy needs a complete result matrix");
  const int t = r.tasks();
  double s = 0.0;
  for (int j = 0; j < t; ++j) s += r.at(t - 1, j);
  return s / t;
}

double forgetting(const ResultMatrix& r) {
  if (r.tasks() < 2) throw UndefinedMetric("forgetting needs at least two tasks");
  CDL_REQUIRE(r.complete(), "forgetting needs a complete result matrix");
  const int t = r.tasks();
  double s = 0.0;
  for (int i = 0; i + 1 < t; ++i) s += r.at(i, i) - r.at(t - 1, i);
  return s / (t - 1);
}

MetricsReport make_report(const ResultMatrix& r, std::uint64_t seed, double wall_seconds) {
  MetricsReport m;
  m.avg_accuracy = avg_accuracy(r);
  if (r.tasks() < 2)
    m.forgetting_undefined = true;
  else
    m.forgetting = forgetting(r);
  m.final_accuracies = r.rows().back();
  m.wall_seconds = wall_seconds;
  m.seed = seed;
  return m;
}

}  // namespace cdl
