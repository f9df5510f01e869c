#pragma once

#include <cstdint>
#include <vector>

namespace cdl {

/// R[i][j]: test accuracy (percent) on task j after training task i,
/// defined for j <= i.
class ResultMatrix {
 public:
  ResultMatrix() = default;
  explicit ResultMatrix(int tasks);

  int tasks() const { return static_cast<int>(rows_.size()); }
  void set(int i, int j, double accuracy);
  double at(int i, int j) const;
  bool has(int i, int j) const;
  // Every entry with j <= i is filled.
  bool complete() const;
  const std::vector<std::vector<double>>& rows() const { return rows_; }
  bool operator==(const ResultMatrix&) const = default;

 private:
  std::vector<std::vector<double>> rows_;  // row i has i+1 slots
  std::vector<std::vector<bool>> filled_;
};

// Mean final-row accuracy.
double avg_accuracy(const ResultMatrix& r);
// Mean drop R[i][i] - R[T][i] over all tasks but the last. Needs T >= 2.
double forgetting(const ResultMatrix& r);

struct MetricsReport {
  double avg_accuracy = 0.0;
  double forgetting = 0.0;
  bool forgetting_undefined = false;  // T = 1; reported as 0
  std::vector<double> final_accuracies;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

MetricsReport make_report(const ResultMatrix& r, std::uint64_t seed, double wall_seconds);

}  // namespace cdl
