#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cdl/gradcheck.hpp"

namespace cdl {

struct GradCheckCase {
  std::string name;
  std::string kind;  // primitive, loss, composite
  double tolerance = 1e-5;
  std::function<GradCheckResult()> run;
};

struct GradCheckRow {
  std::string name;
  std::string kind;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;  // worst parameter, or the exception text
};

// Every primitive, each pool and distillation loss, and a full KDP forward.
std::vector<GradCheckCase> gradcheck_suite();

std::vector<GradCheckRow> run_gradcheck(std::span<const GradCheckCase> cases);

}  // namespace cdl
