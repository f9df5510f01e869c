#pragma once

#include <stdexcept>
#include <string>

namespace cdl {

// Broken precondition: wrong shapes, bad hyperparameters, misuse of an API.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Zero-norm vectors fed to cosine similarity and similar degenerate inputs.
class DegenerateInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when training touches a sample outside the current task.
class RehearsalAuditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CDL_REQUIRE(cond, msg)                                              \
  do {                                                                      \
    if (!(cond)) throw ::cdl::ContractViolation(std::string(msg));          \
  } while (0)

}  // namespace cdl
