#pragma once

#include <stdexcept>
#include <string>

namespace spwt {

// Process exit codes shared by every CLI command.
enum class ExitCode : int {
  ok = 0,
  input = 2,
  fit = 3,
  divergence = 4,
  incomplete = 5,
};

// Base class for failures that map onto a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Malformed files, bad shapes, unreadable or invalid configuration.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ExitCode::input, what) {}
};

// Eigen-solver non-convergence or a degenerate power-law fit.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ExitCode::fit, what) {}
};

// Loss became non-finite during training.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(ExitCode::divergence, what) {}
};

// A pipeline stage is missing outputs it depends on.
class IncompleteError : public Error {
 public:
  explicit IncompleteError(const std::string& what) : Error(ExitCode::incomplete, what) {}
};

}  // namespace spwt
