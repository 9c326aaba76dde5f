#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cel {

/// Input violates a documented precondition or data invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file content. Carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// An estimator is undefined on the given data (empty arm, zero denominator, ...).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Iterative solver failed to converge or produced non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A cooperative wall-clock budget was exceeded.
class TimeoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cel
