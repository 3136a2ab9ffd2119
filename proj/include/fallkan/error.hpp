#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fallkan {

/// Bad input data or configuration. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// ADC count outside the sensor's signed range.
class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Cross-file consistency failure (missing profile, bad annotation span, ...).
class IntegrityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Numerical breakdown (non-finite activations, divergence).
class NumericError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// File system failure. The CLI maps this to exit code 2.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace fallkan
