#pragma once

#include <stdexcept>
#include <string>

namespace tcspc {

// Bad input: configuration, arguments, preconditions. CLI exit status 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A field-specific validation failure; field() names the offending key.
class FieldError : public ValidationError {
 public:
  FieldError(std::string field, const std::string& what)
      : ValidationError(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class AxisTooShortError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures while computing: fits, studies, I/O. CLI exit status 2.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FitError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

}  // namespace tcspc
