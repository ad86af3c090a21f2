#pragma once

#include <exception>
#include <stdexcept>
#include <string>

namespace fibermap {

// Base for all library errors. The CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition or configuration value is out of range.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Reading or writing a file failed, or its contents are malformed.
class IoError : public Error {
 public:
  using Error::Error;
};

// A numerical stage cannot proceed (rank deficiency, degenerate data).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Wraps an error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, std::exception_ptr cause = nullptr)
      : Error(stage + ": " + what), stage_(std::move(stage)), cause_(std::move(cause)) {}
  const std::string& stage() const noexcept { return stage_; }
  // The original exception, when there was one.
  std::exception_ptr cause() const noexcept { return cause_; }

 private:
  std::string stage_;
  std::exception_ptr cause_;
};

}  // namespace fibermap
