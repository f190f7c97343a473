#pragma once

#include <stdexcept>
#include <string>

namespace air {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual ExitCode exit_code() const noexcept { return ExitCode::kFailure; }
};

// Bad shapes or empty inputs handed to an operation.
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment or attack configuration. Carries the offending field path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field_path, const std::string& message)
      : Error(field_path.empty() ? message : field_path + ": " + message),
        field_path_(std::move(field_path)) {}

  [[nodiscard]] const std::string& field_path() const noexcept { return field_path_; }
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }

 private:
  std::string field_path_;
};

class DataError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::kData; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

// Attack crafting hit a non-finite gradient.
class CraftingError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Sequence protocol violated, e.g. a distillation method run without its teacher.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace air
