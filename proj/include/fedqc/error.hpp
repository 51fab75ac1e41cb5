#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedqc {

/// Process exit codes used by the command line harness.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kData = 3,
  kDivergence = 4,
  kProtocol = 5,
};

/// Base class of every library error. The message always starts with
/// "<module>.<operation>: " so a failure can be traced to its origin.
class Error : public std::runtime_error {
 public:
  Error(std::string_view module, std::string_view operation, const std::string& message)
      : std::runtime_error(std::string(module) + "." + std::string(operation) + ": " + message),
        module_(module),
        operation_(operation) {}

  virtual ExitCode code() const noexcept = 0;
  const std::string& module() const noexcept { return module_; }
  const std::string& operation() const noexcept { return operation_; }

 private:
  std::string module_;
  std::string operation_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kConfig; }
};

/// Bad input data: unknown tokens, malformed files, impossible corruptions.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kData; }
};

/// Non-finite loss during training, or a linear solve that failed.
class NumericalError : public Error {
 public:
  NumericalError(std::string_view module, std::string_view operation, const std::string& message,
                 std::size_t step = 0)
      : Error(module, operation, message), step_(step) {}
  ExitCode code() const noexcept override { return ExitCode::kDivergence; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kProtocol; }
};

/// Rethrows `e` as the same error category with extra context prepended.
[[noreturn]] inline void rethrow_with_context(const Error& e, std::string_view module, std::string_view operation,
                                              const std::string& context) {
  const std::string msg = context + ": " + e.what();
  switch (e.code()) {
    case ExitCode::kConfig: throw ConfigError(module, operation, msg);
    case ExitCode::kData: throw DataError(module, operation, msg);
    case ExitCode::kDivergence: throw NumericalError(module, operation, msg);
    case ExitCode::kProtocol:
    case ExitCode::kOk: break;
  }
  throw ProtocolError(module, operation, msg);
}

}  // namespace fedqc
