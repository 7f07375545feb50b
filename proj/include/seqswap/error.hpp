#pragma once

#include <stdexcept>
#include <string>

namespace seqswap {

// Error categories map one-to-one onto the C API status codes and the CLI
// exit codes.
enum class ErrorCategory : int {
  kShape = 2,
  kContract = 3,
  kFormat = 4,
  kDependency = 5,
  kIo = 6,
  kConfig = 7,
};

const char* category_name(ErrorCategory c) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorCategory::kShape, w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorCategory::kContract, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorCategory::kFormat, w) {}
};
struct DependencyError : Error {
  explicit DependencyError(const std::string& w) : Error(ErrorCategory::kDependency, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::kIo, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::kConfig, w) {}
};

}  // namespace seqswap
