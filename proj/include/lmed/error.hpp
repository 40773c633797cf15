#pragma once

#include <stdexcept>
#include <string>

namespace lmed {

// Exit-code vocabulary shared by the library's exception types and the CLI.
enum class ExitCode : int { ok = 0, validation = 2, numeric = 3, resource = 4 };

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Malformed input: bad schema, bad spec file, invalid configuration.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ExitCode::validation, what) {}
};

// Non-finite estimates, failed solves.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ExitCode::numeric, what) {}
};

// Enumeration state space exceeds the guard.
class ResourceError : public Error {
 public:
  explicit ResourceError(const std::string& what) : Error(ExitCode::resource, what) {}
};

}  // namespace lmed
