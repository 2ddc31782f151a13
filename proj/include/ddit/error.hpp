#pragma once

#include <stdexcept>
#include <string>

namespace ddit {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { usage = 2, validation = 3, runtime = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::usage, w) {}
};

// Bad shapes, out-of-range arguments, missing inputs.
struct ValidationError : Error {
  explicit ValidationError(const std::string& w) : Error(ErrorKind::validation, w) {}
};

// Non-finite activations, exploding loss, ill-conditioned projections.
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::runtime, w) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorKind::runtime, w) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace ddit
