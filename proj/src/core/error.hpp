#pragma once

#include <stdexcept>
#include <string>

namespace mergcn {

enum class ErrorCode {
  InvalidArgument,
  Shape,
  Io,
  Parse,
  Validation,
  Numeric,
  Mismatch,
  EmptySelection,
  CheckFailed,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mergcn
