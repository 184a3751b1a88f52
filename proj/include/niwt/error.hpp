#pragma once

#include <stdexcept>
#include <string>

namespace niwt {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kNonFinite,
  kConfig,
  kMissingPrerequisite,
  kNumerical,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace niwt
