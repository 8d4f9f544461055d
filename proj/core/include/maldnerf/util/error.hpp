#pragma once

#include <stdexcept>
#include <string>

namespace maldnerf {

// All recoverable failures in the library are thrown as Error. `kind` is a
// stable machine-readable tag ("empty mask", "non-mask pixels modified", ...)
// used by tests and by the CLI to map failures to exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

[[noreturn]] inline void raise(const std::string& kind, const std::string& message) {
  throw Error(kind, kind + ": " + message);
}

inline void require(bool cond, const std::string& kind, const std::string& message) {
  if (!cond) raise(kind, message);
}

}  // namespace maldnerf
