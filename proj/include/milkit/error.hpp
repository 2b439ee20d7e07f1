#pragma once

#include <stdexcept>
#include <string>

namespace milkit {

// Raised for anything the caller handed us that does not satisfy a contract:
// shapes, ranges, config keys, malformed files. The CLI maps it to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed or inconsistent on-disk data (checkpoints, manifests, payloads).
class FormatError : public ValidationError {
 public:
  explicit FormatError(const std::string& what) : ValidationError(what) {}
};

// Non-finite values where the math requires finite ones.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace milkit
