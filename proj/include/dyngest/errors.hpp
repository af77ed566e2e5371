#ifndef DYNGEST_ERRORS_HPP
#define DYNGEST_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace dyngest {

// Bad shapes, invalid hyperparameters, rejected configs.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite math is required.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files (tensor blobs, manifests, checkpoints).
class FormatError : public std::runtime_error {
public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dyngest

#endif  // DYNGEST_ERRORS_HPP
