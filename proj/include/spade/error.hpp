#pragma once

#include <stdexcept>
#include <string>

namespace spade {

// Base class for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Singular solves, non-finite losses, unstable recurrences.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad configuration value. `key()` names the offending entry when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message, std::string key = {})
      : Error(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Malformed checkpoint or data file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Memory budget exceeded, unreadable paths.
class ResourceError : public Error {
 public:
  using Error::Error;
};

}  // namespace spade
