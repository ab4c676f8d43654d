#pragma once

#include <stdexcept>
#include <string>

namespace magic {

/// Invalid shapes, channel counts or hyper-parameters supplied by the caller.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf where finite values are required; signals corrupted upstream state.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable, undecodable or unwritable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace magic
