#pragma once

#include <stdexcept>
#include <string>

namespace chs {

/// Tensor extents do not line up with what an operation requires.
class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

/// A hyperparameter or layer setting is outside its legal range.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// A caller broke an API precondition (e.g. backward from a non-scalar).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Files on disk are missing, unreadable or malformed.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace chs
