#pragma once

#include <stdexcept>
#include <string>

namespace mtp {

/// Invalid configuration detected while building or parsing (exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape does not satisfy a block's contract.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or unreadable dataset content (exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An image file exists but cannot be decoded. Bulk loading skips these.
class CorruptImageError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss or similar numerical breakdown (exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mtp
