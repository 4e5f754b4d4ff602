#pragma once

#include <stdexcept>
#include <string>

namespace dualnorm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-facing configuration (bad flag, bad JSON value, infeasible setup).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A file is truncated, corrupted or inconsistent with its manifest.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace dualnorm
