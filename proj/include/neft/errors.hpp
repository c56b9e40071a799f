#pragma once

#include <stdexcept>
#include <string>

namespace neft {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or matrix extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid architecture or layer configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// API misuse: calling an operation whose preconditions do not hold.
class ContractError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

/// Co-located antennas make the channel coefficient unbounded.
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Teacher and student cannot be aligned layer-for-layer.
class DistillCompatibilityError : public Error {
 public:
  using Error::Error;
};

/// A layer kind with no FLOPs/parameter rule.
class AccountingError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset, checkpoint, or report file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace neft
