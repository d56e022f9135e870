#pragma once

#include <stdexcept>
#include <string>

namespace liwn {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents that do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration, unknown names, invalid filter assets.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed files (dataset records, checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward without a cached forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace liwn
