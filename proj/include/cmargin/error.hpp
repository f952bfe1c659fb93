#pragma once

#include <stdexcept>
#include <string>

namespace cmargin {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
  public:
    using Error::Error;
};

/// Bad, missing or inconsistent data on disk or in memory (CLI exit code 3).
class DataError : public Error {
  public:
    using Error::Error;
};

/// Operand shapes or indices that do not fit together.
class ShapeError : public DataError {
  public:
    using DataError::DataError;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public DataError {
  public:
    using DataError::DataError;
};

/// Failure decoding a portable tensor file.
class FormatError : public DataError {
  public:
    enum class Kind { bad_magic, truncated, extent_overflow, trailing_bytes, io };

    FormatError(Kind kind, const std::string& what);
    Kind kind() const noexcept { return kind_; }

  private:
    Kind kind_;
};

/// Non-finite or divergent numerics (CLI exit code 4).
class NumericError : public Error {
  public:
    using Error::Error;
};

/// The decision boundary cannot be reached along the permitted directions:
/// the (projected) gradient difference vanishes.
class UnreachableError : public NumericError {
  public:
    using NumericError::NumericError;
};

const char* to_string(FormatError::Kind kind) noexcept;

}  // namespace cmargin
