#pragma once

#include <stdexcept>
#include <string>

namespace rino {

/// Base of every error thrown by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments or configuration (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Mesh file could not be parsed; message carries the line or byte offset.
class ParseError : public DataError {
 public:
  using DataError::DataError;
};

/// Archive checksum or truncation failure.
class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

/// Factorization failure, non-convergence, NaN loss (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace rino
