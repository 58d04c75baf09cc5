#pragma once

#include <stdexcept>
#include <string>

namespace vtlm {

/// Root of every exception the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct IndexError : Error {
  using Error::Error;
};

/// Non-finite values reached an operation whose domain excludes them.
struct NumericDomainError : Error {
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
struct UsageError : Error {
  using Error::Error;
};

/// Invalid configuration. The CLI maps this to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

/// Bad or missing data on disk. The CLI maps this to exit code 3.
struct DataError : Error {
  using Error::Error;
};

struct ParseError : DataError {
  ParseError(const std::string& what, std::size_t line)
      : DataError("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct SchemaError : DataError {
  using DataError::DataError;
};

struct TransferError : Error {
  using Error::Error;
};

/// Training produced a non-finite loss. The CLI maps this to exit code 4.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace vtlm
