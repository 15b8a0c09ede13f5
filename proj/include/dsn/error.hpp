#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dsn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (layer specs, hyperparameters, CLI values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad input data: labels out of range, unlabeled corpus where labels are needed.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed text file. `line()` is 1-based.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// API misuse: stale forward cache, splicing an already-spliced corpus, empty batches.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became NaN/Inf during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace dsn
