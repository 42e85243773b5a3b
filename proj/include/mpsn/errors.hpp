#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mpsn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two operands disagree on shape.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input image is too small for the stride-16 backbone.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// A call violated a documented precondition (wrong stride, length mismatch).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace mpsn
