#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rhtd {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the domain of a function (log of a nonpositive value, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A forward computation produced NaN/Inf, or a distribution could not be
// normalized.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied configuration (inverted bounds, missing checkpoint, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Not enough data for the requested operation.
class SizeError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Well-formed record that lacks a required field.
class SchemaError : public ParseError {
 public:
  using ParseError::ParseError;
};

// Checkpoint errors. Each kind is distinguishable by type.
class CheckpointError : public Error {
 public:
  using Error::Error;
};
class FormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncationError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Two artifacts (checkpoint, config, vocabulary) that cannot be combined.
class IncompatibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace rhtd
