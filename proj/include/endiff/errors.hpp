#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace endiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised when a 3x3 block (or the aggregate V) cannot be inverted.
class SingularTransform : public Error {
 public:
  SingularTransform(const std::string& what, std::ptrdiff_t node)
      : Error(what), node_(node) {}

  /// Offending node index, or -1 for the aggregate matrix V.
  std::ptrdiff_t node() const { return node_; }

 private:
  std::ptrdiff_t node_;
};

/// Non-finite value encountered; `stage` names where it appeared.
class NumericError : public Error {
 public:
  NumericError(const std::string& stage, const std::string& what)
      : Error(stage + ": " + what), stage_(stage) {}

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Checkpoint with a bad magic, truncated body or checksum mismatch.
class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace endiff
