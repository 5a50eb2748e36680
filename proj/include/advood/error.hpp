#pragma once

#include <stdexcept>
#include <string>

namespace advood {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimension or argument-shape mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized input. `field()` names the offending part of the file.
class ParseError : public Error {
 public:
  ParseError(std::string field, const std::string& what)
      : Error("parse error in '" + field + "': " + what),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// A value that parsed fine but violates a domain invariant (pixel range,
// label range, ...).
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration. `field()` is a JSON-pointer-like path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config error at '" + field + "': " + what),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// A pipeline stage was invoked before the stage producing its inputs.
class MissingStageError : public Error {
 public:
  using Error::Error;
};

}  // namespace advood
