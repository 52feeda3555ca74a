#pragma once

#include <stdexcept>
#include <string>

namespace dia {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto its exit-code contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when an op produces a non-finite value; `opcode()` names the op.
class NumericError : public Error {
 public:
  NumericError(std::string opcode, const std::string& what)
      : Error(what), opcode_(std::move(opcode)) {}
  const std::string& opcode() const { return opcode_; }

 private:
  std::string opcode_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace dia
