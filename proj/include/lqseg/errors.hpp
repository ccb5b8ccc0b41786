#pragma once

#include <stdexcept>
#include <string>

namespace lqseg {

// Shape/dimension mismatch between tensors or between a tensor and an op.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated an operation's precondition.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content. `offset` is the byte position of the first
// inconsistency when known, -1 otherwise.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, long long offset = -1)
      : std::runtime_error(msg), offset_(offset) {}
  long long offset() const { return offset_; }

 private:
  long long offset_;
};

// File is well-formed but describes a different schema (K_attr, d, ...).
class SchemaError : public std::runtime_error {
 public:
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or other numerical breakdown during training/inference.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Scene generation could not satisfy its constraints.
class GenerationError : public std::runtime_error {
 public:
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lqseg
