// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedsim {

// Error classes. The CLI maps UserError subclasses to exit status 1 and
// everything else to exit status 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UserError : public Error {
 public:
  using Error::Error;
};

// Shapes that do not conform for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// An iterative numerical routine failed (e.g. SVD non-convergence).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Packets whose records disagree with the receiver's model layout.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Malformed binary input. Carries the byte offset where decoding failed.
class FormatError : public UserError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : UserError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ValidationError : public UserError {
 public:
  using UserError::UserError;
};

class ConfigError : public UserError {
 public:
  using UserError::UserError;
};

class ParseError : public UserError {
 public:
  using UserError::UserError;
};

class IoError : public UserError {
 public:
  using UserError::UserError;
};

}  // namespace fedsim
