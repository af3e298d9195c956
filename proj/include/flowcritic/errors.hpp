#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowcritic {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised by graph evaluation; carries the offending node.
class NodeError : public Error {
 public:
  NodeError(const std::string& what, std::size_t node, std::string label)
      : Error(what), node_(node), label_(std::move(label)) {}
  std::size_t node() const { return node_; }
  const std::string& label() const { return label_; }

 private:
  std::size_t node_;
  std::string label_;
};

class NodeShapeError : public NodeError {
 public:
  using NodeError::NodeError;
};

class NonFiniteError : public NodeError {
 public:
  using NodeError::NodeError;
};

class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class OverflowError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, int err) : Error(what), errno_(err) {}
  int error_number() const { return errno_; }

 private:
  int errno_;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace flowcritic
