#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dbr {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DTypeError : public Error {
 public:
  using Error::Error;
};

// Raised when a backward implementation touches an input or output it did
// not declare for retention, or when a retention index is out of range.
class RetentionError : public Error {
 public:
  using Error::Error;
};

// Raised when backpropagating through a graph whose edges were already
// released by an earlier backward pass.
class GraphReleasedError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& message)
      : Error("at offset " + std::to_string(offset) + ": " + message), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class KernelError : public Error {
 public:
  using Error::Error;
};

class SerializationError : public Error {
 public:
  using Error::Error;
};

class CommError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public CommError {
 public:
  using CommError::CommError;
};

class ShapeMismatchError : public CommError {
 public:
  using CommError::CommError;
};

}  // namespace dbr
