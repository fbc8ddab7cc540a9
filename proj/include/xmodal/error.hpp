#pragma once

#include <stdexcept>
#include <string>

namespace xmodal {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition (non-finite values, bad ranges).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor dimensions do not line up; the message names the offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable or malformed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace xmodal
