#pragma once

#include <stdexcept>
#include <string>

namespace protoquant {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class DomainError : public Error {
public:
  using Error::Error;
};

class EmptyCodebookError : public Error {
public:
  EmptyCodebookError() : Error("codebook has no active codes") {}
  using Error::Error;
};

class CapacityError : public Error {
public:
  using Error::Error;
};

class StateError : public Error {
public:
  using Error::Error;
};

class IndexError : public Error {
public:
  using Error::Error;
};

class DegenerateModelError : public Error {
public:
  using Error::Error;
};

// File format errors. Each failure class has its own type so callers (and the
// CLI diagnostics) can tell them apart.
class FormatError : public Error {
public:
  using Error::Error;
};

class BadMagicError : public FormatError {
public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
public:
  using FormatError::FormatError;
};

class TruncatedPayloadError : public FormatError {
public:
  using FormatError::FormatError;
};

class ShapeMismatchError : public FormatError {
public:
  using FormatError::FormatError;
};

/// A mutation was issued against a model version that is no longer current.
class ConflictError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace protoquant
