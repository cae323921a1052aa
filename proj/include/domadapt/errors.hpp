#pragma once

#include <stdexcept>
#include <string>

namespace domadapt {

// Error taxonomy shared by all modules. Everything derives from Error so
// callers can catch the whole family at the CLI boundary.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Matrix/vector dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An argument is outside its documented range (negative std, t <= 0, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A computation produced or would produce a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An operation was called in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

// Input data violates a dataset-level contract (unknown domain, empty pool).
class DataError : public Error {
 public:
  using Error::Error;
};

// A file could not be parsed; message carries the line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Parsed records are individually fine but mutually inconsistent.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace domadapt
