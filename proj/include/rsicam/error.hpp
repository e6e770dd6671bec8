#pragma once

#include <stdexcept>
#include <string>

namespace rsicam {

// Root of every error the library raises. The CLI maps the subclasses onto
// distinct exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
public:
  using Error::Error;
};

// An argument outside its documented domain (negative epsilon, zero size...).
class ParameterError : public Error {
public:
  using Error::Error;
};

// Unknown layer name or class index.
class LookupError : public Error {
public:
  using Error::Error;
};

// A file was readable but its contents are malformed.
class FormatError : public Error {
public:
  using Error::Error;
};

// Structurally valid input that violates a model invariant (broken shape chain).
class ValidationError : public Error {
public:
  using Error::Error;
};

// Evaluation protocol could not produce a result (empty dataset, Y = 0).
class EvaluationError : public Error {
public:
  using Error::Error;
};

// File could not be read or written.
class IoError : public Error {
public:
  using Error::Error;
};

// A computation produced NaN or Inf.
class NumericError : public Error {
public:
  using Error::Error;
};

} // namespace rsicam
