#pragma once

#include <stdexcept>
#include <string>

namespace vebhmm {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An argument lies outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// An iterative solver ran out of iterations before meeting its tolerance.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Floating point breakdown (underflow of a whole message column, NaN, ...).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Ensemble moments that cannot define a proper Normal-Gamma prior.
class DegenerateMomentsError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Malformed input data (trace files, truth files, configs).
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid command line usage.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace vebhmm
