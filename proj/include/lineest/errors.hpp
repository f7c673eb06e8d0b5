#pragma once

#include <stdexcept>
#include <string>

namespace lineest {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (files, dimensions, configuration).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure could not produce a trustworthy result.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public DataError {
 public:
  SchemaError(const std::string& where, const std::string& what)
      : DataError(where.empty() ? what : where + ": " + what) {}
};

class PhaseConsistencyError : public DataError {
 public:
  using DataError::DataError;
};

class DimensionMismatch : public DataError {
 public:
  using DataError::DataError;
};

class EmptyComparableSet : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class SingularImpedance : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonConvergence : public NumericalError {
 public:
  NonConvergence(const std::string& what, double residual)
      : NumericalError(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class Divergence : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateSamples : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SingularCovariance : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class LogBranchError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonPositiveTau : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IllConditionedL : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace lineest
