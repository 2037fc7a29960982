#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace gsae {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Root-finding bracket does not straddle the target.
class BracketError : public Error {
 public:
  using Error::Error;
};

// Optimizer never saw a finite objective value, or gave up.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> best_point, double best_value)
      : Error(what), best_point_(std::move(best_point)), best_value_(best_value) {}

  const std::vector<double>& best_point() const noexcept { return best_point_; }
  double best_value() const noexcept { return best_value_; }

 private:
  std::vector<double> best_point_;
  double best_value_;
};

// Input data problems: missing columns, bad values, missing covariates.
class DataError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line) : DataError(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public DataError {
 public:
  ValidationError(const std::string& what, std::vector<std::size_t> rows)
      : DataError(what), rows_(std::move(rows)) {}
  const std::vector<std::size_t>& rows() const noexcept { return rows_; }

 private:
  std::vector<std::size_t> rows_;
};

// A model quantity could not be evaluated (overflow, failed mode search, ...).
class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Posterior moment E[1/u] does not exist.
class MomentError : public Error {
 public:
  using Error::Error;
};

// Random variate generation failed (bracket expansion, degenerate weights).
class SamplerError : public Error {
 public:
  using Error::Error;
};

// An estimator could not be assembled (too many failed bootstrap refits, ...).
class EstimatorError : public Error {
 public:
  using Error::Error;
};

}  // namespace gsae
