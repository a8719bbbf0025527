#pragma once

#include <stdexcept>
#include <string>

namespace mwmhe {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent shapes, malformed files, failed structural assumptions.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Factorization failures, divergence, solver breakdown.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class SingularUpdateError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, int iterations)
      : NumericalError(what), iterations_(iterations) {}
  int iterations() const { return iterations_; }

 private:
  int iterations_;
};

class InfeasibleDynamicsError : public NumericalError {
 public:
  InfeasibleDynamicsError(const std::string& what, int step)
      : NumericalError(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

class HorizonSelectionError : public NumericalError {
 public:
  HorizonSelectionError(const std::string& what, double achieved)
      : NumericalError(what), achieved_(achieved) {}
  double achieved_norm() const { return achieved_; }

 private:
  double achieved_;
};

}  // namespace mwmhe
