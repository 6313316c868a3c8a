/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <stdexcept>
#include <string>

namespace varest {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input shapes do not agree (vector lengths, observation dims, step counts).
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A covariance failed its positive (semi)definiteness check.
class NotPSD : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure did not reach its tolerance.
class NonConvergence : public Error {
 public:
  NonConvergence(const std::string& what, double residual, int iterations)
      : Error(what), residual_(residual), iterations_(iterations) {}
  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

/// Forward propagation produced NaN or Inf.
class NonFiniteState : public Error {
 public:
  NonFiniteState(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

class DimensionTooLarge : public Error {
 public:
  using Error::Error;
};

class StabilityViolation : public Error {
 public:
  using Error::Error;
};

/// The linearization point is not stationary enough for first-order estimates.
class NotAtOptimum : public Error {
 public:
  NotAtOptimum(const std::string& what, double kkt_residual)
      : Error(what), kkt_residual_(kkt_residual) {}
  double kkt_residual() const noexcept { return kkt_residual_; }

 private:
  double kkt_residual_;
};

class SingularConstraintJacobian : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace varest
