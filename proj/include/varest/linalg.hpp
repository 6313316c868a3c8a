/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "varest/errors.hpp"

namespace varest {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// True when every entry is finite.
bool all_finite(const Vec& v);

// -----------------------------------------------------------------------------
// Symmetric operators
// -----------------------------------------------------------------------------

/// Matrix-free symmetric linear operator of fixed dimension.
class SymOp {
 public:
  using ApplyFn = std::function<Vec(const Vec&)>;

  SymOp(Index dim, ApplyFn apply);

  /// Wraps an explicit symmetric matrix.
  static SymOp from_matrix(Mat m);
  static SymOp identity(Index dim);

  Index dim() const noexcept { return dim_; }
  Vec apply(const Vec& v) const;
  Vec operator()(const Vec& v) const { return apply(v); }

  /// Dense matrix obtained by applying the operator to each unit vector.
  Mat assemble() const;

 private:
  Index dim_;
  ApplyFn apply_;
};

/// Relative symmetry defect |<u, A v> - <v, A u>| / (|u| |A v| + |v| |A u|).
double symmetry_defect(const SymOp& op, const Vec& u, const Vec& v);

// -----------------------------------------------------------------------------
// Covariances
// -----------------------------------------------------------------------------

/// Symmetric positive semidefinite covariance, stored diagonally or densely.
///
/// A square-root factor S with S S^T = C is kept for sampling. Inverse
/// application is only available when the matrix is strictly positive
/// definite.
class CovMatrix {
 public:
  CovMatrix() = default;

  static CovMatrix diagonal(Vec variances);
  static CovMatrix scaled_identity(Index dim, double variance);
  /// `psd_tol` is the tolerated negative eigenvalue, relative to the trace.
  static CovMatrix dense(Mat matrix, double psd_tol = 1e-10);

  Index dim() const noexcept { return dim_; }
  bool is_diagonal() const noexcept { return diagonal_; }
  bool is_positive_definite() const noexcept { return positive_definite_; }

  Vec apply(const Vec& v) const;
  /// C^{-1} v; throws NotPSD for singular covariances.
  Vec solve(const Vec& v) const;
  /// S z with S S^T = C.
  Vec sqrt_apply(const Vec& z) const;

  Vec diagonal_entries() const;
  Mat to_dense() const;

 private:
  Index dim_ = 0;
  bool diagonal_ = true;
  bool positive_definite_ = false;
  Vec diag_;
  Mat dense_;
  Mat factor_;
  Eigen::LLT<Mat> llt_;
};

// -----------------------------------------------------------------------------
// Conjugate gradients
// -----------------------------------------------------------------------------

struct CgOptions {
  double tol = 1e-10;  ///< relative residual |A x - b| <= tol |b|
  int max_iter = 1000;
  /// Optional diagonal preconditioner (entries approximate diag(A)).
  std::optional<Vec> diagonal_preconditioner;
  /// Called after every iteration with the current iterate and residual norm.
  std::function<void(int, const Vec&, double)> monitor;
};

struct CgResult {
  Vec x;
  int iterations = 0;
  double residual_norm = 0.0;   ///< final |A x - b|
  std::vector<double> residual_history;
};

/// CG reached pAp <= 0; the last iterate is kept so callers can fall back.
class NegativeCurvature : public Error {
 public:
  NegativeCurvature(const std::string& what, Vec last_iterate, double curvature,
                    int iteration)
      : Error(what),
        last_iterate_(std::move(last_iterate)),
        curvature_(curvature),
        iteration_(iteration) {}
  const Vec& last_iterate() const noexcept { return last_iterate_; }
  double curvature() const noexcept { return curvature_; }
  int iteration() const noexcept { return iteration_; }

 private:
  Vec last_iterate_;
  double curvature_;
  int iteration_;
};

/// Solves op(x) = rhs by (optionally diagonally preconditioned) conjugate
/// gradients starting from zero.
///
/// Throws NegativeCurvature when p^T A p <= 0 and NonConvergence when the
/// relative residual is above `tol` after `max_iter` iterations.
CgResult cg_solve(const SymOp& op, const Vec& rhs, const CgOptions& opts = {});

// -----------------------------------------------------------------------------
// Limited-memory BFGS
// -----------------------------------------------------------------------------

/// No step satisfying the Wolfe conditions could be found.
class LineSearchFailure : public Error {
 public:
  LineSearchFailure(const std::string& what, Vec last_iterate, double grad_norm)
      : Error(what), last_iterate_(std::move(last_iterate)), grad_norm_(grad_norm) {}
  const Vec& last_iterate() const noexcept { return last_iterate_; }
  double grad_norm() const noexcept { return grad_norm_; }

 private:
  Vec last_iterate_;
  double grad_norm_;
};

/// f(x) with its gradient written into `grad`.
using ObjectiveFn = std::function<double(const Vec& x, Vec& grad)>;

struct LbfgsOptions {
  double grad_tol = 1e-8;
  int max_iter = 500;
  int memory = 10;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search = 40;
  /// After a Wolfe step is found, try one secant step on the directional
  /// derivative. Exact on quadratics, which restores finite termination.
  bool secant_refinement = true;
};

struct LbfgsResult {
  Vec x;
  double f = 0.0;
  Vec grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  /// Two-loop recursion over the stored correction pairs.
  SymOp inverse_hessian = SymOp::identity(0);
  std::vector<double> f_history;
  std::vector<double> grad_norm_history;
};

/// Minimizes f from `x0` with a strong-Wolfe line search.
///
/// Reaching max_iter is reported through `converged = false`. Throws
/// LineSearchFailure when no acceptable step exists even along steepest
/// descent.
LbfgsResult lbfgs_minimize(const ObjectiveFn& f, Vec x0, const LbfgsOptions& opts = {});

// -----------------------------------------------------------------------------
// Finite differences
// -----------------------------------------------------------------------------

/// cbrt(machine epsilon) * (1 + |x|_inf).
double default_fd_step(const Vec& x);

/// Central-difference gradient of a scalar function.
Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                std::optional<double> step = std::nullopt);

/// Central-difference directional derivative of a vector function:
/// (g(x + h d) - g(x - h d)) / 2h.
Vec fd_jacvec(const std::function<Vec(const Vec&)>& g, const Vec& x, const Vec& dir,
              std::optional<double> step = std::nullopt);

}  // namespace varest
