/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "varest/linalg.hpp"
#include "varest/model.hpp"

namespace varest {

// -----------------------------------------------------------------------------
// Observations
// -----------------------------------------------------------------------------

/// Observation operator H_k mapping state space to observation space.
///
/// Second derivatives of the operator are not used anywhere, so nonlinear
/// operators get a Gauss-Newton treatment of their own curvature.
class ObsOperator {
 public:
  virtual ~ObsOperator() = default;
  virtual Index input_dim() const = 0;
  virtual Index output_dim() const = 0;
  virtual Vec apply(const Vec& x) const = 0;
  virtual Vec jac_apply(const Vec& x, const Vec& dx) const = 0;
  virtual Vec adj_apply(const Vec& x, const Vec& w) const = 0;
};

using ObsOperatorPtr = std::shared_ptr<const ObsOperator>;

class IdentityObs final : public ObsOperator {
 public:
  explicit IdentityObs(Index n) : n_(n) {}
  Index input_dim() const override { return n_; }
  Index output_dim() const override { return n_; }
  Vec apply(const Vec& x) const override { return x; }
  Vec jac_apply(const Vec&, const Vec& dx) const override { return dx; }
  Vec adj_apply(const Vec&, const Vec& w) const override { return w; }

 private:
  Index n_;
};

/// Picks the listed state components.
class SubsetObs final : public ObsOperator {
 public:
  SubsetObs(Index n, std::vector<Index> indices);
  Index input_dim() const override { return n_; }
  Index output_dim() const override { return static_cast<Index>(indices_.size()); }
  Vec apply(const Vec& x) const override;
  Vec jac_apply(const Vec& x, const Vec& dx) const override;
  Vec adj_apply(const Vec& x, const Vec& w) const override;
  const std::vector<Index>& indices() const { return indices_; }

 private:
  Index n_;
  std::vector<Index> indices_;
};

struct Observation {
  int time = 0;
  Vec y;
  ObsOperatorPtr op;
  CovMatrix R;
};

/// Data errors keyed by observation time.
using DataErrors = std::map<int, Vec>;

/// Observations at a sparse subset of times 0..N; unobserved times contribute
/// nothing to the cost.
class ObservationSet {
 public:
  /// Throws DimensionMismatch on inconsistent sizes or duplicate times and
  /// NotPSD when R is not strictly positive definite.
  void add(Observation obs);

  const Observation* find(int k) const;
  const std::vector<Observation>& entries() const { return entries_; }
  std::vector<int> times() const;
  bool empty() const { return entries_.empty(); }

  /// Copy with y_k replaced by y_k + dy_k for every listed time.
  ObservationSet with_errors(const DataErrors& dy) const;

 private:
  std::vector<Observation> entries_;  // sorted by time
};

struct Background {
  Vec xb;
  CovMatrix B;
};

/// Strongly constrained 4D-Var: control is x_0, the model holds exactly.
struct FourDVarProblem {
  ModelPtr model;
  ObservationSet obs;
  Background background;

  /// Throws DimensionMismatch / NotPSD when the pieces do not fit together.
  void validate() const;
};

// -----------------------------------------------------------------------------
// Cost, gradient, Hessian
// -----------------------------------------------------------------------------

/// 1/2 |x0 - xb|^2_{B^-1} + 1/2 sum_k |H_k(x_k) - y_k|^2_{R_k^-1}.
double cost(const FourDVarProblem& problem, const Vec& x0);

struct GradientResult {
  double cost = 0.0;
  Vec grad;
  Trajectory trajectory;  ///< with adjoints lambda_0..lambda_N
};

/// Adjoint gradient B^-1 (x0 - xb) + lambda_0.
GradientResult gradient(const FourDVarProblem& problem, const Vec& x0);

/// Backward sweep lambda_N..lambda_0 along stored states (fills adjoints).
void adjoint_sweep(const FourDVarProblem& problem, Trajectory& trajectory);

enum class HessianKind {
  full,         ///< includes the second-order adjoint curvature term
  gauss_newton  ///< drops (M^T lambda)_x mu
};

/// Forward tangent-linear mu_k and backward second-order adjoint nu_k sweeps.
struct SecondOrderSweep {
  std::vector<Vec> mu;
  std::vector<Vec> nu;
};

/// mu_0 given; mu_{k+1} = M mu_k;
/// nu_N = H^T R^-1 H mu_N,
/// nu_k = M^T nu_{k+1} + (M^T lambda_{k+1})_x^T mu_k + H^T R^-1 H mu_k.
SecondOrderSweep second_order_sweep(const FourDVarProblem& problem, const Trajectory& trajectory,
                                    const Vec& mu0, HessianKind kind = HessianKind::full);

/// Reduced Hessian-vector product B^-1 u + nu_0 with mu_0 = u.
Vec hess_vec(const FourDVarProblem& problem, const Trajectory& trajectory, const Vec& u,
             HessianKind kind = HessianKind::full);

/// The reduced Hessian as a matrix-free operator (owns copies of its inputs).
SymOp reduced_hessian(const FourDVarProblem& problem, const Trajectory& trajectory,
                      HessianKind kind = HessianKind::full);

/// |B^-1 (x0 - xb) + lambda_0| for a trajectory carrying adjoints.
double kkt_residual(const FourDVarProblem& problem, const Trajectory& trajectory);

// -----------------------------------------------------------------------------
// Minimization
// -----------------------------------------------------------------------------

struct SolverOptions {
  /// Absolute gradient-norm target; defaults to 1e-8 (1 + |cost(x0_guess)|).
  std::optional<double> grad_tol;
  int max_iter = 500;
  int memory = 20;
  /// Newton-CG refinement steps applied after L-BFGS (0 disables).
  int newton_polish = 0;
  double polish_cg_tol = 1e-13;
  HessianKind hessian = HessianKind::full;
  /// Throw NonConvergence when the gradient target is missed.
  bool require_convergence = true;
};

struct AssimilationResult {
  Vec analysis;
  Trajectory trajectory;  ///< forward and adjoint sweeps at the analysis
  double cost = 0.0;
  double grad_norm = 0.0;
  double grad_tol = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_history;
  std::vector<double> grad_norm_history;
  /// L-BFGS inverse-Hessian approximation from the final iterations.
  SymOp inverse_hessian = SymOp::identity(0);
};

/// Minimizes the 4D-Var cost from `x0_guess` with L-BFGS.
AssimilationResult assimilate(const FourDVarProblem& problem, const Vec& x0_guess,
                              const SolverOptions& opts = {});

}  // namespace varest
