/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "varest/estimator.hpp"
#include "varest/fourdvar.hpp"
#include "varest/perturbation.hpp"

namespace varest {

// -----------------------------------------------------------------------------
// Finite-dimensional constrained problems
// -----------------------------------------------------------------------------

/// min_theta J(x, theta) subject to c(x, theta) = 0, with x in R^n and
/// theta in R^m. The Lagrangian is L = J - lambda^T c.
///
/// Second derivatives of L are optional; missing ones are obtained by
/// central differences of L_x and L_theta.
struct FiniteDimProblem {
  Index n = 0;
  Index m = 0;
  std::function<Vec(const Vec& x, const Vec& th)> c;
  std::function<Mat(const Vec& x, const Vec& th)> c_x;      ///< n x n
  std::function<Mat(const Vec& x, const Vec& th)> c_theta;  ///< n x m
  std::function<double(const Vec& x, const Vec& th)> J;
  std::function<Vec(const Vec& x, const Vec& th)> J_x;
  std::function<Vec(const Vec& x, const Vec& th)> J_theta;
  std::function<Mat(const Vec& x, const Vec& th, const Vec& lam)> L_xx;          ///< n x n
  std::function<Mat(const Vec& x, const Vec& th, const Vec& lam)> L_xtheta;      ///< n x m
  std::function<Mat(const Vec& x, const Vec& th, const Vec& lam)> L_thetatheta;  ///< m x m
  QoiFunctional qoi;  ///< E(theta)
};

struct FiniteDimSolution {
  Vec x;
  Vec theta;
  Vec lambda;
  double reduced_grad_norm = 0.0;
};

struct FiniteDimSolveOptions {
  double grad_tol = 1e-12;  ///< absolute target on the reduced gradient
  int max_iter = 2000;
  int newton_polish = 6;
};

/// Solves the problem by L-BFGS on the reduced cost theta -> J(x(theta), theta)
/// followed by Newton steps with a finite-difference reduced Hessian.
FiniteDimSolution solve_finite_dim(const FiniteDimProblem& problem, const Vec& theta_guess,
                                   const Vec& x_guess, const FiniteDimSolveOptions& opts = {});

/// Affine perturbation of the constraint and the cost:
/// c~ = c + dc0 + dc_x x + dc_theta theta,  J~ = J + dJ_x^T x + dJ_theta^T theta.
struct FiniteDimPerturbation {
  Vec dc0;
  Mat dc_x;
  Mat dc_theta;
  Vec dJ_x;
  Vec dJ_theta;

  static FiniteDimPerturbation zero(Index n, Index m);
  FiniteDimPerturbation scaled(double s) const;
};

FiniteDimProblem perturbed(const FiniteDimProblem& problem, const FiniteDimPerturbation& p);

/// Residuals of the ideal optimality system at the perturbed solution,
/// evaluated to first order at the ideal one:
/// dF = -dc, dA = -(dJ_x - dc_x^T lambda), dO = -(dJ_theta - dc_theta^T lambda).
struct KktResiduals {
  Vec forward;     ///< dF
  Vec adjoint;     ///< dA
  Vec optimality;  ///< dO
};

KktResiduals kkt_residuals(const FiniteDimSolution& solution, const FiniteDimPerturbation& p);

struct AppendixCEstimate {
  Vec zeta;
  Vec mu;
  Vec nu;
  double estimate = 0.0;
};

/// zeta from l_thetatheta zeta = E_theta^T, mu = -c_x^-1 c_theta zeta,
/// c_x^T nu = -L_xx mu - L_xtheta zeta; estimate nu^T dF + mu^T dA + zeta^T dO.
/// Throws SingularConstraintJacobian when c_x is numerically singular.
AppendixCEstimate appendix_c_estimate(const FiniteDimProblem& problem,
                                      const FiniteDimSolution& solution, const KktResiduals& r);

/// E(theta^) - E(theta^a) from two independent solves.
double oracle_perturbed_resolve(const FiniteDimProblem& problem, const FiniteDimSolution& ideal,
                                const FiniteDimPerturbation& p,
                                const FiniteDimSolveOptions& opts = {});

/// Random instance of c = A x + a.(x.x) - G th - k1 P (th.th) + k2 x.(K th),
/// J = |C x - d|^2 / 2 + alpha |th - th_b|^2 / 2, E = w^T th.
/// `linear_quadratic` zeroes a, k1 and k2.
FiniteDimProblem random_finite_dim_problem(std::uint64_t seed, Index n, Index m,
                                           bool linear_quadratic = false);

/// Random perturbation; `affine_only` leaves dc_x and dc_theta at zero, so the
/// perturbed linear-quadratic problem has a solution linear in the scale.
FiniteDimPerturbation random_finite_dim_perturbation(std::uint64_t seed, Index n, Index m,
                                                     bool affine_only = false);

// -----------------------------------------------------------------------------
// 4D-Var as a finite-dimensional problem
// -----------------------------------------------------------------------------

/// x = (x_1..x_N) stacked, theta = x_0, c_k = x_k - M_{k-1,k}(x_{k-1}).
/// Observation operators are treated as linear. Intended for small n N.
FiniteDimProblem finite_dim_from_fourdvar(const FourDVarProblem& problem,
                                          const QoiFunctional& qoi);

/// The stacked (x, theta, lambda) of an analysis trajectory.
FiniteDimSolution finite_dim_solution(const Trajectory& trajectory);

/// State-independent 4D-Var perturbations as affine constraint/cost shifts.
FiniteDimPerturbation finite_dim_perturbation(const FourDVarProblem& problem,
                                              const Trajectory& trajectory,
                                              const Perturbations& p);

// -----------------------------------------------------------------------------
// 4D-Var oracles
// -----------------------------------------------------------------------------

struct ResolveOptions {
  /// Gradient target relative to 1 + |cost|.
  double rel_grad_tol = 1e-10;
  int max_iter = 2000;
  int newton_polish = 4;
  double polish_cg_tol = 1e-13;
};

SolverOptions oracle_solver_options(const ResolveOptions& opts);

/// The perturbed problem: model M + dx (field or sequence) and data y + dy.
FourDVarProblem perturbed_problem(const FourDVarProblem& problem, const Perturbations& p);

/// E(x^a of the perturbed problem) - E(x^a), warm-started at the ideal analysis.
double oracle_perturbed_resolve(const FourDVarProblem& problem, const AssimilationResult& ideal,
                                const Perturbations& p, const QoiFunctional& qoi,
                                const ResolveOptions& opts = {});

/// p scaled by s (model errors, data errors and any error field).
Perturbations scaled(const Perturbations& p, double s);

// -----------------------------------------------------------------------------
// Convergence-order study
// -----------------------------------------------------------------------------

struct ConvergenceStudy {
  std::vector<double> scales;
  std::vector<double> estimates;
  std::vector<double> actuals;
  std::vector<double> differences;
  double noise_floor = 0.0;
  double slope = 0.0;
  int points_used = 0;
  /// Fewer than two differences above the noise floor; slope is meaningless.
  bool degenerate = false;
};

/// Least-squares slope of log|est - actual| against log(scale), using the
/// points whose difference exceeds `noise_floor`.
ConvergenceStudy fit_convergence(std::vector<double> scales, std::vector<double> estimates,
                                 std::vector<double> actuals, double noise_floor);

std::vector<double> default_study_scales();

/// Scales the base perturbation, re-solves and compares with the linear
/// estimate at every scale.
ConvergenceStudy convergence_order_study(const FourDVarProblem& problem,
                                         const AssimilationResult& ideal,
                                         const ImpactFactors& factors, const QoiFunctional& qoi,
                                         const Perturbations& base,
                                         std::vector<double> scales = default_study_scales(),
                                         const ResolveOptions& opts = {});

// -----------------------------------------------------------------------------
// Ensemble validation
// -----------------------------------------------------------------------------

struct MemberFailure {
  int member = 0;
  std::string message;
};

struct EnsembleReport {
  std::vector<double> member_qoi_errors;  ///< successful members, in member order
  std::vector<double> member_estimates;   ///< linear estimate per successful member
  std::vector<int> members;               ///< indices of successful members
  std::vector<MemberFailure> failures;
  double ensemble_mean = 0.0;
  double ensemble_var = 0.0;  ///< 1/(N-1) normalization
  double variational_mean = 0.0;
  double variational_var = 0.0;
  int n_members = 0;  ///< successful members

  double mean_standard_error() const;
  double var_standard_error() const;
};

struct EnsembleOptions {
  int n_members = 15;
  int threads = 0;  ///< 0 uses the hardware concurrency
  ResolveOptions resolve;
};

/// The validation protocol: sample member errors, solve each perturbed
/// problem, compare E against the ideal analysis, and attach the variational
/// mean and variance. `ideal` must be the analysis of `problem`.
EnsembleReport ensemble_validate(const FourDVarProblem& problem, const AssimilationResult& ideal,
                                 const ImpactFactors& factors, const PerturbationSpec& spec,
                                 const QoiFunctional& qoi, const EnsembleOptions& opts = {});

/// Sample mean and 1/(N-1) variance.
std::pair<double, double> sample_mean_var(const std::vector<double>& v);

}  // namespace varest
