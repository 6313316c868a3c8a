/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "varest/fourdvar.hpp"
#include "varest/linalg.hpp"
#include "varest/model.hpp"

namespace varest {

/// Scalar quantity of interest E(x0) of the analysis and its gradient.
struct QoiFunctional {
  std::string name;
  std::function<double(const Vec&)> eval;
  std::function<Vec(const Vec&)> grad;

  /// (1/n) sum_i x_i
  static QoiFunctional mean_state(Index n);
  /// x_l
  static QoiFunctional component(Index n, Index l);
  /// mean of x_i for i in [begin, end)
  static QoiFunctional mean_of_block(Index n, Index begin, Index end);
};

enum class ImpactMethod {
  cg,           ///< solve the Hessian equation with conjugate gradients
  quasi_newton  ///< zeta ~ B * E_theta^T with the L-BFGS inverse Hessian
};

struct ImpactOptions {
  ImpactMethod method = ImpactMethod::cg;
  double tol = 1e-10;
  int max_iter = 0;  ///< 0 picks 10 n + 50
  HessianKind hessian = HessianKind::full;
};

/// The super-Lagrange multipliers zeta, mu_0..mu_N, nu_0..nu_N.
struct ImpactFactors {
  Vec zeta;
  std::vector<Vec> mu;
  std::vector<Vec> nu;
  Vec qoi_grad;
  /// |Hess zeta - E_theta^T| / |E_theta^T|
  double hessian_solve_residual = 0.0;
  int cg_iterations = 0;
  ImpactMethod method = ImpactMethod::cg;
};

/// Refuses with NotAtOptimum when the KKT residual of `result` exceeds
/// 1e-4 (1 + |E_theta|). CG failures surface as NonConvergence or
/// NegativeCurvature; callers may retry with quasi_newton.
ImpactFactors compute_impact_factors(const FourDVarProblem& problem,
                                     const AssimilationResult& result, const QoiFunctional& qoi,
                                     const ImpactOptions& opts = {});

// -----------------------------------------------------------------------------

/// Realized errors of one perturbed run.
struct Perturbations {
  /// model_errors[k-1] is the increment added by step k (empty = none).
  std::vector<Vec> model_errors;
  /// Optional state-dependent error field; its Jacobian enters the adjoint
  /// term. Its values must already be included in model_errors.
  ModelErrorPtr model_error_field;
  DataErrors data_errors;
};

struct Contribution {
  enum class Kind { fwd, adj, opt };
  int time_index = 0;
  Index component = 0;  ///< state index for fwd/opt, observation index for adj
  Kind kind = Kind::fwd;
  double value = 0.0;
};

std::string to_string(Contribution::Kind kind);

struct ErrorBudget {
  double fwd = 0.0;
  double adj = 0.0;
  double opt = 0.0;
  double total = 0.0;
  std::map<int, double> per_time_fwd;
  /// Data-error summands keyed by (observation time, observation index).
  std::map<std::pair<int, Index>, double> per_component_adj;
  /// State-dependent model-error summands keyed by (k, state index); with
  /// per_component_adj these sum to adj.
  std::map<std::pair<int, Index>, double> per_component_adj_model;
  /// Every summand of the three terms.
  std::vector<Contribution> contributions;
};

/// fwd = sum_{k=1..N} nu_k^T dx_k,
/// adj = -sum_k mu_k^T H_k^T R_k^-1 dy_k + sum_{k=0..N-1} mu_k^T (dx_{k+1})_x^T lambda_{k+1},
/// opt = explicit theta-partial of the optimality residual (zero here, since
/// the model error depends on x_0 only through the state).
ErrorBudget estimate_error_budget(const FourDVarProblem& problem, const Trajectory& trajectory,
                                  const ImpactFactors& factors, const Perturbations& perturbations);

// -----------------------------------------------------------------------------

/// Statistical description of model and data errors.
struct ErrorStatistics {
  /// beta_k, k = 1..N (missing = 0).
  std::map<int, Vec> model_bias;
  /// Q_kk shared by every step; unset means no model noise.
  std::optional<CovMatrix> model_noise;
  /// Per-step overrides of Q_kk.
  std::map<int, CovMatrix> model_noise_per_step;
  /// Cross blocks Q_kl for k < l (Q_lk = Q_kl^T is implied).
  std::map<std::pair<int, int>, Mat> model_cross_cov;
  /// rho_k per observed time (missing = 0).
  DataErrors data_bias;
  /// Data noise is N(0, R_k) when set.
  bool data_noise = true;
};

struct EstimatedMoments {
  double mean = 0.0;
  double variance = 0.0;
  double model_variance = 0.0;
  double data_variance = 0.0;
};

/// mean = sum nu_k^T beta_k - sum mu_k^T H^T R^-1 rho_k,
/// var  = sum_{k,l} nu_k^T Q_kl nu_l + sum_k mu_k^T H^T R^-1 H mu_k.
EstimatedMoments estimate_error_statistics(const FourDVarProblem& problem,
                                           const Trajectory& trajectory,
                                           const ImpactFactors& factors,
                                           const ErrorStatistics& stats);

/// Solves Hess c = e_l at the analysis; c is the l-th column of the
/// posterior covariance.
Vec posterior_covariance_column(const FourDVarProblem& problem, const AssimilationResult& result,
                                Index l, const ImpactOptions& opts = {});

}  // namespace varest
