/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/estimator.hpp"

#include <sstream>

namespace varest {

QoiFunctional QoiFunctional::mean_state(Index n) {
  return mean_of_block(n, 0, n);
}

QoiFunctional QoiFunctional::component(Index n, Index l) {
  if (l < 0 || l >= n) throw DimensionMismatch("QoiFunctional::component: index out of range");
  QoiFunctional q;
  q.name = "component";
  q.eval = [n, l](const Vec& x) {
    if (x.size() != n) throw DimensionMismatch("qoi: state dimension mismatch");
    return x[l];
  };
  q.grad = [n, l](const Vec&) { return Vec(Vec::Unit(n, l)); };
  return q;
}

QoiFunctional QoiFunctional::mean_of_block(Index n, Index begin, Index end) {
  if (begin < 0 || end > n || begin >= end)
    throw DimensionMismatch("QoiFunctional::mean_of_block: empty or out-of-range block");
  QoiFunctional q;
  q.name = (begin == 0 && end == n) ? "mean_state" : "mean_of_block";
  const double w = 1.0 / static_cast<double>(end - begin);
  q.eval = [n, begin, end, w](const Vec& x) {
    if (x.size() != n) throw DimensionMismatch("qoi: state dimension mismatch");
    return w * x.segment(begin, end - begin).sum();
  };
  q.grad = [n, begin, end, w](const Vec&) {
    Vec g = Vec::Zero(n);
    g.segment(begin, end - begin).setConstant(w);
    return g;
  };
  return q;
}

// -----------------------------------------------------------------------------

namespace {

void require_adjoints(const FourDVarProblem& problem, const Trajectory& traj) {
  if (!traj.has_adjoints()) throw Error("estimator: trajectory carries no adjoints");
  if (traj.num_steps() != problem.model->num_steps())
    throw DimensionMismatch("estimator: trajectory length does not match the model");
}

int default_iterations(Index n, int requested) {
  return requested > 0 ? requested : 10 * static_cast<int>(n) + 50;
}

}  // namespace

ImpactFactors compute_impact_factors(const FourDVarProblem& problem,
                                     const AssimilationResult& result, const QoiFunctional& qoi,
                                     const ImpactOptions& opts) {
  const Trajectory& traj = result.trajectory;
  require_adjoints(problem, traj);
  const Vec& xa = traj.states[0];
  const Index n = xa.size();

  ImpactFactors out;
  out.method = opts.method;
  out.qoi_grad = qoi.grad(xa);
  if (out.qoi_grad.size() != n) throw DimensionMismatch("estimator: qoi gradient dimension");

  const double kkt = kkt_residual(problem, traj);
  const double threshold = 1e-4 * (1.0 + out.qoi_grad.norm());
  if (kkt > threshold) {
    std::ostringstream os;
    os << "estimator: KKT residual " << kkt << " exceeds " << threshold
       << "; impact factors need a stationary analysis";
    throw NotAtOptimum(os.str(), kkt);
  }

  const SymOp hess = reduced_hessian(problem, traj, opts.hessian);
  const double gnorm = out.qoi_grad.norm();
  if (gnorm == 0.0) {
    out.zeta = Vec::Zero(n);
  } else if (opts.method == ImpactMethod::cg) {
    CgOptions cg;
    cg.tol = opts.tol;
    cg.max_iter = default_iterations(n, opts.max_iter);
    CgResult r = cg_solve(hess, out.qoi_grad, cg);
    out.zeta = std::move(r.x);
    out.cg_iterations = r.iterations;
  } else {
    if (result.inverse_hessian.dim() != n)
      throw Error("estimator: assimilation result carries no quasi-Newton inverse Hessian");
    out.zeta = result.inverse_hessian(out.qoi_grad);
  }
  out.hessian_solve_residual =
      gnorm == 0.0 ? 0.0 : (hess(out.zeta) - out.qoi_grad).norm() / gnorm;

  SecondOrderSweep sweep = second_order_sweep(problem, traj, -out.zeta, opts.hessian);
  out.mu = std::move(sweep.mu);
  out.nu = std::move(sweep.nu);
  return out;
}

// -----------------------------------------------------------------------------

std::string to_string(Contribution::Kind kind) {
  switch (kind) {
    case Contribution::Kind::fwd: return "fwd";
    case Contribution::Kind::adj: return "adj";
    case Contribution::Kind::opt: return "opt";
  }
  return "?";
}

ErrorBudget estimate_error_budget(const FourDVarProblem& problem, const Trajectory& traj,
                                  const ImpactFactors& factors, const Perturbations& pert) {
  require_adjoints(problem, traj);
  const int n_steps = traj.num_steps();
  const Index n = problem.model->dim();
  if (static_cast<int>(factors.mu.size()) != n_steps + 1 ||
      static_cast<int>(factors.nu.size()) != n_steps + 1)
    throw DimensionMismatch("estimate_error_budget: impact factors do not match the window");
  if (!pert.model_errors.empty() && static_cast<int>(pert.model_errors.size()) != n_steps)
    throw DimensionMismatch("estimate_error_budget: need one model error per step");

  ErrorBudget b;

  for (int k = 1; k <= n_steps && !pert.model_errors.empty(); ++k) {
    const Vec& dx = pert.model_errors[k - 1];
    if (dx.size() != n) throw DimensionMismatch("estimate_error_budget: model error dimension");
    const Vec terms = factors.nu[k].cwiseProduct(dx);
    double at_k = 0.0;
    for (Index i = 0; i < n; ++i) {
      b.contributions.push_back({k, i, Contribution::Kind::fwd, terms[i]});
      at_k += terms[i];
    }
    b.per_time_fwd[k] = at_k;
    b.fwd += at_k;
  }

  for (const auto& [k, dy] : pert.data_errors) {
    const Observation* o = problem.obs.find(k);
    if (!o) throw DimensionMismatch("estimate_error_budget: data error at an unobserved time");
    if (dy.size() != o->y.size())
      throw DimensionMismatch("estimate_error_budget: data error dimension");
    // mu^T H^T R^-1 dy = (R^-1 H mu) . dy
    const Vec w = o->R.solve(o->op->jac_apply(traj.states[k], factors.mu[k]));
    for (Index i = 0; i < dy.size(); ++i) {
      const double c = -w[i] * dy[i];
      b.contributions.push_back({k, i, Contribution::Kind::adj, c});
      b.per_component_adj[{k, i}] += c;
      b.adj += c;
    }
  }

  if (pert.model_error_field && pert.model_error_field->state_dependent()) {
    for (int k = 0; k < n_steps; ++k) {
      const Vec g = pert.model_error_field->jac_adj_apply(k + 1, traj.states[k], traj.adjoints[k + 1]);
      const Vec terms = factors.mu[k].cwiseProduct(g);
      for (Index i = 0; i < n; ++i) {
        b.contributions.push_back({k, i, Contribution::Kind::adj, terms[i]});
        b.per_component_adj_model[{k, i}] += terms[i];
        b.adj += terms[i];
      }
    }
  }

  // The k = 0 summand above already holds mu_0^T (dx_1)_x0^T lambda_1 with
  // mu_0 = -zeta, so the explicit optimality term has nothing left to add.
  b.opt = 0.0;
  b.total = b.fwd + b.adj + b.opt;
  return b;
}

// -----------------------------------------------------------------------------

EstimatedMoments estimate_error_statistics(const FourDVarProblem& problem, const Trajectory& traj,
                                           const ImpactFactors& factors,
                                           const ErrorStatistics& stats) {
  require_adjoints(problem, traj);
  const int n_steps = traj.num_steps();
  const Index n = problem.model->dim();
  if (static_cast<int>(factors.nu.size()) != n_steps + 1)
    throw DimensionMismatch("estimate_error_statistics: impact factors do not match the window");

  EstimatedMoments m;
  for (const auto& [k, beta] : stats.model_bias) {
    if (k < 1 || k > n_steps) throw DimensionMismatch("estimate_error_statistics: bias step");
    if (beta.size() != n) throw DimensionMismatch("estimate_error_statistics: bias dimension");
    m.mean += factors.nu[k].dot(beta);
  }
  for (const auto& [k, rho] : stats.data_bias) {
    const Observation* o = problem.obs.find(k);
    if (!o) throw DimensionMismatch("estimate_error_statistics: bias at an unobserved time");
    if (rho.size() != o->y.size())
      throw DimensionMismatch("estimate_error_statistics: data bias dimension");
    m.mean -= o->R.solve(o->op->jac_apply(traj.states[k], factors.mu[k])).dot(rho);
  }

  for (int k = 1; k <= n_steps; ++k) {
    const CovMatrix* q = nullptr;
    if (auto it = stats.model_noise_per_step.find(k); it != stats.model_noise_per_step.end())
      q = &it->second;
    else if (stats.model_noise)
      q = &*stats.model_noise;
    if (!q) continue;
    if (q->dim() != n) throw DimensionMismatch("estimate_error_statistics: Q dimension");
    m.model_variance += factors.nu[k].dot(q->apply(factors.nu[k]));
  }
  for (const auto& [kl, block] : stats.model_cross_cov) {
    const auto [k, l] = kl;
    if (k < 1 || l > n_steps || k >= l)
      throw DimensionMismatch("estimate_error_statistics: cross block needs 1 <= k < l <= N");
    if (block.rows() != n || block.cols() != n)
      throw DimensionMismatch("estimate_error_statistics: cross block dimension");
    m.model_variance += 2.0 * factors.nu[k].dot(block * factors.nu[l]);
  }

  if (stats.data_noise) {
    for (const auto& o : problem.obs.entries()) {
      const Vec hmu = o.op->jac_apply(traj.states[o.time], factors.mu[o.time]);
      m.data_variance += hmu.dot(o.R.solve(hmu));
    }
  }
  m.variance = m.model_variance + m.data_variance;
  return m;
}

Vec posterior_covariance_column(const FourDVarProblem& problem, const AssimilationResult& result,
                                Index l, const ImpactOptions& opts) {
  const Index n = problem.model->dim();
  if (l < 0 || l >= n) throw DimensionMismatch("posterior_covariance_column: index out of range");
  QoiFunctional unit = QoiFunctional::component(n, l);
  return compute_impact_factors(problem, result, unit, opts).zeta;
}

}  // namespace varest
