/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/fourdvar.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace varest {

SubsetObs::SubsetObs(Index n, std::vector<Index> indices) : n_(n), indices_(std::move(indices)) {
  for (Index i : indices_)
    if (i < 0 || i >= n_) throw DimensionMismatch("SubsetObs: index out of range");
}

Vec SubsetObs::apply(const Vec& x) const {
  Vec out(indices_.size());
  for (std::size_t j = 0; j < indices_.size(); ++j) out[j] = x[indices_[j]];
  return out;
}

Vec SubsetObs::jac_apply(const Vec&, const Vec& dx) const { return apply(dx); }

Vec SubsetObs::adj_apply(const Vec&, const Vec& w) const {
  Vec out = Vec::Zero(n_);
  for (std::size_t j = 0; j < indices_.size(); ++j) out[indices_[j]] += w[j];
  return out;
}

// -----------------------------------------------------------------------------

void ObservationSet::add(Observation obs) {
  if (!obs.op) throw DimensionMismatch("ObservationSet::add: missing operator");
  if (obs.y.size() != obs.op->output_dim() || obs.R.dim() != obs.op->output_dim())
    throw DimensionMismatch("ObservationSet::add: y / R / operator dimensions disagree");
  if (!obs.R.is_positive_definite())
    throw NotPSD("ObservationSet::add: R must be strictly positive definite");
  if (find(obs.time)) throw DimensionMismatch("ObservationSet::add: duplicate observation time");
  auto pos = std::lower_bound(entries_.begin(), entries_.end(), obs.time,
                              [](const Observation& o, int t) { return o.time < t; });
  entries_.insert(pos, std::move(obs));
}

const Observation* ObservationSet::find(int k) const {
  auto pos = std::lower_bound(entries_.begin(), entries_.end(), k,
                              [](const Observation& o, int t) { return o.time < t; });
  if (pos == entries_.end() || pos->time != k) return nullptr;
  return &*pos;
}

std::vector<int> ObservationSet::times() const {
  std::vector<int> out;
  out.reserve(entries_.size());
  for (const auto& o : entries_) out.push_back(o.time);
  return out;
}

ObservationSet ObservationSet::with_errors(const DataErrors& dy) const {
  ObservationSet out = *this;
  for (const auto& [k, err] : dy) {
    auto pos = std::find_if(out.entries_.begin(), out.entries_.end(),
                            [k = k](const Observation& o) { return o.time == k; });
    if (pos == out.entries_.end())
      throw DimensionMismatch("ObservationSet::with_errors: no observation at that time");
    if (err.size() != pos->y.size())
      throw DimensionMismatch("ObservationSet::with_errors: error dimension mismatch");
    pos->y += err;
  }
  return out;
}

void FourDVarProblem::validate() const {
  if (!model) throw DimensionMismatch("FourDVarProblem: missing model");
  const Index n = model->dim();
  if (background.xb.size() != n || background.B.dim() != n)
    throw DimensionMismatch("FourDVarProblem: background dimension mismatch");
  if (!background.B.is_positive_definite())
    throw NotPSD("FourDVarProblem: B must be strictly positive definite");
  for (const auto& o : obs.entries()) {
    if (o.time < 0 || o.time > model->num_steps())
      throw DimensionMismatch("FourDVarProblem: observation time outside the window");
    if (o.op->input_dim() != n)
      throw DimensionMismatch("FourDVarProblem: observation operator input dimension mismatch");
  }
}

// -----------------------------------------------------------------------------

namespace {

/// H^T R^-1 (H(x) - y), zero when time k is unobserved.
Vec innovation_forcing(const Observation* o, const Vec& x) {
  if (!o) return Vec::Zero(x.size());
  const Vec d = o->op->apply(x) - o->y;
  return o->op->adj_apply(x, o->R.solve(d));
}

/// H^T R^-1 H v, zero when unobserved.
Vec obs_curvature(const Observation* o, const Vec& x, const Vec& v) {
  if (!o) return Vec::Zero(x.size());
  return o->op->adj_apply(x, o->R.solve(o->op->jac_apply(x, v)));
}

}  // namespace

double cost(const FourDVarProblem& problem, const Vec& x0) {
  if (x0.size() != problem.model->dim()) throw DimensionMismatch("cost: x0 dimension mismatch");
  const Trajectory traj = propagate(*problem.model, x0);
  const Vec db = x0 - problem.background.xb;
  double j = 0.5 * db.dot(problem.background.B.solve(db));
  for (const auto& o : problem.obs.entries()) {
    const Vec d = o.op->apply(traj.states[o.time]) - o.y;
    j += 0.5 * d.dot(o.R.solve(d));
  }
  return j;
}

void adjoint_sweep(const FourDVarProblem& problem, Trajectory& traj) {
  const Model& m = *problem.model;
  const int n_steps = traj.num_steps();
  traj.adjoints.assign(n_steps + 1, Vec());
  traj.adjoints[n_steps] = innovation_forcing(problem.obs.find(n_steps), traj.states[n_steps]);
  for (int k = n_steps - 1; k >= 0; --k) {
    traj.adjoints[k] = m.adj_apply(k, traj.states[k], traj.adjoints[k + 1]) +
                       innovation_forcing(problem.obs.find(k), traj.states[k]);
  }
}

GradientResult gradient(const FourDVarProblem& problem, const Vec& x0) {
  if (x0.size() != problem.model->dim()) throw DimensionMismatch("gradient: x0 dimension mismatch");
  GradientResult out;
  out.trajectory = propagate(*problem.model, x0);
  const Vec db = x0 - problem.background.xb;
  const Vec bdb = problem.background.B.solve(db);
  out.cost = 0.5 * db.dot(bdb);
  for (const auto& o : problem.obs.entries()) {
    const Vec d = o.op->apply(out.trajectory.states[o.time]) - o.y;
    out.cost += 0.5 * d.dot(o.R.solve(d));
  }
  adjoint_sweep(problem, out.trajectory);
  out.grad = bdb + out.trajectory.adjoints[0];
  return out;
}

SecondOrderSweep second_order_sweep(const FourDVarProblem& problem, const Trajectory& traj,
                                    const Vec& mu0, HessianKind kind) {
  if (!traj.has_adjoints()) throw Error("second_order_sweep: trajectory has no adjoints");
  const Model& m = *problem.model;
  const int n_steps = traj.num_steps();
  if (mu0.size() != m.dim()) throw DimensionMismatch("second_order_sweep: mu0 dimension mismatch");

  SecondOrderSweep out;
  out.mu.reserve(n_steps + 1);
  out.mu.push_back(mu0);
  for (int k = 0; k < n_steps; ++k) out.mu.push_back(m.tlm_apply(k, traj.states[k], out.mu[k]));

  out.nu.assign(n_steps + 1, Vec());
  out.nu[n_steps] = obs_curvature(problem.obs.find(n_steps), traj.states[n_steps], out.mu[n_steps]);
  for (int k = n_steps - 1; k >= 0; --k) {
    Vec nu = m.adj_apply(k, traj.states[k], out.nu[k + 1]);
    if (kind == HessianKind::full)
      nu += m.soa_apply(k, traj.states[k], traj.adjoints[k + 1], out.mu[k]);
    nu += obs_curvature(problem.obs.find(k), traj.states[k], out.mu[k]);
    out.nu[k] = std::move(nu);
  }
  return out;
}

Vec hess_vec(const FourDVarProblem& problem, const Trajectory& traj, const Vec& u,
             HessianKind kind) {
  const SecondOrderSweep sweep = second_order_sweep(problem, traj, u, kind);
  return problem.background.B.solve(u) + sweep.nu[0];
}

SymOp reduced_hessian(const FourDVarProblem& problem, const Trajectory& traj, HessianKind kind) {
  auto p = std::make_shared<const FourDVarProblem>(problem);
  auto t = std::make_shared<const Trajectory>(traj);
  return SymOp(problem.model->dim(),
               [p, t, kind](const Vec& u) { return hess_vec(*p, *t, u, kind); });
}

double kkt_residual(const FourDVarProblem& problem, const Trajectory& traj) {
  if (!traj.has_adjoints()) throw Error("kkt_residual: trajectory has no adjoints");
  const Vec db = traj.states[0] - problem.background.xb;
  return (problem.background.B.solve(db) + traj.adjoints[0]).norm();
}

// -----------------------------------------------------------------------------

AssimilationResult assimilate(const FourDVarProblem& problem, const Vec& x0_guess,
                              const SolverOptions& opts) {
  problem.validate();
  if (x0_guess.size() != problem.model->dim())
    throw DimensionMismatch("assimilate: initial guess dimension mismatch");

  const double grad_tol = opts.grad_tol.value_or(1e-8 * (1.0 + std::abs(cost(problem, x0_guess))));

  LbfgsOptions lopts;
  lopts.grad_tol = grad_tol;
  lopts.max_iter = opts.max_iter;
  lopts.memory = opts.memory;

  ObjectiveFn objective = [&problem](const Vec& x, Vec& g) {
    try {
      GradientResult r = gradient(problem, x);
      g = std::move(r.grad);
      return r.cost;
    } catch (const NonFiniteState&) {
      g = Vec::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
      return std::numeric_limits<double>::infinity();
    }
  };

  AssimilationResult out;
  out.grad_tol = grad_tol;
  Vec x;
  try {
    LbfgsResult lr = lbfgs_minimize(objective, x0_guess, lopts);
    out.iterations = lr.iterations;
    out.cost_history = std::move(lr.f_history);
    out.grad_norm_history = std::move(lr.grad_norm_history);
    out.inverse_hessian = lr.inverse_hessian;
    x = std::move(lr.x);
  } catch (const LineSearchFailure& e) {
    // Near the rounding floor the line search can stall; Newton polishing
    // can still finish the job from the last iterate.
    if (opts.newton_polish == 0) throw;
    x = e.last_iterate();
    out.inverse_hessian = SymOp::identity(x.size());
  }
  GradientResult gr = gradient(problem, x);

  for (int polish = 0; polish < opts.newton_polish; ++polish) {
    const double gnorm = gr.grad.norm();
    if (gnorm == 0.0) break;
    CgOptions cg;
    cg.tol = opts.polish_cg_tol;
    cg.max_iter = 10 * static_cast<int>(x.size()) + 50;
    Vec dx;
    try {
      dx = cg_solve(reduced_hessian(problem, gr.trajectory, opts.hessian), -gr.grad, cg).x;
    } catch (const NonConvergence&) {
      break;
    } catch (const NegativeCurvature&) {
      break;
    }
    const Vec x_new = x + dx;
    GradientResult trial = gradient(problem, x_new);
    if (!(trial.grad.norm() < gnorm)) break;
    x = x_new;
    gr = std::move(trial);
    out.cost_history.push_back(gr.cost);
    out.grad_norm_history.push_back(gr.grad.norm());
  }

  out.analysis = x;
  out.cost = gr.cost;
  out.grad_norm = gr.grad.norm();
  out.trajectory = std::move(gr.trajectory);
  out.converged = out.grad_norm <= grad_tol;
  if (!out.converged && opts.require_convergence) {
    std::ostringstream os;
    os << "assimilate: gradient norm " << out.grad_norm << " above target " << grad_tol
       << " after " << out.iterations << " iterations";
    throw NonConvergence(os.str(), out.grad_norm, out.iterations);
  }
  return out;
}

}  // namespace varest
