/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/validation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

namespace varest {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

Vec solve_state(const FiniteDimProblem& p, const Vec& th, Vec x) {
  for (int it = 0; it < 60; ++it) {
    const Vec r = p.c(x, th);
    Eigen::PartialPivLU<Mat> lu(p.c_x(x, th));
    if (!(lu.rcond() > 1e-14)) throw SingularConstraintJacobian("finite-dim: c_x is singular");
    const Vec dx = lu.solve(r);
    x -= dx;
    if (!x.allFinite()) break;
    if (dx.norm() <= 1e-14 * (1.0 + x.norm())) {
      x -= lu.solve(p.c(x, th));
      return x;
    }
  }
  throw NonConvergence("finite-dim: state equation did not converge", p.c(x, th).norm(), 60);
}

struct Reduced {
  double f = 0.0;
  Vec g;
  Vec x;
  Vec lambda;
};

Reduced reduced_eval(const FiniteDimProblem& p, const Vec& th, const Vec& x_guess) {
  Reduced r;
  r.x = solve_state(p, th, x_guess);
  const Mat cx = p.c_x(r.x, th);
  r.lambda = cx.transpose().partialPivLu().solve(p.J_x(r.x, th));
  r.g = p.J_theta(r.x, th) - p.c_theta(r.x, th).transpose() * r.lambda;
  r.f = p.J(r.x, th);
  return r;
}

Vec lagrangian_x(const FiniteDimProblem& p, const Vec& x, const Vec& th, const Vec& lam) {
  return p.J_x(x, th) - p.c_x(x, th).transpose() * lam;
}

Vec lagrangian_theta(const FiniteDimProblem& p, const Vec& x, const Vec& th, const Vec& lam) {
  return p.J_theta(x, th) - p.c_theta(x, th).transpose() * lam;
}

/// Columns of d g / d v by central differences.
template <class G>
Mat fd_jacobian(const G& g, const Vec& v, Index rows) {
  const double h = default_fd_step(v);
  Mat out(rows, v.size());
  for (Index j = 0; j < v.size(); ++j) {
    Vec vp = v, vm = v;
    vp[j] += h;
    vm[j] -= h;
    out.col(j) = (g(vp) - g(vm)) / (2.0 * h);
  }
  return out;
}

}  // namespace

FiniteDimSolution solve_finite_dim(const FiniteDimProblem& p, const Vec& theta_guess,
                                   const Vec& x_guess, const FiniteDimSolveOptions& opts) {
  if (theta_guess.size() != p.m || x_guess.size() != p.n)
    throw DimensionMismatch("solve_finite_dim: guess dimensions");
  auto x_warm = std::make_shared<Vec>(x_guess);

  ObjectiveFn f = [&p, x_warm](const Vec& th, Vec& g) {
    try {
      Reduced r = reduced_eval(p, th, *x_warm);
      *x_warm = r.x;
      g = std::move(r.g);
      return r.f;
    } catch (const Error&) {
      g = Vec::Constant(th.size(), std::numeric_limits<double>::quiet_NaN());
      return std::numeric_limits<double>::infinity();
    }
  };

  LbfgsOptions lo;
  lo.grad_tol = opts.grad_tol;
  lo.max_iter = opts.max_iter;
  lo.memory = static_cast<int>(std::max<Index>(p.m, 5));
  Vec th;
  try {
    th = lbfgs_minimize(f, theta_guess, lo).x;
  } catch (const LineSearchFailure& e) {
    th = e.last_iterate();
  }

  Reduced r = reduced_eval(p, th, *x_warm);
  for (int it = 0; it < opts.newton_polish; ++it) {
    const double gnorm = r.g.norm();
    if (gnorm == 0.0) break;
    const Vec xr = r.x;
    Mat h = fd_jacobian([&](const Vec& t) { return reduced_eval(p, t, xr).g; }, th, p.m);
    h = 0.5 * (h + h.transpose());
    const Vec step = h.partialPivLu().solve(-r.g);
    if (!step.allFinite()) break;
    Reduced trial;
    try {
      trial = reduced_eval(p, th + step, r.x);
    } catch (const Error&) {
      break;
    }
    if (!(trial.g.norm() < gnorm)) break;
    th += step;
    r = std::move(trial);
  }

  const double target = opts.grad_tol * (1.0 + std::abs(r.f));
  if (r.g.norm() > 100.0 * target) {
    std::ostringstream os;
    os << "solve_finite_dim: reduced gradient " << r.g.norm() << " above " << target;
    throw NonConvergence(os.str(), r.g.norm(), opts.max_iter);
  }
  return {r.x, th, r.lambda, r.g.norm()};
}

// -----------------------------------------------------------------------------

FiniteDimPerturbation FiniteDimPerturbation::zero(Index n, Index m) {
  return {Vec::Zero(n), Mat::Zero(n, n), Mat::Zero(n, m), Vec::Zero(n), Vec::Zero(m)};
}

FiniteDimPerturbation FiniteDimPerturbation::scaled(double s) const {
  return {s * dc0, s * dc_x, s * dc_theta, s * dJ_x, s * dJ_theta};
}

FiniteDimProblem perturbed(const FiniteDimProblem& base, const FiniteDimPerturbation& d) {
  if (d.dc0.size() != base.n || d.dc_x.rows() != base.n || d.dc_x.cols() != base.n ||
      d.dc_theta.rows() != base.n || d.dc_theta.cols() != base.m || d.dJ_x.size() != base.n ||
      d.dJ_theta.size() != base.m)
    throw DimensionMismatch("perturbed: perturbation dimensions");
  FiniteDimProblem p = base;
  p.c = [c = base.c, d](const Vec& x, const Vec& th) {
    return Vec(c(x, th) + d.dc0 + d.dc_x * x + d.dc_theta * th);
  };
  p.c_x = [f = base.c_x, d](const Vec& x, const Vec& th) { return Mat(f(x, th) + d.dc_x); };
  p.c_theta = [f = base.c_theta, d](const Vec& x, const Vec& th) {
    return Mat(f(x, th) + d.dc_theta);
  };
  p.J = [f = base.J, d](const Vec& x, const Vec& th) {
    return f(x, th) + d.dJ_x.dot(x) + d.dJ_theta.dot(th);
  };
  p.J_x = [f = base.J_x, d](const Vec& x, const Vec& th) { return Vec(f(x, th) + d.dJ_x); };
  p.J_theta = [f = base.J_theta, d](const Vec& x, const Vec& th) {
    return Vec(f(x, th) + d.dJ_theta);
  };
  // Affine shifts leave every second derivative unchanged.
  return p;
}

KktResiduals kkt_residuals(const FiniteDimSolution& s, const FiniteDimPerturbation& d) {
  KktResiduals r;
  r.forward = -(d.dc0 + d.dc_x * s.x + d.dc_theta * s.theta);
  r.adjoint = -(d.dJ_x - d.dc_x.transpose() * s.lambda);
  r.optimality = -(d.dJ_theta - d.dc_theta.transpose() * s.lambda);
  return r;
}

AppendixCEstimate appendix_c_estimate(const FiniteDimProblem& p, const FiniteDimSolution& s,
                                      const KktResiduals& r) {
  if (r.forward.size() != p.n || r.adjoint.size() != p.n || r.optimality.size() != p.m)
    throw DimensionMismatch("appendix_c_estimate: residual dimensions");
  const Vec& x = s.x;
  const Vec& th = s.theta;
  const Vec& lam = s.lambda;

  Eigen::PartialPivLU<Mat> cx(p.c_x(x, th));
  if (!(cx.rcond() > 1e-13))
    throw SingularConstraintJacobian("appendix_c_estimate: c_x is numerically singular");
  const Mat X = cx.solve(p.c_theta(x, th));

  const Mat lxx = p.L_xx ? p.L_xx(x, th, lam)
                         : fd_jacobian([&](const Vec& v) { return lagrangian_x(p, v, th, lam); },
                                       x, p.n);
  const Mat lxt = p.L_xtheta
                      ? p.L_xtheta(x, th, lam)
                      : fd_jacobian([&](const Vec& v) { return lagrangian_x(p, x, v, lam); },
                                    th, p.n);
  const Mat ltt = p.L_thetatheta
                      ? p.L_thetatheta(x, th, lam)
                      : fd_jacobian([&](const Vec& v) { return lagrangian_theta(p, x, v, lam); },
                                    th, p.m);

  Mat ell = ltt - lxt.transpose() * X - X.transpose() * lxt + X.transpose() * (0.5 * (lxx + lxx.transpose())) * X;
  ell = 0.5 * (ell + ell.transpose());

  AppendixCEstimate e;
  e.zeta = ell.partialPivLu().solve(p.qoi.grad(th));
  e.mu = -X * e.zeta;
  e.nu = cx.transpose().solve(Vec(-lxx * e.mu - lxt * e.zeta));
  e.estimate = e.nu.dot(r.forward) + e.mu.dot(r.adjoint) + e.zeta.dot(r.optimality);
  return e;
}

double oracle_perturbed_resolve(const FiniteDimProblem& problem, const FiniteDimSolution& ideal,
                                const FiniteDimPerturbation& d, const FiniteDimSolveOptions& opts) {
  const FiniteDimProblem pp = perturbed(problem, d);
  const FiniteDimSolution s = solve_finite_dim(pp, ideal.theta, ideal.x, opts);
  return problem.qoi.eval(s.theta) - problem.qoi.eval(ideal.theta);
}

// -----------------------------------------------------------------------------

namespace {

Mat random_mat(GaussianStream& g, Index r, Index c, double scale) {
  Mat m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = scale * g.normal();
  return m;
}

}  // namespace

FiniteDimProblem random_finite_dim_problem(std::uint64_t seed, Index n, Index m,
                                           bool linear_quadratic) {
  if (n < 1 || m < 1) throw DimensionMismatch("random_finite_dim_problem: empty dimensions");
  GaussianStream g(derive_seed(seed, 0));
  const double sn = 1.0 / std::sqrt(static_cast<double>(n));
  const double sm = 1.0 / std::sqrt(static_cast<double>(m));
  const Mat A = 2.0 * Mat::Identity(n, n) + random_mat(g, n, n, 0.3 * sn);
  const Mat G = random_mat(g, n, m, sm);
  Vec a = random_mat(g, n, 1, 0.15);
  const Mat P = random_mat(g, n, m, 0.5 * sm);
  const Mat K = random_mat(g, n, m, 0.5 * sm);
  const Mat C = Mat::Identity(n, n) + random_mat(g, n, n, 0.3 * sn);
  const Vec d = random_mat(g, n, 1, 1.0);
  const Vec thb = random_mat(g, m, 1, 0.5);
  const Vec w = random_mat(g, m, 1, 1.0);
  double k1 = 0.2, k2 = 0.2;
  const double alpha = 1.0;
  if (linear_quadratic) {
    a.setZero();
    k1 = k2 = 0.0;
  }

  FiniteDimProblem p;
  p.n = n;
  p.m = m;
  p.c = [=](const Vec& x, const Vec& th) {
    return Vec(A * x + a.cwiseProduct(x.cwiseProduct(x)) - G * th -
               k1 * P * th.cwiseProduct(th) + k2 * x.cwiseProduct(K * th));
  };
  p.c_x = [=](const Vec& x, const Vec& th) {
    return Mat(A + Mat((2.0 * a.cwiseProduct(x) + k2 * K * th).asDiagonal()));
  };
  p.c_theta = [=](const Vec& x, const Vec& th) {
    return Mat(-G - 2.0 * k1 * P * th.asDiagonal() + k2 * x.asDiagonal() * K);
  };
  p.J = [=](const Vec& x, const Vec& th) {
    return 0.5 * (C * x - d).squaredNorm() + 0.5 * alpha * (th - thb).squaredNorm();
  };
  p.J_x = [=](const Vec& x, const Vec&) { return Vec(C.transpose() * (C * x - d)); };
  p.J_theta = [=](const Vec&, const Vec& th) { return Vec(alpha * (th - thb)); };
  p.L_xx = [=](const Vec&, const Vec&, const Vec& lam) {
    return Mat(C.transpose() * C - Mat((2.0 * a.cwiseProduct(lam)).asDiagonal()));
  };
  p.L_xtheta = [=](const Vec&, const Vec&, const Vec& lam) {
    return Mat(-k2 * lam.asDiagonal() * K);
  };
  p.L_thetatheta = [=](const Vec&, const Vec&, const Vec& lam) {
    return Mat(alpha * Mat::Identity(m, m) + Mat((2.0 * k1 * P.transpose() * lam).asDiagonal()));
  };
  p.qoi.name = "linear";
  p.qoi.eval = [w](const Vec& th) { return w.dot(th); };
  p.qoi.grad = [w](const Vec&) { return w; };
  return p;
}

FiniteDimPerturbation random_finite_dim_perturbation(std::uint64_t seed, Index n, Index m,
                                                     bool affine_only) {
  GaussianStream g(derive_seed(seed, 1));
  FiniteDimPerturbation d = FiniteDimPerturbation::zero(n, m);
  d.dc0 = random_mat(g, n, 1, 1.0);
  d.dJ_x = random_mat(g, n, 1, 1.0);
  d.dJ_theta = random_mat(g, m, 1, 1.0);
  if (!affine_only) {
    d.dc_x = random_mat(g, n, n, 0.5 / std::sqrt(static_cast<double>(n)));
    d.dc_theta = random_mat(g, n, m, 0.5 / std::sqrt(static_cast<double>(m)));
  }
  return d;
}

// -----------------------------------------------------------------------------

namespace {

Mat assemble(Index rows, Index cols, const std::function<Vec(const Vec&)>& apply) {
  Mat out(rows, cols);
  for (Index j = 0; j < cols; ++j) out.col(j) = apply(Vec::Unit(cols, j));
  return out;
}

Mat obs_curvature_matrix(const Observation& o, const Vec& x) {
  const Index n = x.size();
  return assemble(n, n, [&](const Vec& e) {
    return o.op->adj_apply(x, o.R.solve(o.op->jac_apply(x, e)));
  });
}

}  // namespace

FiniteDimProblem finite_dim_from_fourdvar(const FourDVarProblem& problem,
                                          const QoiFunctional& qoi) {
  problem.validate();
  auto pr = std::make_shared<const FourDVarProblem>(problem);
  const Index n = problem.model->dim();
  const int N = problem.model->num_steps();
  if (N < 1) throw DimensionMismatch("finite_dim_from_fourdvar: need at least one step");

  auto state = [n](const Vec& x, const Vec& th, int k) -> Vec {
    return k == 0 ? th : Vec(x.segment((k - 1) * n, n));
  };

  FiniteDimProblem p;
  p.n = n * N;
  p.m = n;
  p.c = [pr, n, N, state](const Vec& x, const Vec& th) {
    Vec c(n * N);
    for (int k = 1; k <= N; ++k)
      c.segment((k - 1) * n, n) = state(x, th, k) - pr->model->step(k - 1, state(x, th, k - 1));
    return c;
  };
  p.c_x = [pr, n, N, state](const Vec& x, const Vec& th) {
    Mat cx = Mat::Identity(n * N, n * N);
    for (int k = 2; k <= N; ++k) {
      const Vec xp = state(x, th, k - 1);
      cx.block((k - 1) * n, (k - 2) * n, n, n) =
          -assemble(n, n, [&](const Vec& e) { return pr->model->tlm_apply(k - 1, xp, e); });
    }
    return cx;
  };
  p.c_theta = [pr, n, N](const Vec&, const Vec& th) {
    Mat ct = Mat::Zero(n * N, n);
    ct.topRows(n) = -assemble(n, n, [&](const Vec& e) { return pr->model->tlm_apply(0, th, e); });
    return ct;
  };
  p.J = [pr, state](const Vec& x, const Vec& th) {
    const Vec db = th - pr->background.xb;
    double j = 0.5 * db.dot(pr->background.B.solve(db));
    for (const auto& o : pr->obs.entries()) {
      const Vec d = o.op->apply(state(x, th, o.time)) - o.y;
      j += 0.5 * d.dot(o.R.solve(d));
    }
    return j;
  };
  p.J_x = [pr, n, N, state](const Vec& x, const Vec& th) {
    Vec g = Vec::Zero(n * N);
    for (const auto& o : pr->obs.entries()) {
      if (o.time == 0) continue;
      const Vec xk = state(x, th, o.time);
      g.segment((o.time - 1) * n, n) = o.op->adj_apply(xk, o.R.solve(o.op->apply(xk) - o.y));
    }
    return g;
  };
  p.J_theta = [pr](const Vec&, const Vec& th) {
    Vec g = pr->background.B.solve(th - pr->background.xb);
    if (const Observation* o = pr->obs.find(0))
      g += o->op->adj_apply(th, o->R.solve(o->op->apply(th) - o->y));
    return g;
  };
  p.L_xx = [pr, n, N, state](const Vec& x, const Vec& th, const Vec& lam) {
    Mat h = Mat::Zero(n * N, n * N);
    for (int k = 1; k <= N; ++k) {
      const Vec xk = state(x, th, k);
      auto blk = h.block((k - 1) * n, (k - 1) * n, n, n);
      if (const Observation* o = pr->obs.find(k)) blk += obs_curvature_matrix(*o, xk);
      if (k < N) {
        const Vec l_next = lam.segment(k * n, n);
        blk += assemble(n, n, [&](const Vec& e) { return pr->model->soa_apply(k, xk, l_next, e); });
      }
    }
    return Mat(0.5 * (h + h.transpose()));
  };
  p.L_xtheta = [n, N](const Vec&, const Vec&, const Vec&) { return Mat(Mat::Zero(n * N, n)); };
  p.L_thetatheta = [pr, n](const Vec&, const Vec& th, const Vec& lam) {
    Mat h = assemble(n, n, [&](const Vec& e) { return pr->background.B.solve(e); });
    if (const Observation* o = pr->obs.find(0)) h += obs_curvature_matrix(*o, th);
    const Vec l1 = lam.head(n);
    h += assemble(n, n, [&](const Vec& e) { return pr->model->soa_apply(0, th, l1, e); });
    return Mat(0.5 * (h + h.transpose()));
  };
  p.qoi = qoi;
  return p;
}

FiniteDimSolution finite_dim_solution(const Trajectory& traj) {
  if (!traj.has_adjoints()) throw Error("finite_dim_solution: trajectory has no adjoints");
  const int N = traj.num_steps();
  const Index n = traj.states[0].size();
  FiniteDimSolution s;
  s.theta = traj.states[0];
  s.x.resize(n * N);
  s.lambda.resize(n * N);
  for (int k = 1; k <= N; ++k) {
    s.x.segment((k - 1) * n, n) = traj.states[k];
    s.lambda.segment((k - 1) * n, n) = traj.adjoints[k];
  }
  return s;
}

FiniteDimPerturbation finite_dim_perturbation(const FourDVarProblem& problem,
                                              const Trajectory& traj, const Perturbations& pert) {
  const Index n = problem.model->dim();
  const int N = problem.model->num_steps();
  FiniteDimPerturbation d = FiniteDimPerturbation::zero(n * N, n);

  if (pert.model_error_field) {
    // Fields are taken as affine in the state: delta_k(x) = D_k x + delta_k(0).
    const Vec zero = Vec::Zero(n);
    for (int k = 1; k <= N; ++k) {
      d.dc0.segment((k - 1) * n, n) = -pert.model_error_field->value(k, zero);
      const Vec& xp = traj.states[k - 1];
      const Mat dk = assemble(n, n, [&](const Vec& e) {
        return pert.model_error_field->jac_apply(k, xp, e);
      });
      if (k == 1)
        d.dc_theta.topRows(n) = -dk;
      else
        d.dc_x.block((k - 1) * n, (k - 2) * n, n, n) = -dk;
    }
  } else if (!pert.model_errors.empty()) {
    if (static_cast<int>(pert.model_errors.size()) != N)
      throw DimensionMismatch("finite_dim_perturbation: need one model error per step");
    for (int k = 1; k <= N; ++k) d.dc0.segment((k - 1) * n, n) = -pert.model_errors[k - 1];
  }

  for (const auto& [k, dy] : pert.data_errors) {
    const Observation* o = problem.obs.find(k);
    if (!o) throw DimensionMismatch("finite_dim_perturbation: data error at an unobserved time");
    const Vec g = -o->op->adj_apply(traj.states[k], o->R.solve(dy));
    if (k == 0)
      d.dJ_theta += g;
    else
      d.dJ_x.segment((k - 1) * n, n) += g;
  }
  return d;
}

// -----------------------------------------------------------------------------

SolverOptions oracle_solver_options(const ResolveOptions& opts) {
  SolverOptions s;
  s.max_iter = opts.max_iter;
  s.newton_polish = opts.newton_polish;
  s.polish_cg_tol = opts.polish_cg_tol;
  s.require_convergence = true;
  return s;
}

FourDVarProblem perturbed_problem(const FourDVarProblem& problem, const Perturbations& p) {
  FourDVarProblem out = problem;
  if (p.model_error_field) {
    out.model = std::make_shared<PerturbedModel>(problem.model, p.model_error_field);
  } else if (!p.model_errors.empty()) {
    out.model = std::make_shared<PerturbedModel>(
        problem.model, std::make_shared<AdditiveModelError>(p.model_errors));
  }
  out.obs = problem.obs.with_errors(p.data_errors);
  return out;
}

namespace {

AssimilationResult tight_solve(const FourDVarProblem& problem, const Vec& guess,
                               const ResolveOptions& opts) {
  SolverOptions s = oracle_solver_options(opts);
  s.grad_tol = opts.rel_grad_tol * (1.0 + std::abs(cost(problem, guess)));
  return assimilate(problem, guess, s);
}

}  // namespace

double oracle_perturbed_resolve(const FourDVarProblem& problem, const AssimilationResult& ideal,
                                const Perturbations& p, const QoiFunctional& qoi,
                                const ResolveOptions& opts) {
  const FourDVarProblem pp = perturbed_problem(problem, p);
  const AssimilationResult r = tight_solve(pp, ideal.analysis, opts);
  return qoi.eval(r.analysis) - qoi.eval(ideal.analysis);
}

Perturbations scaled(const Perturbations& p, double s) {
  Perturbations out;
  out.model_errors.reserve(p.model_errors.size());
  for (const Vec& v : p.model_errors) out.model_errors.push_back(s * v);
  for (const auto& [k, v] : p.data_errors) out.data_errors.emplace(k, s * v);
  if (p.model_error_field)
    out.model_error_field = std::make_shared<ScaledModelError>(p.model_error_field, s);
  return out;
}

// -----------------------------------------------------------------------------

ConvergenceStudy fit_convergence(std::vector<double> scales, std::vector<double> estimates,
                                 std::vector<double> actuals, double noise_floor) {
  if (scales.size() != estimates.size() || scales.size() != actuals.size())
    throw DimensionMismatch("fit_convergence: series lengths differ");
  ConvergenceStudy s;
  s.noise_floor = noise_floor;
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0.0)) throw ConfigError("fit_convergence: scales must be positive");
    const double diff = std::abs(estimates[i] - actuals[i]);
    s.differences.push_back(diff);
    if (diff > noise_floor) {
      lx.push_back(std::log(scales[i]));
      ly.push_back(std::log(diff));
    }
  }
  s.scales = std::move(scales);
  s.estimates = std::move(estimates);
  s.actuals = std::move(actuals);
  s.points_used = static_cast<int>(lx.size());
  if (lx.size() < 2) {
    s.degenerate = true;
    s.slope = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= lx.size();
  my /= ly.size();
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  if (sxx == 0.0) {
    s.degenerate = true;
    s.slope = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.slope = sxy / sxx;
  return s;
}

std::vector<double> default_study_scales() { return {1.0, 1e-1, 1e-2, 1e-3}; }

ConvergenceStudy convergence_order_study(const FourDVarProblem& problem,
                                         const AssimilationResult& ideal,
                                         const ImpactFactors& factors, const QoiFunctional& qoi,
                                         const Perturbations& base, std::vector<double> scales,
                                         const ResolveOptions& opts) {
  for (std::size_t i = 1; i < scales.size(); ++i)
    if (!(scales[i] < scales[i - 1])) throw ConfigError("convergence study: scales must decrease");

  const ErrorBudget unit = estimate_error_budget(problem, ideal.trajectory, factors, base);
  std::vector<double> est, act;
  double max_actual = 0.0;
  for (double s : scales) {
    est.push_back(s * unit.total);
    act.push_back(oracle_perturbed_resolve(problem, ideal, scaled(base, s), qoi, opts));
    max_actual = std::max(max_actual, std::abs(act.back()));
  }

  // Solver noise probe: re-solve the ideal problem from a displaced start.
  const Vec& xa = ideal.analysis;
  Vec shift(xa.size());
  for (Index i = 0; i < xa.size(); ++i) shift[i] = (i % 2 == 0 ? 1.0 : -1.0);
  const Vec guess = xa + 1e-4 * (1.0 + xa.cwiseAbs().maxCoeff()) * shift;
  const double e0 = qoi.eval(xa);
  const double probe = std::abs(qoi.eval(tight_solve(problem, guess, opts).analysis) - e0);
  const double floor =
      std::max(10.0 * probe, 1e3 * kEps * (1.0 + std::abs(e0) + max_actual));
  return fit_convergence(std::move(scales), std::move(est), std::move(act), floor);
}

// -----------------------------------------------------------------------------

std::pair<double, double> sample_mean_var(const std::vector<double>& v) {
  if (v.size() < 2) throw DimensionMismatch("sample_mean_var: need at least two values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, ss / static_cast<double>(v.size() - 1)};
}

double EnsembleReport::mean_standard_error() const {
  return n_members > 0 ? std::sqrt(ensemble_var / n_members) : 0.0;
}

double EnsembleReport::var_standard_error() const {
  return n_members > 1 ? ensemble_var * std::sqrt(2.0 / (n_members - 1)) : 0.0;
}

EnsembleReport ensemble_validate(const FourDVarProblem& problem, const AssimilationResult& ideal,
                                 const ImpactFactors& factors, const PerturbationSpec& spec,
                                 const QoiFunctional& qoi, const EnsembleOptions& opts) {
  if (opts.n_members < 2) throw ConfigError("ensemble_validate: need at least two members");
  const Index n = problem.model->dim();
  const int N = problem.model->num_steps();
  const bool has_model_errors = spec.model_noise.has_value() || !spec.model_bias.empty();

  struct Slot {
    bool ok = false;
    double actual = 0.0;
    double estimate = 0.0;
    std::string error;
  };
  std::vector<Slot> slots(opts.n_members);

  auto run_member = [&](int e) {
    Slot& slot = slots[e];
    try {
      Perturbations p;
      p.data_errors = sample_data_errors(spec, problem.obs, static_cast<std::uint64_t>(e));
      if (has_model_errors)
        p.model_errors = sample_model_errors(spec, n, N, static_cast<std::uint64_t>(e));
      slot.estimate = estimate_error_budget(problem, ideal.trajectory, factors, p).total;
      slot.actual = oracle_perturbed_resolve(problem, ideal, p, qoi, opts.resolve);
      slot.ok = true;
    } catch (const std::exception& ex) {
      slot.error = ex.what();
    }
  };

  int threads = opts.threads > 0 ? opts.threads
                                 : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, opts.n_members);
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int e = next++; e < opts.n_members; e = next++) run_member(e);
    });
  }
  for (auto& th : pool) th.join();

  EnsembleReport rep;
  for (int e = 0; e < opts.n_members; ++e) {
    if (slots[e].ok) {
      rep.members.push_back(e);
      rep.member_qoi_errors.push_back(slots[e].actual);
      rep.member_estimates.push_back(slots[e].estimate);
    } else {
      rep.failures.push_back({e, slots[e].error});
    }
  }
  rep.n_members = static_cast<int>(rep.members.size());
  if (rep.n_members < 2) {
    std::ostringstream os;
    os << "ensemble_validate: only " << rep.n_members << " of " << opts.n_members
       << " members succeeded";
    if (!rep.failures.empty()) os << " (first failure: " << rep.failures.front().message << ")";
    throw NonConvergence(os.str(), 0.0, opts.n_members);
  }
  std::tie(rep.ensemble_mean, rep.ensemble_var) = sample_mean_var(rep.member_qoi_errors);
  const EstimatedMoments m =
      estimate_error_statistics(problem, ideal.trajectory, factors, spec.statistics());
  rep.variational_mean = m.mean;
  rep.variational_var = m.variance;
  return rep;
}

}  // namespace varest
