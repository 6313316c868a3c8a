/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <sstream>

namespace varest {

bool all_finite(const Vec& v) { return v.allFinite(); }

// -----------------------------------------------------------------------------

SymOp::SymOp(Index dim, ApplyFn apply) : dim_(dim), apply_(std::move(apply)) {}

SymOp SymOp::from_matrix(Mat m) {
  if (m.rows() != m.cols()) throw DimensionMismatch("SymOp::from_matrix: matrix not square");
  const Index n = m.rows();
  auto shared = std::make_shared<const Mat>(std::move(m));
  return SymOp(n, [shared](const Vec& v) -> Vec { return (*shared) * v; });
}

SymOp SymOp::identity(Index dim) {
  return SymOp(dim, [](const Vec& v) { return v; });
}

Vec SymOp::apply(const Vec& v) const {
  if (v.size() != dim_) throw DimensionMismatch("SymOp::apply: dimension mismatch");
  return apply_(v);
}

Mat SymOp::assemble() const {
  Mat out(dim_, dim_);
  for (Index j = 0; j < dim_; ++j) out.col(j) = apply(Vec::Unit(dim_, j));
  return out;
}

double symmetry_defect(const SymOp& op, const Vec& u, const Vec& v) {
  const Vec au = op(u);
  const Vec av = op(v);
  const double scale = u.norm() * av.norm() + v.norm() * au.norm();
  if (scale == 0.0) return 0.0;
  return std::abs(u.dot(av) - v.dot(au)) / scale;
}

// -----------------------------------------------------------------------------

CovMatrix CovMatrix::diagonal(Vec variances) {
  if ((variances.array() < 0.0).any() || !variances.allFinite())
    throw NotPSD("CovMatrix::diagonal: negative or non-finite variance");
  CovMatrix c;
  c.dim_ = variances.size();
  c.diagonal_ = true;
  c.positive_definite_ = (variances.array() > 0.0).all();
  c.factor_ = variances.cwiseSqrt();
  c.diag_ = std::move(variances);
  return c;
}

CovMatrix CovMatrix::scaled_identity(Index dim, double variance) {
  return diagonal(Vec::Constant(dim, variance));
}

CovMatrix CovMatrix::dense(Mat matrix, double psd_tol) {
  if (matrix.rows() != matrix.cols()) throw DimensionMismatch("CovMatrix::dense: not square");
  if (!matrix.allFinite()) throw NotPSD("CovMatrix::dense: non-finite entries");
  const double scale = std::max(1.0, matrix.cwiseAbs().maxCoeff());
  if ((matrix - matrix.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw NotPSD("CovMatrix::dense: matrix is not symmetric");
  if ((matrix.diagonal().array() < 0.0).any())
    throw NotPSD("CovMatrix::dense: negative diagonal entry");

  CovMatrix c;
  c.dim_ = matrix.rows();
  c.diagonal_ = false;
  c.llt_.compute(matrix);
  if (c.llt_.info() == Eigen::Success) {
    c.positive_definite_ = true;
    c.factor_ = c.llt_.matrixL();
  } else {
    Eigen::SelfAdjointEigenSolver<Mat> eig(matrix);
    const double trace = std::max(matrix.trace(), std::numeric_limits<double>::min());
    const double lmin = eig.eigenvalues().minCoeff();
    if (lmin < -psd_tol * trace) {
      std::ostringstream os;
      os << "CovMatrix::dense: min eigenvalue " << lmin << " below -" << psd_tol << "*trace";
      throw NotPSD(os.str());
    }
    const Vec root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    c.factor_ = eig.eigenvectors() * root.asDiagonal();
    c.positive_definite_ = false;
  }
  c.dense_ = std::move(matrix);
  return c;
}

Vec CovMatrix::apply(const Vec& v) const {
  if (v.size() != dim_) throw DimensionMismatch("CovMatrix::apply: dimension mismatch");
  if (diagonal_) return diag_.cwiseProduct(v);
  return dense_ * v;
}

Vec CovMatrix::solve(const Vec& v) const {
  if (v.size() != dim_) throw DimensionMismatch("CovMatrix::solve: dimension mismatch");
  if (!positive_definite_) throw NotPSD("CovMatrix::solve: covariance is singular");
  if (diagonal_) return v.cwiseQuotient(diag_);
  return llt_.solve(v);
}

Vec CovMatrix::sqrt_apply(const Vec& z) const {
  if (z.size() != dim_) throw DimensionMismatch("CovMatrix::sqrt_apply: dimension mismatch");
  if (diagonal_) return factor_.col(0).cwiseProduct(z);
  return factor_ * z;
}

Vec CovMatrix::diagonal_entries() const { return diagonal_ ? diag_ : Vec(dense_.diagonal()); }

Mat CovMatrix::to_dense() const {
  if (diagonal_) return diag_.asDiagonal();
  return dense_;
}

// -----------------------------------------------------------------------------

CgResult cg_solve(const SymOp& op, const Vec& rhs, const CgOptions& opts) {
  const Index n = op.dim();
  if (rhs.size() != n) throw DimensionMismatch("cg_solve: rhs dimension mismatch");
  if (!rhs.allFinite()) throw Error("cg_solve: non-finite right-hand side");
  if (opts.diagonal_preconditioner && opts.diagonal_preconditioner->size() != n)
    throw DimensionMismatch("cg_solve: preconditioner dimension mismatch");

  CgResult out;
  out.x = Vec::Zero(n);
  const double bnorm = rhs.norm();
  out.residual_history.push_back(bnorm);
  if (bnorm == 0.0) return out;

  auto precondition = [&](const Vec& r) -> Vec {
    if (!opts.diagonal_preconditioner) return r;
    return r.cwiseQuotient(*opts.diagonal_preconditioner);
  };

  Vec r = rhs;
  Vec z = precondition(r);
  Vec p = z;
  double rz = r.dot(z);
  double rnorm = bnorm;

  for (int it = 1; it <= opts.max_iter; ++it) {
    const Vec ap = op(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) {
      std::ostringstream os;
      os << "cg_solve: non-positive curvature p^T A p = " << pap << " at iteration " << it;
      throw NegativeCurvature(os.str(), out.x, pap, it);
    }
    const double alpha = rz / pap;
    out.x += alpha * p;
    r -= alpha * ap;
    rnorm = r.norm();
    out.iterations = it;
    out.residual_history.push_back(rnorm);
    if (opts.monitor) opts.monitor(it, out.x, rnorm);
    if (rnorm <= opts.tol * bnorm) {
      out.residual_norm = rnorm;
      return out;
    }
    z = precondition(r);
    const double rz_next = r.dot(z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
  out.residual_norm = rnorm;
  std::ostringstream os;
  os << "cg_solve: relative residual " << rnorm / bnorm << " above " << opts.tol << " after "
     << opts.max_iter << " iterations";
  throw NonConvergence(os.str(), rnorm, opts.max_iter);
}

// -----------------------------------------------------------------------------

namespace {

struct CorrectionPair {
  Vec s;
  Vec y;
  double rho;
};

using PairList = std::vector<CorrectionPair>;

/// Two-loop recursion: applies the L-BFGS inverse Hessian to v.
Vec two_loop(const PairList& pairs, const Vec& v) {
  Vec q = v;
  std::vector<double> alpha(pairs.size());
  for (std::size_t i = pairs.size(); i-- > 0;) {
    alpha[i] = pairs[i].rho * pairs[i].s.dot(q);
    q -= alpha[i] * pairs[i].y;
  }
  double gamma = 1.0;
  if (!pairs.empty()) {
    const auto& last = pairs.back();
    gamma = last.s.dot(last.y) / last.y.squaredNorm();
  }
  Vec r = gamma * q;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double beta = pairs[i].rho * pairs[i].y.dot(r);
    r += (alpha[i] - beta) * pairs[i].s;
  }
  return r;
}

struct LinePoint {
  double alpha = 0.0;
  double f = 0.0;
  double dphi = 0.0;
  Vec x;
  Vec g;
};

class LineSearch {
 public:
  LineSearch(const ObjectiveFn& f, const LbfgsOptions& opts, int& evaluations)
      : f_(f), opts_(opts), evaluations_(evaluations) {}

  /// Returns a point satisfying the strong Wolfe conditions or nullopt.
  std::optional<LinePoint> search(const Vec& x, double f0, const Vec& g0, const Vec& dir,
                                  double alpha_init) {
    x0_ = &x;
    dir_ = &dir;
    f0_ = f0;
    d0_ = g0.dot(dir);
    if (!(d0_ < 0.0)) return std::nullopt;

    LinePoint prev{0.0, f0, d0_, x, g0};
    double alpha = alpha_init;
    for (int i = 0; i < opts_.max_line_search; ++i) {
      LinePoint cur = eval(alpha);
      if (!std::isfinite(cur.f)) {
        alpha = 0.5 * (prev.alpha + alpha);
        continue;
      }
      if (cur.f > f0_ + opts_.c1 * alpha * d0_ || (i > 0 && cur.f >= prev.f))
        return zoom(prev, cur);
      if (std::abs(cur.dphi) <= -opts_.c2 * d0_) return cur;
      if (cur.dphi >= 0.0) return zoom(cur, prev);
      prev = std::move(cur);
      alpha = std::min(4.0 * alpha, 1e10);
    }
    return std::nullopt;
  }

  bool wolfe(const LinePoint& p) const {
    return p.f <= f0_ + opts_.c1 * p.alpha * d0_ && std::abs(p.dphi) <= -opts_.c2 * d0_;
  }

  LinePoint eval(double alpha) {
    LinePoint p;
    p.alpha = alpha;
    p.x = *x0_ + alpha * (*dir_);
    p.g = Vec::Zero(p.x.size());
    p.f = f_(p.x, p.g);
    ++evaluations_;
    if (!p.g.allFinite()) p.f = std::numeric_limits<double>::infinity();
    p.dphi = p.g.dot(*dir_);
    return p;
  }

  double d0() const { return d0_; }

 private:
  std::optional<LinePoint> zoom(LinePoint lo, LinePoint hi) {
    for (int i = 0; i < opts_.max_line_search; ++i) {
      const double width = hi.alpha - lo.alpha;
      if (std::abs(width) <= 1e-16 * std::max(1.0, std::abs(lo.alpha))) break;
      double alpha = cubic_minimizer(lo, hi);
      const double a = std::min(lo.alpha, hi.alpha);
      const double b = std::max(lo.alpha, hi.alpha);
      const double margin = 0.1 * (b - a);
      if (!std::isfinite(alpha) || alpha < a + margin || alpha > b - margin)
        alpha = 0.5 * (lo.alpha + hi.alpha);
      LinePoint cur = eval(alpha);
      if (cur.f > f0_ + opts_.c1 * alpha * d0_ || cur.f >= lo.f) {
        hi = std::move(cur);
      } else {
        if (std::abs(cur.dphi) <= -opts_.c2 * d0_) return cur;
        if (cur.dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = std::move(cur);
      }
    }
    // Accept a sufficient-decrease point when the bracket collapsed.
    if (lo.alpha > 0.0 && lo.f <= f0_ + opts_.c1 * lo.alpha * d0_ &&
        lo.dphi > d0_)
      return lo;
    return std::nullopt;
  }

  static double cubic_minimizer(const LinePoint& a, const LinePoint& b) {
    const double d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    const double disc = d1 * d1 - a.dphi * b.dphi;
    if (disc < 0.0) return std::numeric_limits<double>::quiet_NaN();
    const double d2 = std::copysign(std::sqrt(disc), b.alpha - a.alpha);
    return b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
  }

  const ObjectiveFn& f_;
  const LbfgsOptions& opts_;
  int& evaluations_;
  const Vec* x0_ = nullptr;
  const Vec* dir_ = nullptr;
  double f0_ = 0.0;
  double d0_ = 0.0;
};

}  // namespace

LbfgsResult lbfgs_minimize(const ObjectiveFn& f, Vec x0, const LbfgsOptions& opts) {
  if (opts.memory < 1) throw Error("lbfgs_minimize: memory must be positive");
  LbfgsResult out;
  out.x = std::move(x0);
  out.grad = Vec::Zero(out.x.size());
  out.f = f(out.x, out.grad);
  out.evaluations = 1;
  if (!std::isfinite(out.f) || !out.grad.allFinite())
    throw Error("lbfgs_minimize: non-finite objective at the initial point");

  PairList pairs;
  LineSearch ls(f, opts, out.evaluations);
  out.f_history.push_back(out.f);
  out.grad_norm_history.push_back(out.grad.norm());

  for (int it = 0; it < opts.max_iter; ++it) {
    const double gnorm = out.grad.norm();
    if (gnorm <= opts.grad_tol) {
      out.converged = true;
      break;
    }
    Vec dir = -two_loop(pairs, out.grad);
    double alpha0 = pairs.empty() ? std::min(1.0, 1.0 / gnorm) : 1.0;
    auto step = ls.search(out.x, out.f, out.grad, dir, alpha0);
    if (!step && !pairs.empty()) {
      // Restart along steepest descent with a fresh memory.
      pairs.clear();
      dir = -out.grad;
      step = ls.search(out.x, out.f, out.grad, dir, std::min(1.0, 1.0 / gnorm));
    }
    if (!step) {
      std::ostringstream os;
      os << "lbfgs_minimize: no Wolfe step at iteration " << it << " (|g| = " << gnorm << ")";
      throw LineSearchFailure(os.str(), out.x, gnorm);
    }
    LinePoint accepted = std::move(*step);

    if (opts.secant_refinement) {
      const double curvature = accepted.dphi - ls.d0();
      if (curvature > 0.0 && std::abs(accepted.dphi) > 1e-12 * std::abs(ls.d0())) {
        const double alpha_s = accepted.alpha * (-ls.d0()) / curvature;
        if (std::isfinite(alpha_s) && alpha_s > 0.0 && alpha_s != accepted.alpha) {
          LinePoint refined = ls.eval(alpha_s);
          if (std::isfinite(refined.f) && ls.wolfe(refined) && refined.f <= accepted.f)
            accepted = std::move(refined);
        }
      }
    }

    CorrectionPair pair{accepted.x - out.x, accepted.g - out.grad, 0.0};
    const double sy = pair.s.dot(pair.y);
    out.x = std::move(accepted.x);
    out.grad = std::move(accepted.g);
    out.f = accepted.f;
    out.iterations = it + 1;
    out.f_history.push_back(out.f);
    out.grad_norm_history.push_back(out.grad.norm());
    if (sy > 1e-14 * pair.s.norm() * pair.y.norm()) {
      pair.rho = 1.0 / sy;
      pairs.push_back(std::move(pair));
      if (static_cast<int>(pairs.size()) > opts.memory) pairs.erase(pairs.begin());
    }
  }
  if (!out.converged && out.grad.norm() <= opts.grad_tol) out.converged = true;

  auto stored = std::make_shared<const PairList>(std::move(pairs));
  out.inverse_hessian =
      SymOp(out.x.size(), [stored](const Vec& v) { return two_loop(*stored, v); });
  return out;
}

// -----------------------------------------------------------------------------

double default_fd_step(const Vec& x) {
  const double xmax = x.size() ? x.cwiseAbs().maxCoeff() : 0.0;
  return std::cbrt(std::numeric_limits<double>::epsilon()) * (1.0 + xmax);
}

Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                std::optional<double> step) {
  const double h = step.value_or(default_fd_step(x));
  if (!(h > 0.0)) throw Error("fd_gradient: step must be positive");
  Vec g(x.size());
  Vec xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Vec fd_jacvec(const std::function<Vec(const Vec&)>& g, const Vec& x, const Vec& dir,
              std::optional<double> step) {
  if (dir.size() != x.size()) throw DimensionMismatch("fd_jacvec: direction dimension mismatch");
  double h;
  if (step) {
    h = *step;
  } else {
    const double dnorm = dir.size() ? dir.cwiseAbs().maxCoeff() : 0.0;
    if (dnorm == 0.0) return Vec::Zero(g(x).size());
    h = default_fd_step(x) / dnorm;
  }
  if (!(h > 0.0)) throw Error("fd_jacvec: step must be positive");
  return (g(x + h * dir) - g(x - h * dir)) / (2.0 * h);
}

}  // namespace varest
