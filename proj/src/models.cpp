/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/models.hpp"

#include <sstream>

namespace varest {

LinearModel::LinearModel(Mat propagator, int num_steps, double time_step)
    : propagator_(std::move(propagator)), num_steps_(num_steps), time_step_(time_step) {
  if (propagator_.rows() != propagator_.cols() || propagator_.rows() == 0)
    throw DimensionMismatch("LinearModel: propagator must be square and non-empty");
  if (num_steps_ < 0) throw DimensionMismatch("LinearModel: negative step count");
}

Vec LinearModel::step(int, const Vec& x) const { return propagator_ * x; }

Vec LinearModel::tlm_apply(int, const Vec&, const Vec& dx) const { return propagator_ * dx; }

Vec LinearModel::adj_apply(int, const Vec&, const Vec& lambda) const {
  return propagator_.transpose() * lambda;
}

Vec LinearModel::soa_apply(int, const Vec& x, const Vec&, const Vec&) const {
  return Vec::Zero(x.size());
}

// -----------------------------------------------------------------------------

HeatIntegrator parse_heat_integrator(const std::string& name) {
  if (name == "crank_nicolson") return HeatIntegrator::crank_nicolson;
  if (name == "explicit_rk4") return HeatIntegrator::explicit_rk4;
  throw ConfigError("unknown heat integrator '" + name + "'");
}

std::string to_string(HeatIntegrator integrator) {
  return integrator == HeatIntegrator::crank_nicolson ? "crank_nicolson" : "explicit_rk4";
}

Mat Heat1d::laplacian(int n, double h) {
  Mat d2 = Mat::Zero(n, n);
  const double w = 1.0 / (h * h);
  for (int j = 0; j < n; ++j) {
    d2(j, j) = -2.0 * w;
    d2(j, (j + 1) % n) += w;
    d2(j, (j + n - 1) % n) += w;
  }
  return d2;
}

namespace {

Mat heat_propagator(const Heat1dConfig& c) {
  if (c.n < 3) throw DimensionMismatch("heat1d: need at least 3 grid points");
  if (!(c.dt > 0.0) || !(c.alpha > 0.0)) throw ConfigError("heat1d: dt and alpha must be positive");
  const double h = c.spacing();
  const double courant = c.alpha * c.alpha * c.dt / (h * h);
  const Mat a = (c.alpha * c.alpha * c.dt) * Heat1d::laplacian(c.n, h);
  const Mat id = Mat::Identity(c.n, c.n);
  if (c.integrator == HeatIntegrator::explicit_rk4) {
    if (courant > 0.5) {
      std::ostringstream os;
      os << "heat1d: explicit integrator needs alpha^2 dt / h^2 <= 0.5, got " << courant;
      throw StabilityViolation(os.str());
    }
    // RK4 applied to a linear system is its degree-4 Taylor polynomial.
    const Mat a2 = a * a;
    return id + a + a2 / 2.0 + a2 * a / 6.0 + a2 * a2 / 24.0;
  }
  return (id - 0.5 * a).partialPivLu().solve(id + 0.5 * a);
}

}  // namespace

Heat1d::Heat1d(const Heat1dConfig& config)
    : LinearModel(heat_propagator(config), config.num_steps, config.dt), config_(config) {}

std::shared_ptr<const Heat1d> heat1d_build(const Heat1dConfig& config) {
  return std::make_shared<Heat1d>(config);
}

// -----------------------------------------------------------------------------

namespace {

inline int wrap(int i, int n) { return ((i % n) + n) % n; }

/// B(x, d)_i = (d_{i+1} - d_{i-2}) x_{i-1} + (x_{i+1} - x_{i-2}) d_{i-1}.
/// Symmetric bilinear form; the L96 tendency is B(x, x)/2 - x + F and its
/// Jacobian is J(x) d = B(x, d) - d.
Vec bilinear(const Vec& x, const Vec& d) {
  const int n = static_cast<int>(x.size());
  Vec out(n);
  for (int i = 0; i < n; ++i) {
    const int ip1 = wrap(i + 1, n), im1 = wrap(i - 1, n), im2 = wrap(i - 2, n);
    out[i] = (d[ip1] - d[im2]) * x[im1] + (x[ip1] - x[im2]) * d[im1];
  }
  return out;
}

/// Adjoint of d -> B(x, d), applied to w.
Vec bilinear_adj(const Vec& x, const Vec& w) {
  const int n = static_cast<int>(x.size());
  Vec out = Vec::Zero(n);
  for (int i = 0; i < n; ++i) {
    const int ip1 = wrap(i + 1, n), im1 = wrap(i - 1, n), im2 = wrap(i - 2, n);
    out[ip1] += w[i] * x[im1];
    out[im2] -= w[i] * x[im1];
    out[im1] += w[i] * (x[ip1] - x[im2]);
  }
  return out;
}

Vec jac(const Vec& x, const Vec& d) { return bilinear(x, d) - d; }
Vec jac_t(const Vec& x, const Vec& w) { return bilinear_adj(x, w) - w; }

struct Stages {
  Vec x1, x2, x3, x4;
  Vec k1, k2, k3, k4;
};

}  // namespace

Lorenz96::Lorenz96(const Lorenz96Config& config) : config_(config) {
  if (config_.n < 4) throw DimensionMismatch("lorenz96: n must be at least 4");
  if (!(config_.dt > 0.0) || config_.num_steps < 0) throw ConfigError("lorenz96: invalid dt/steps");
}

Vec Lorenz96::rhs(const Vec& x) const {
  return 0.5 * bilinear(x, x) - x + Vec::Constant(x.size(), config_.forcing);
}

namespace {

Stages rk4_stages(const Lorenz96& m, const Vec& x, double dt) {
  Stages s;
  s.x1 = x;
  s.k1 = m.rhs(s.x1);
  s.x2 = x + 0.5 * dt * s.k1;
  s.k2 = m.rhs(s.x2);
  s.x3 = x + 0.5 * dt * s.k2;
  s.k3 = m.rhs(s.x3);
  s.x4 = x + dt * s.k3;
  s.k4 = m.rhs(s.x4);
  return s;
}

}  // namespace

Vec Lorenz96::step(int, const Vec& x) const {
  if (x.size() != config_.n) throw DimensionMismatch("lorenz96: state dimension mismatch");
  const double dt = config_.dt;
  const Stages s = rk4_stages(*this, x, dt);
  return x + dt / 6.0 * (s.k1 + 2.0 * s.k2 + 2.0 * s.k3 + s.k4);
}

Vec Lorenz96::tlm_apply(int, const Vec& x, const Vec& dx) const {
  const double dt = config_.dt;
  const Stages s = rk4_stages(*this, x, dt);
  const Vec dk1 = jac(s.x1, dx);
  const Vec dk2 = jac(s.x2, dx + 0.5 * dt * dk1);
  const Vec dk3 = jac(s.x3, dx + 0.5 * dt * dk2);
  const Vec dk4 = jac(s.x4, dx + dt * dk3);
  return dx + dt / 6.0 * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4);
}

Vec Lorenz96::adj_apply(int, const Vec& x, const Vec& lambda) const {
  const double dt = config_.dt;
  const Stages s = rk4_stages(*this, x, dt);
  Vec out = lambda;
  const Vec a4 = dt / 6.0 * lambda;
  const Vec g4 = jac_t(s.x4, a4);
  out += g4;
  const Vec a3 = dt / 3.0 * lambda + dt * g4;
  const Vec g3 = jac_t(s.x3, a3);
  out += g3;
  const Vec a2 = dt / 3.0 * lambda + 0.5 * dt * g3;
  const Vec g2 = jac_t(s.x2, a2);
  out += g2;
  const Vec a1 = dt / 6.0 * lambda + 0.5 * dt * g2;
  out += jac_t(s.x1, a1);
  return out;
}

Vec Lorenz96::soa_apply(int, const Vec& x, const Vec& lambda, const Vec& mu) const {
  // Forward-over-reverse differentiation of adj_apply in the direction mu.
  // The tendency is quadratic, so d/dx [J(x)^T w] . v = bilinear_adj(v, w).
  const double dt = config_.dt;
  const Stages s = rk4_stages(*this, x, dt);

  const Vec dx1 = mu;
  const Vec dk1 = jac(s.x1, dx1);
  const Vec dx2 = mu + 0.5 * dt * dk1;
  const Vec dk2 = jac(s.x2, dx2);
  const Vec dx3 = mu + 0.5 * dt * dk2;
  const Vec dk3 = jac(s.x3, dx3);
  const Vec dx4 = mu + dt * dk3;

  const Vec a4 = dt / 6.0 * lambda;
  const Vec g4 = jac_t(s.x4, a4);
  const Vec dg4 = bilinear_adj(dx4, a4);

  const Vec a3 = dt / 3.0 * lambda + dt * g4;
  const Vec da3 = dt * dg4;
  const Vec g3 = jac_t(s.x3, a3);
  const Vec dg3 = bilinear_adj(dx3, a3) + jac_t(s.x3, da3);

  const Vec a2 = dt / 3.0 * lambda + 0.5 * dt * g3;
  const Vec da2 = 0.5 * dt * dg3;
  const Vec g2 = jac_t(s.x2, a2);
  const Vec dg2 = bilinear_adj(dx2, a2) + jac_t(s.x2, da2);

  const Vec a1 = dt / 6.0 * lambda + 0.5 * dt * g2;
  const Vec da1 = 0.5 * dt * dg2;
  const Vec dg1 = bilinear_adj(dx1, a1) + jac_t(s.x1, da1);

  return dg4 + dg3 + dg2 + dg1;
}

std::shared_ptr<const Lorenz96> lorenz96_build(const Lorenz96Config& config) {
  return std::make_shared<Lorenz96>(config);
}

}  // namespace varest
