/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <memory>
#include <string>

#include "varest/model.hpp"

namespace varest {

/// Time-invariant linear model x_{k+1} = A x_k.
class LinearModel : public Model {
 public:
  LinearModel(Mat propagator, int num_steps, double time_step = 1.0);

  Index dim() const override { return propagator_.rows(); }
  int num_steps() const override { return num_steps_; }
  double time_step() const override { return time_step_; }

  Vec step(int k, const Vec& x) const override;
  Vec tlm_apply(int k, const Vec& x, const Vec& dx) const override;
  Vec adj_apply(int k, const Vec& x, const Vec& lambda) const override;
  /// Always zero: the dynamics are linear.
  Vec soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const override;

  const Mat& propagator() const { return propagator_; }

 private:
  Mat propagator_;
  int num_steps_;
  double time_step_;
};

// -----------------------------------------------------------------------------

enum class HeatIntegrator { crank_nicolson, explicit_rk4 };

HeatIntegrator parse_heat_integrator(const std::string& name);
std::string to_string(HeatIntegrator integrator);

/// u_t = alpha^2 u_xx on [-1, 1) with periodic boundaries, n grid points.
struct Heat1dConfig {
  int n = 50;
  double alpha = 1.0;
  double dt = 1e-3;
  int num_steps = 100;
  HeatIntegrator integrator = HeatIntegrator::crank_nicolson;

  double spacing() const { return 2.0 / n; }
  /// Grid node x_j = -1 + j h.
  double node(int j) const { return -1.0 + j * spacing(); }
};

/// Heat equation discretized with the periodic second-difference Laplacian.
class Heat1d final : public LinearModel {
 public:
  explicit Heat1d(const Heat1dConfig& config);
  const Heat1dConfig& config() const { return config_; }

  /// Periodic central-difference Laplacian D2 (n x n).
  static Mat laplacian(int n, double h);

 private:
  Heat1dConfig config_;
};

/// Builds the heat model; throws StabilityViolation when the explicit
/// integrator has alpha^2 dt / h^2 > 0.5.
std::shared_ptr<const Heat1d> heat1d_build(const Heat1dConfig& config);

// -----------------------------------------------------------------------------

struct Lorenz96Config {
  int n = 40;
  double forcing = 8.0;
  double dt = 0.05;
  int num_steps = 20;
};

/// dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F, advanced with classical RK4.
/// Tangent-linear, adjoint and second-order adjoint products are exact
/// derivatives of the discrete RK4 map.
class Lorenz96 final : public Model {
 public:
  explicit Lorenz96(const Lorenz96Config& config);

  Index dim() const override { return config_.n; }
  int num_steps() const override { return config_.num_steps; }
  double time_step() const override { return config_.dt; }

  Vec step(int k, const Vec& x) const override;
  Vec tlm_apply(int k, const Vec& x, const Vec& dx) const override;
  Vec adj_apply(int k, const Vec& x, const Vec& lambda) const override;
  Vec soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const override;

  Vec rhs(const Vec& x) const;
  const Lorenz96Config& config() const { return config_; }

 private:
  Lorenz96Config config_;
};

std::shared_ptr<const Lorenz96> lorenz96_build(const Lorenz96Config& config);

}  // namespace varest
