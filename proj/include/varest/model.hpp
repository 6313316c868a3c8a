/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "varest/linalg.hpp"

namespace varest {

/// Discrete dynamical model x_{k+1} = M_{k,k+1}(x_k) with derivative products.
///
/// Every product is linearized about the state x_k at the start of step k.
/// Implementations must be immutable: all methods are pure functions of their
/// arguments and may be called concurrently.
class Model {
 public:
  virtual ~Model() = default;

  virtual Index dim() const = 0;
  virtual int num_steps() const = 0;
  /// Physical time covered by one step (metadata; 1 when not meaningful).
  virtual double time_step() const { return 1.0; }

  virtual Vec step(int k, const Vec& x) const = 0;
  /// M_{k,k+1} dx
  virtual Vec tlm_apply(int k, const Vec& x, const Vec& dx) const = 0;
  /// M_{k,k+1}^T lambda
  virtual Vec adj_apply(int k, const Vec& x, const Vec& lambda) const = 0;
  /// (M_{k,k+1}^T lambda)_x^T mu, the second-order adjoint product.
  virtual Vec soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const = 0;

  /// Parameter Jacobian (M_{k,k+1})_theta applied to dtheta. The control is
  /// the initial condition only, so the model has no explicit parameter
  /// dependence and this is identically zero.
  Vec param_tlm_apply(int /*k*/, const Vec& /*x*/, const Vec& /*dtheta*/) const {
    return Vec::Zero(dim());
  }
};

using ModelPtr = std::shared_ptr<const Model>;

/// Forward states x_0..x_N and, after an adjoint sweep, lambda_0..lambda_N.
struct Trajectory {
  std::vector<Vec> states;
  std::vector<Vec> adjoints;
  double time_step = 1.0;

  int num_steps() const { return static_cast<int>(states.size()) - 1; }
  bool has_adjoints() const { return !adjoints.empty(); }
};

/// Runs the model from x0. Throws NonFiniteState naming the first bad step.
Trajectory propagate(const Model& model, const Vec& x0);

// -----------------------------------------------------------------------------

/// Step function of a model that provides no derivatives.
using StepFn = std::function<Vec(int k, const Vec& x)>;

/// Model whose derivative products are synthesized by central differences.
///
/// The Jacobian is assembled column by column, so tangent-linear and adjoint
/// products are exact transposes of one another. Second-order products use a
/// four-point mixed difference of the scalar lambda^T M(x).
class FdModel final : public Model {
 public:
  static constexpr Index kMaxDim = 64;

  /// Throws DimensionTooLarge when dim > kMaxDim.
  FdModel(Index dim, int num_steps, StepFn step, double time_step = 1.0);

  Index dim() const override { return dim_; }
  int num_steps() const override { return num_steps_; }
  double time_step() const override { return time_step_; }

  Vec step(int k, const Vec& x) const override { return step_(k, x); }
  Vec tlm_apply(int k, const Vec& x, const Vec& dx) const override;
  Vec adj_apply(int k, const Vec& x, const Vec& lambda) const override;
  Vec soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const override;

  Mat jacobian(int k, const Vec& x) const;

 private:
  Index dim_;
  int num_steps_;
  StepFn step_;
  double time_step_;
};

/// Wraps a derivative-free step function; see FdModel.
ModelPtr fd_fallback_wrap(Index dim, int num_steps, StepFn step, double time_step = 1.0);

// -----------------------------------------------------------------------------
// Model errors
// -----------------------------------------------------------------------------

/// Additive model-error field: the imperfect model is
/// x_k = M_{k-1,k}(x_{k-1}) + delta_k(x_{k-1}) for k = 1..N.
class ModelError {
 public:
  virtual ~ModelError() = default;

  /// delta_k evaluated at the state x_{k-1}.
  virtual Vec value(int k, const Vec& x_prev) const = 0;
  /// (delta_k)_x dx. Zero unless state dependent.
  virtual Vec jac_apply(int k, const Vec& x_prev, const Vec& dx) const;
  /// (delta_k)_x^T w. Zero unless state dependent.
  virtual Vec jac_adj_apply(int k, const Vec& x_prev, const Vec& w) const;
  virtual bool state_dependent() const { return false; }
};

using ModelErrorPtr = std::shared_ptr<const ModelError>;

/// State-independent errors given as a sequence: increments[k-1] = delta_k.
class AdditiveModelError final : public ModelError {
 public:
  explicit AdditiveModelError(std::vector<Vec> increments);

  Vec value(int k, const Vec& x_prev) const override;
  const std::vector<Vec>& increments() const { return increments_; }

 private:
  std::vector<Vec> increments_;
};

/// delta_k(x) = scale_k (.) x + offset_k, diagonal in the state.
class DiagonalStateModelError final : public ModelError {
 public:
  DiagonalStateModelError(std::vector<Vec> scale, std::vector<Vec> offset);

  Vec value(int k, const Vec& x_prev) const override;
  Vec jac_apply(int k, const Vec& x_prev, const Vec& dx) const override;
  Vec jac_adj_apply(int k, const Vec& x_prev, const Vec& w) const override;
  bool state_dependent() const override { return true; }

 private:
  std::vector<Vec> scale_;
  std::vector<Vec> offset_;
};

/// factor * base, used to scale a perturbation in convergence studies.
class ScaledModelError final : public ModelError {
 public:
  ScaledModelError(ModelErrorPtr base, double factor);

  Vec value(int k, const Vec& x_prev) const override;
  Vec jac_apply(int k, const Vec& x_prev, const Vec& dx) const override;
  Vec jac_adj_apply(int k, const Vec& x_prev, const Vec& w) const override;
  bool state_dependent() const override { return base_->state_dependent(); }

 private:
  ModelErrorPtr base_;
  double factor_;
};

/// The imperfect model M + delta. Second derivatives of delta are taken as
/// zero (all shipped error fields are affine in the state).
class PerturbedModel final : public Model {
 public:
  PerturbedModel(ModelPtr base, ModelErrorPtr error);

  Index dim() const override { return base_->dim(); }
  int num_steps() const override { return base_->num_steps(); }
  double time_step() const override { return base_->time_step(); }

  Vec step(int k, const Vec& x) const override;
  Vec tlm_apply(int k, const Vec& x, const Vec& dx) const override;
  Vec adj_apply(int k, const Vec& x, const Vec& lambda) const override;
  Vec soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const override;

 private:
  ModelPtr base_;
  ModelErrorPtr error_;
};

/// Realizes delta_1..delta_N along a trajectory of the ideal model.
std::vector<Vec> realize_model_error(const ModelError& error, const Trajectory& traj);

}  // namespace varest
