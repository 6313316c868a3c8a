/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/model.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace varest {

Trajectory propagate(const Model& model, const Vec& x0) {
  if (x0.size() != model.dim()) throw DimensionMismatch("propagate: x0 dimension mismatch");
  if (!x0.allFinite()) throw NonFiniteState("propagate: non-finite initial state", 0);
  Trajectory traj;
  traj.time_step = model.time_step();
  traj.states.reserve(model.num_steps() + 1);
  traj.states.push_back(x0);
  for (int k = 0; k < model.num_steps(); ++k) {
    Vec next = model.step(k, traj.states.back());
    if (!next.allFinite()) {
      std::ostringstream os;
      os << "propagate: non-finite state after step " << k << " -> " << k + 1;
      throw NonFiniteState(os.str(), k + 1);
    }
    traj.states.push_back(std::move(next));
  }
  return traj;
}

// -----------------------------------------------------------------------------

FdModel::FdModel(Index dim, int num_steps, StepFn step, double time_step)
    : dim_(dim), num_steps_(num_steps), step_(std::move(step)), time_step_(time_step) {
  if (dim > kMaxDim) {
    std::ostringstream os;
    os << "FdModel: finite-difference Jacobian assembly refused for n = " << dim << " > "
       << kMaxDim;
    throw DimensionTooLarge(os.str());
  }
  if (dim <= 0 || num_steps < 0) throw DimensionMismatch("FdModel: invalid dimensions");
}

Mat FdModel::jacobian(int k, const Vec& x) const {
  const double h = default_fd_step(x);
  Mat jac(dim_, dim_);
  Vec xp = x;
  for (Index j = 0; j < dim_; ++j) {
    xp[j] = x[j] + h;
    const Vec fp = step_(k, xp);
    xp[j] = x[j] - h;
    const Vec fm = step_(k, xp);
    xp[j] = x[j];
    jac.col(j) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

Vec FdModel::tlm_apply(int k, const Vec& x, const Vec& dx) const { return jacobian(k, x) * dx; }

Vec FdModel::adj_apply(int k, const Vec& x, const Vec& lambda) const {
  return jacobian(k, x).transpose() * lambda;
}

Vec FdModel::soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const {
  const double mu_max = mu.cwiseAbs().maxCoeff();
  if (mu_max == 0.0) return Vec::Zero(dim_);
  const double root4 = std::pow(std::numeric_limits<double>::epsilon(), 0.25);
  const double xscale = 1.0 + x.cwiseAbs().maxCoeff();
  const double h = root4 * xscale;
  const double s = root4 * xscale / mu_max;
  auto phi = [&](const Vec& z) { return lambda.dot(step_(k, z)); };

  Vec out(dim_);
  for (Index i = 0; i < dim_; ++i) {
    Vec xp = x;
    xp[i] += h;
    Vec xm = x;
    xm[i] -= h;
    const double fpp = phi(xp + s * mu);
    const double fpm = phi(xp - s * mu);
    const double fmp = phi(xm + s * mu);
    const double fmm = phi(xm - s * mu);
    out[i] = (fpp - fpm - fmp + fmm) / (4.0 * h * s);
  }
  return out;
}

ModelPtr fd_fallback_wrap(Index dim, int num_steps, StepFn step, double time_step) {
  return std::make_shared<FdModel>(dim, num_steps, std::move(step), time_step);
}

// -----------------------------------------------------------------------------

Vec ModelError::jac_apply(int, const Vec& x_prev, const Vec&) const {
  return Vec::Zero(x_prev.size());
}

Vec ModelError::jac_adj_apply(int, const Vec& x_prev, const Vec&) const {
  return Vec::Zero(x_prev.size());
}

AdditiveModelError::AdditiveModelError(std::vector<Vec> increments)
    : increments_(std::move(increments)) {}

Vec AdditiveModelError::value(int k, const Vec& x_prev) const {
  if (k < 1 || k > static_cast<int>(increments_.size()))
    throw DimensionMismatch("AdditiveModelError: step index out of range");
  if (increments_[k - 1].size() != x_prev.size())
    throw DimensionMismatch("AdditiveModelError: increment dimension mismatch");
  return increments_[k - 1];
}

DiagonalStateModelError::DiagonalStateModelError(std::vector<Vec> scale, std::vector<Vec> offset)
    : scale_(std::move(scale)), offset_(std::move(offset)) {
  if (scale_.size() != offset_.size())
    throw DimensionMismatch("DiagonalStateModelError: scale/offset length mismatch");
}

Vec DiagonalStateModelError::value(int k, const Vec& x_prev) const {
  if (k < 1 || k > static_cast<int>(scale_.size()))
    throw DimensionMismatch("DiagonalStateModelError: step index out of range");
  return scale_[k - 1].cwiseProduct(x_prev) + offset_[k - 1];
}

Vec DiagonalStateModelError::jac_apply(int k, const Vec&, const Vec& dx) const {
  return scale_.at(k - 1).cwiseProduct(dx);
}

Vec DiagonalStateModelError::jac_adj_apply(int k, const Vec&, const Vec& w) const {
  return scale_.at(k - 1).cwiseProduct(w);
}

ScaledModelError::ScaledModelError(ModelErrorPtr base, double factor)
    : base_(std::move(base)), factor_(factor) {}

Vec ScaledModelError::value(int k, const Vec& x_prev) const {
  return factor_ * base_->value(k, x_prev);
}

Vec ScaledModelError::jac_apply(int k, const Vec& x_prev, const Vec& dx) const {
  return factor_ * base_->jac_apply(k, x_prev, dx);
}

Vec ScaledModelError::jac_adj_apply(int k, const Vec& x_prev, const Vec& w) const {
  return factor_ * base_->jac_adj_apply(k, x_prev, w);
}

// -----------------------------------------------------------------------------

PerturbedModel::PerturbedModel(ModelPtr base, ModelErrorPtr error)
    : base_(std::move(base)), error_(std::move(error)) {}

Vec PerturbedModel::step(int k, const Vec& x) const {
  return base_->step(k, x) + error_->value(k + 1, x);
}

Vec PerturbedModel::tlm_apply(int k, const Vec& x, const Vec& dx) const {
  Vec out = base_->tlm_apply(k, x, dx);
  if (error_->state_dependent()) out += error_->jac_apply(k + 1, x, dx);
  return out;
}

Vec PerturbedModel::adj_apply(int k, const Vec& x, const Vec& lambda) const {
  Vec out = base_->adj_apply(k, x, lambda);
  if (error_->state_dependent()) out += error_->jac_adj_apply(k + 1, x, lambda);
  return out;
}

Vec PerturbedModel::soa_apply(int k, const Vec& x, const Vec& lambda, const Vec& mu) const {
  return base_->soa_apply(k, x, lambda, mu);
}

std::vector<Vec> realize_model_error(const ModelError& error, const Trajectory& traj) {
  std::vector<Vec> out;
  out.reserve(traj.num_steps());
  for (int k = 1; k <= traj.num_steps(); ++k) out.push_back(error.value(k, traj.states[k - 1]));
  return out;
}

}  // namespace varest
