/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/perturbation.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace varest {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double GaussianStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double GaussianStream::normal() {
  if (spare_) {
    const double z = *spare_;
    spare_.reset();
    return z;
  }
  double u1 = uniform();
  while (u1 == 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  return r * std::cos(a);
}

Vec GaussianStream::normal_vec(Index n) {
  Vec z(n);
  for (Index i = 0; i < n; ++i) z[i] = normal();
  return z;
}

// -----------------------------------------------------------------------------

CorrelationKernel::Kind parse_kernel_kind(const std::string& name) {
  if (name == "bessel_j0_scaled") return CorrelationKernel::Kind::bessel_j0_scaled;
  if (name == "exponential") return CorrelationKernel::Kind::exponential;
  if (name == "diagonal") return CorrelationKernel::Kind::diagonal;
  throw ConfigError("unknown correlation kernel '" + name + "'");
}

std::string to_string(CorrelationKernel::Kind kind) {
  switch (kind) {
    case CorrelationKernel::Kind::bessel_j0_scaled: return "bessel_j0_scaled";
    case CorrelationKernel::Kind::exponential: return "exponential";
    case CorrelationKernel::Kind::diagonal: return "diagonal";
  }
  return "?";
}

KernelCovariance kernel_covariance(const CorrelationKernel& kernel, Index n, double max_clip) {
  if (n <= 0) throw DimensionMismatch("kernel_covariance: empty grid");
  if (!(kernel.amplitude >= 0.0)) throw ConfigError("kernel_covariance: negative amplitude");
  if (kernel.kind != CorrelationKernel::Kind::diagonal && !(kernel.length_scale > 0.0))
    throw ConfigError("kernel_covariance: length_scale must be positive");

  if (kernel.kind == CorrelationKernel::Kind::diagonal || kernel.amplitude == 0.0)
    return {CovMatrix::scaled_identity(n, kernel.amplitude), 0.0};

  Mat c(n, n);
  const double circ = static_cast<double>(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const double d = static_cast<double>(std::abs(i - j));
      const double r = circ / std::numbers::pi * std::sin(std::numbers::pi * d / circ);
      const double s = r / kernel.length_scale;
      const double rho = kernel.kind == CorrelationKernel::Kind::exponential
                             ? std::exp(-s)
                             : std::cyl_bessel_j(0.0, s);
      c(i, j) = kernel.amplitude * rho;
    }
  }
  c = 0.5 * (c + c.transpose());

  Eigen::SelfAdjointEigenSolver<Mat> eig(c);
  Vec lam = eig.eigenvalues();
  double removed = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (lam[i] < 0.0) {
      removed -= lam[i];
      lam[i] = 0.0;
    }
  }
  const double fraction = removed / c.trace();
  if (fraction > max_clip) {
    std::ostringstream os;
    os << "kernel_covariance: clipping would remove " << fraction << " of the trace (limit "
       << max_clip << ")";
    throw NotPSD(os.str());
  }
  if (removed > 0.0) {
    c = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
    c = 0.5 * (c + c.transpose());
  }
  return {CovMatrix::dense(std::move(c)), fraction};
}

// -----------------------------------------------------------------------------

ErrorStatistics PerturbationSpec::statistics() const {
  ErrorStatistics s;
  s.model_bias = model_bias;
  s.model_noise = model_noise;
  s.data_bias = data_bias;
  s.data_noise = data_noise;
  return s;
}

namespace {

// Streams 2m and 2m+1 of a seed feed data and model errors of member m.
GaussianStream data_stream(const PerturbationSpec& spec, std::uint64_t stream) {
  return GaussianStream(derive_seed(spec.seed, 2 * stream));
}

GaussianStream model_stream(const PerturbationSpec& spec, std::uint64_t stream) {
  return GaussianStream(derive_seed(spec.seed, 2 * stream + 1));
}

}  // namespace

DataErrors sample_data_errors(const PerturbationSpec& spec, const ObservationSet& obs,
                              std::uint64_t stream) {
  for (const auto& [k, rho] : spec.data_bias) {
    const Observation* o = obs.find(k);
    if (!o) throw DimensionMismatch("sample_data_errors: bias at an unobserved time");
    if (rho.size() != o->y.size()) throw DimensionMismatch("sample_data_errors: bias dimension");
  }
  GaussianStream g = data_stream(spec, stream);
  DataErrors out;
  for (const auto& o : obs.entries()) {
    Vec dy = Vec::Zero(o.y.size());
    if (auto it = spec.data_bias.find(o.time); it != spec.data_bias.end()) dy += it->second;
    if (spec.data_noise) dy += o.R.sqrt_apply(g.normal_vec(o.y.size()));
    if (spec.data_noise || spec.data_bias.count(o.time)) out.emplace(o.time, std::move(dy));
  }
  return out;
}

std::vector<Vec> sample_model_errors(const PerturbationSpec& spec, Index n, int num_steps,
                                     std::uint64_t stream) {
  if (spec.model_noise && spec.model_noise->dim() != n)
    throw DimensionMismatch("sample_model_errors: Q dimension");
  for (const auto& [k, beta] : spec.model_bias) {
    if (k < 1 || k > num_steps) throw DimensionMismatch("sample_model_errors: bias step");
    if (beta.size() != n) throw DimensionMismatch("sample_model_errors: bias dimension");
  }
  GaussianStream g = model_stream(spec, stream);
  std::vector<Vec> out;
  out.reserve(num_steps);
  for (int k = 1; k <= num_steps; ++k) {
    Vec dx = Vec::Zero(n);
    if (auto it = spec.model_bias.find(k); it != spec.model_bias.end()) dx += it->second;
    if (spec.model_noise) dx += spec.model_noise->sqrt_apply(g.normal_vec(n));
    out.push_back(std::move(dx));
  }
  return out;
}

std::vector<Vec> constant_model_error(double value, double dt, Index n, int num_steps) {
  return std::vector<Vec>(num_steps, Vec::Constant(n, value * dt));
}

}  // namespace varest
