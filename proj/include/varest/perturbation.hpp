/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "varest/estimator.hpp"
#include "varest/fourdvar.hpp"
#include "varest/linalg.hpp"

namespace varest {

/// Name recorded in run metadata so realizations can be reproduced elsewhere.
inline constexpr const char* kRngAlgorithm = "mt19937_64+splitmix64-seeding+box-muller";

/// splitmix64 finalizer of (seed, stream): independent seeds per member.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Standard normal stream with a fully specified algorithm.
///
/// std::normal_distribution is implementation defined, so the transform is
/// done here: uniforms are the top 53 bits of mt19937_64 and normals come
/// from the Box-Muller pair.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : engine_(seed) {}

  double uniform();  ///< in [0, 1)
  double normal();
  Vec normal_vec(Index n);

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

// -----------------------------------------------------------------------------

struct CorrelationKernel {
  enum class Kind { bessel_j0_scaled, exponential, diagonal };
  Kind kind = Kind::diagonal;
  double length_scale = 1.0;  ///< in grid-index units
  double amplitude = 0.0;     ///< variance at zero separation
};

CorrelationKernel::Kind parse_kernel_kind(const std::string& name);
std::string to_string(CorrelationKernel::Kind kind);

struct KernelCovariance {
  CovMatrix cov;
  /// Sum of the negative eigenvalues removed, relative to the trace.
  double clipped_fraction = 0.0;
};

/// Covariance on a periodic grid of n points. Separations are chord lengths
/// of a ring with circumference n, so both kernels are restrictions of
/// planar isotropic kernels. Negative eigenvalues are clipped to zero; a
/// clip larger than `max_clip` of the trace throws NotPSD.
KernelCovariance kernel_covariance(const CorrelationKernel& kernel, Index n,
                                   double max_clip = 1e-10);

// -----------------------------------------------------------------------------

/// Deterministic and stochastic description of model and data errors.
struct PerturbationSpec {
  DataErrors data_bias;             ///< rho_k
  bool data_noise = true;           ///< draw N(0, R_k) at every observed time
  std::map<int, Vec> model_bias;    ///< beta_k, k = 1..N
  std::optional<CovMatrix> model_noise;  ///< Q_kk, shared by all steps
  std::uint64_t seed = 0;

  /// The matching statistical description for the variational estimator.
  ErrorStatistics statistics() const;
};

/// dy_k = rho_k + R_k^{1/2} z for every observed time, in time order.
DataErrors sample_data_errors(const PerturbationSpec& spec, const ObservationSet& obs,
                              std::uint64_t stream = 0);

/// dx_k = beta_k + Q^{1/2} z, k = 1..N.
std::vector<Vec> sample_model_errors(const PerturbationSpec& spec, Index n, int num_steps,
                                     std::uint64_t stream = 0);

/// Every dx_k = value * dt * 1.
std::vector<Vec> constant_model_error(double value, double dt, Index n, int num_steps);

}  // namespace varest
