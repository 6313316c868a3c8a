/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "varest/config.hpp"
#include "varest/estimator.hpp"
#include "varest/fourdvar.hpp"
#include "varest/perturbation.hpp"
#include "varest/validation.hpp"

namespace varest {

/// Everything an experiment needs, built from a Config.
struct ExperimentSetup {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string model_kind;

  FourDVarProblem problem;  ///< the ideal problem
  Trajectory truth;
  QoiFunctional qoi;

  PerturbationSpec spec;
  bool data_errors = true;
  bool model_errors = false;
  double kernel_clipped_fraction = 0.0;

  SolverOptions solver;
  double grad_tol_rel = 1e-10;
  ResolveOptions resolve;
  ImpactOptions impact;

  int members = 15;
  int threads = 0;
  std::vector<double> scales;
  int covariance_index = 0;
  bool covariance_full = false;

  std::string output_dir = "results";
};

/// Throws ConfigError (and the model's own errors) on inconsistent input.
ExperimentSetup build_experiment(const Config& cfg);

struct RunOutput {
  /// Numeric payload files: name -> content. Reproducible byte for byte.
  std::vector<std::pair<std::string, std::string>> files;
  std::string table;  ///< human-readable summary
};

RunOutput run_experiment(const ExperimentSetup& setup);

/// Shortest text of v with 17 significant digits.
std::string format_double(double v);

/// CSV with header time_index,state_or_obs_index,kind,contribution.
std::string contributions_csv(const ErrorBudget& budget);
std::vector<Contribution> parse_contributions_csv(const std::string& text);

/// `run` entry point: returns 0 on success, 2 on configuration errors,
/// 3 on numerical failures and 1 when results cannot be written. Output files
/// are only created after the experiment has succeeded. The output directory
/// comes from `out_dir`, else VAREST_OUTPUT_DIR, else output.dir.
int run_command(const std::string& config_path, const std::vector<std::string>& overrides,
                const std::optional<std::string>& out_dir, std::ostream& out, std::ostream& err);

}  // namespace varest
