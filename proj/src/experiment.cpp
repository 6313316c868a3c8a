/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include "varest/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "varest/models.hpp"

#ifndef VAREST_VERSION
#define VAREST_VERSION "unknown"
#endif

namespace varest {

using json = nlohmann::ordered_json;

namespace {

// Stream ids far above any member index.
constexpr std::uint64_t kBackgroundStream = 1ULL << 40;
constexpr std::uint64_t kObservationStream = (1ULL << 40) + 1;

Vec heat_truth(const Heat1dConfig& c) {
  Vec x(c.n);
  for (int j = 0; j < c.n; ++j) {
    const double s = c.node(j);
    x[j] = 2.0 + std::sin(std::numbers::pi * s) + 0.5 * std::cos(2.0 * std::numbers::pi * s);
  }
  return x;
}

Vec lorenz_truth(const Lorenz96& m, int spinup) {
  const Index n = m.dim();
  Vec x = Vec::Constant(n, m.config().forcing);
  x[n / 2] += 0.01;
  for (int k = 0; k < spinup; ++k) x = m.step(0, x);
  return x;
}

ObsOperatorPtr build_operator(const Config& cfg, Index n) {
  const std::string kind = cfg.get_string("obs.operator", "identity");
  if (kind == "identity") return std::make_shared<IdentityObs>(n);
  if (kind != "subset") throw ConfigError("obs.operator must be identity or subset");
  std::vector<Index> idx;
  if (cfg.has("obs.indices")) {
    for (int i : cfg.get_ints("obs.indices", {})) idx.push_back(i);
  } else {
    const int stride = cfg.get_int("obs.stride", 2);
    if (stride < 1) throw ConfigError("obs.stride must be positive");
    for (Index i = 0; i < n; i += stride) idx.push_back(i);
  }
  if (idx.empty()) throw ConfigError("obs: subset operator selects nothing");
  try {
    return std::make_shared<SubsetObs>(n, idx);
  } catch (const DimensionMismatch& e) {
    throw ConfigError(std::string("obs.indices: ") + e.what());
  }
}

QoiFunctional build_qoi(const Config& cfg, Index n) {
  const std::string kind = cfg.get_string("qoi.kind", "mean_state");
  try {
    if (kind == "mean_state") return QoiFunctional::mean_state(n);
    if (kind == "component") return QoiFunctional::component(n, cfg.get_int("qoi.index", 0));
    if (kind == "mean_of_block")
      return QoiFunctional::mean_of_block(n, cfg.get_int("qoi.begin", 0),
                                          cfg.get_int("qoi.end", static_cast<int>(n)));
  } catch (const DimensionMismatch& e) {
    throw ConfigError(std::string("qoi: ") + e.what());
  }
  throw ConfigError("qoi.kind must be mean_state, component or mean_of_block");
}

HessianKind parse_hessian(const std::string& s) {
  if (s == "full") return HessianKind::full;
  if (s == "gauss_newton") return HessianKind::gauss_newton;
  throw ConfigError("solver.hessian must be full or gauss_newton");
}

ImpactMethod parse_method(const std::string& s) {
  if (s == "cg") return ImpactMethod::cg;
  if (s == "quasi_newton") return ImpactMethod::quasi_newton;
  throw ConfigError("estimate.method must be cg or quasi_newton");
}

}  // namespace

ExperimentSetup build_experiment(const Config& cfg) {
  ExperimentSetup s;
  s.experiment = cfg.get_string("experiment", "estimate");
  static const std::vector<std::string> kinds = {"assimilate", "estimate", "ensemble_validate",
                                                 "convergence_study", "covariance_column"};
  if (std::find(kinds.begin(), kinds.end(), s.experiment) == kinds.end())
    throw ConfigError("unknown experiment '" + s.experiment + "'");
  s.seed = cfg.get_u64("seed", 0);
  s.output_dir = cfg.get_string("output.dir", "results");

  // Model and truth.
  s.model_kind = cfg.get_string("model.kind", "heat1d");
  Vec x_true;
  if (s.model_kind == "heat1d") {
    Heat1dConfig hc;
    hc.n = cfg.get_int("model.n", hc.n);
    hc.alpha = cfg.get_double("model.alpha", hc.alpha);
    hc.dt = cfg.get_double("model.dt", hc.dt);
    hc.num_steps = cfg.get_int("model.steps", hc.num_steps);
    hc.integrator = parse_heat_integrator(cfg.get_string("model.integrator", "crank_nicolson"));
    try {
      s.problem.model = heat1d_build(hc);
    } catch (const StabilityViolation& e) {
      throw ConfigError(e.what());
    } catch (const DimensionMismatch& e) {
      throw ConfigError(e.what());
    }
    x_true = heat_truth(hc);
  } else if (s.model_kind == "lorenz96") {
    Lorenz96Config lc;
    lc.n = cfg.get_int("model.n", lc.n);
    lc.forcing = cfg.get_double("model.forcing", lc.forcing);
    lc.dt = cfg.get_double("model.dt", lc.dt);
    lc.num_steps = cfg.get_int("model.steps", lc.num_steps);
    std::shared_ptr<const Lorenz96> m;
    try {
      m = lorenz96_build(lc);
    } catch (const DimensionMismatch& e) {
      throw ConfigError(e.what());
    }
    s.problem.model = m;
    x_true = lorenz_truth(*m, cfg.get_int("model.spinup", 200));
  } else {
    throw ConfigError("model.kind must be heat1d or lorenz96");
  }
  const Index n = s.problem.model->dim();
  const int N = s.problem.model->num_steps();
  if (N < 1) throw ConfigError("model.steps must be at least 1");
  s.truth = propagate(*s.problem.model, x_true);

  // Observations of the truth.
  const int every = cfg.get_int("obs.every", 10);
  const int start = cfg.get_int("obs.start", every);
  if (every < 1 || start < 0) throw ConfigError("obs.every must be positive and obs.start >= 0");
  const double rel = cfg.get_double("obs.noise_rel", 0.1);
  const double abs_sd = cfg.get_double("obs.noise_abs", 0.0);
  if (rel < 0.0 || abs_sd < 0.0) throw ConfigError("obs noise levels must be non-negative");
  ObsOperatorPtr op = build_operator(cfg, n);
  for (int k = start; k <= N; k += every) {
    Observation o;
    o.time = k;
    o.op = op;
    o.y = op->apply(s.truth.states[k]);
    Vec var = (rel * o.y.cwiseAbs()).cwiseMax(abs_sd).array().square();
    if ((var.array() <= 0.0).any())
      throw ConfigError("observation variance is zero somewhere; set obs.noise_abs > 0");
    o.R = CovMatrix::diagonal(var);
    s.problem.obs.add(std::move(o));
  }
  if (s.problem.obs.empty()) throw ConfigError("obs: schedule selects no times");

  // Background.
  const double sigma = cfg.get_double("background.sigma", 0.5);
  if (!(sigma > 0.0)) throw ConfigError("background.sigma must be positive");
  s.problem.background.B = CovMatrix::scaled_identity(n, sigma * sigma);
  const std::string rule = cfg.get_string("background.rule", "perturbed_truth");
  if (rule == "perturbed_truth") {
    GaussianStream g(derive_seed(s.seed, kBackgroundStream));
    s.problem.background.xb = x_true + s.problem.background.B.sqrt_apply(g.normal_vec(n));
  } else if (rule == "truth") {
    s.problem.background.xb = x_true;
  } else {
    throw ConfigError("background.rule must be perturbed_truth or truth");
  }

  if (cfg.get_bool("obs.noisy", false)) {
    // Own stream so observation noise never coincides with member draws.
    GaussianStream g(derive_seed(s.seed, kObservationStream));
    DataErrors dy;
    for (const auto& o : s.problem.obs.entries())
      dy[o.time] = o.R.sqrt_apply(g.normal_vec(o.y.size()));
    s.problem.obs = s.problem.obs.with_errors(dy);
  }
  s.problem.validate();

  s.qoi = build_qoi(cfg, n);

  // Perturbations.
  s.spec.seed = s.seed;
  s.data_errors = cfg.get_bool("perturbation.data_errors", true);
  s.spec.data_noise = s.data_errors;
  const double data_bias = cfg.get_double("perturbation.data_bias", 0.0);
  if (data_bias != 0.0)
    for (const auto& o : s.problem.obs.entries())
      s.spec.data_bias[o.time] = Vec::Constant(o.y.size(), data_bias);
  const double model_constant = cfg.get_double("perturbation.model_constant", 0.0);
  const double model_bias = cfg.get_double("perturbation.model_bias", 0.0);
  const double beta = model_bias + model_constant * s.problem.model->time_step();
  if (beta != 0.0)
    for (int k = 1; k <= N; ++k) s.spec.model_bias[k] = Vec::Constant(n, beta);
  CorrelationKernel kernel;
  kernel.kind = parse_kernel_kind(cfg.get_string("perturbation.kernel", "diagonal"));
  kernel.length_scale = cfg.get_double("perturbation.length_scale", 3.0);
  kernel.amplitude = cfg.get_double("perturbation.amplitude", 0.0);
  if (kernel.amplitude > 0.0) {
    KernelCovariance kc = kernel_covariance(kernel, n);
    s.spec.model_noise = kc.cov;
    s.kernel_clipped_fraction = kc.clipped_fraction;
  } else if (kernel.amplitude < 0.0) {
    throw ConfigError("perturbation.amplitude must be non-negative");
  }
  s.model_errors = s.spec.model_noise.has_value() || !s.spec.model_bias.empty();
  if (!s.data_errors && data_bias != 0.0) s.data_errors = true;

  // Solvers.
  s.grad_tol_rel = cfg.get_double("solver.grad_tol_rel", 1e-10);
  s.solver.max_iter = cfg.get_int("solver.max_iter", 2000);
  s.solver.memory = cfg.get_int("solver.memory", 20);
  s.solver.newton_polish = cfg.get_int("solver.newton_polish", 4);
  s.solver.hessian = parse_hessian(cfg.get_string("solver.hessian", "full"));
  if (!(s.grad_tol_rel > 0.0) || s.solver.max_iter < 1 || s.solver.memory < 1 ||
      s.solver.newton_polish < 0)
    throw ConfigError("solver settings out of range");
  s.resolve.rel_grad_tol = s.grad_tol_rel;
  s.resolve.max_iter = s.solver.max_iter;
  s.resolve.newton_polish = s.solver.newton_polish;
  s.impact.method = parse_method(cfg.get_string("estimate.method", "cg"));
  s.impact.tol = cfg.get_double("estimate.tol", 1e-10);
  s.impact.hessian = s.solver.hessian;

  s.members = cfg.get_int("ensemble.members", 15);
  s.threads = cfg.get_int("ensemble.threads", 0);
  if (s.members < 2) throw ConfigError("ensemble.members must be at least 2");
  s.scales = cfg.get_doubles("study.scales", default_study_scales());
  if (s.scales.size() < 2) throw ConfigError("study.scales needs at least two values");
  for (std::size_t i = 0; i < s.scales.size(); ++i)
    if (!(s.scales[i] > 0.0) || (i > 0 && !(s.scales[i] < s.scales[i - 1])))
      throw ConfigError("study.scales must be positive and decreasing");
  s.covariance_index = cfg.get_int("covariance.index", 0);
  s.covariance_full = cfg.get_bool("covariance.full", false);
  if (s.covariance_index < 0 || s.covariance_index >= n)
    throw ConfigError("covariance.index out of range");
  return s;
}

// -----------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string contributions_csv(const ErrorBudget& budget) {
  std::ostringstream os;
  os << "time_index,state_or_obs_index,kind,contribution\n";
  for (const auto& c : budget.contributions)
    os << c.time_index << ',' << c.component << ',' << to_string(c.kind) << ','
       << format_double(c.value) << '\n';
  return os.str();
}

std::vector<Contribution> parse_contributions_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "time_index,state_or_obs_index,kind,contribution")
    throw Error("contributions csv: unexpected header");
  std::vector<Contribution> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string t, i, kind, value;
    if (!std::getline(ls, t, ',') || !std::getline(ls, i, ',') || !std::getline(ls, kind, ',') ||
        !std::getline(ls, value))
      throw Error("contributions csv: malformed row '" + line + "'");
    Contribution c;
    c.time_index = std::stoi(t);
    c.component = std::stol(i);
    if (kind == "fwd")
      c.kind = Contribution::Kind::fwd;
    else if (kind == "adj")
      c.kind = Contribution::Kind::adj;
    else if (kind == "opt")
      c.kind = Contribution::Kind::opt;
    else
      throw Error("contributions csv: unknown kind '" + kind + "'");
    c.value = std::strtod(value.c_str(), nullptr);
    out.push_back(c);
  }
  return out;
}

namespace {

std::string sci(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%14.6e", v);
  return buf;
}

json budget_json(const ErrorBudget& b) {
  return {{"fwd", b.fwd}, {"adj", b.adj}, {"opt", b.opt}, {"total", b.total}};
}

AssimilationResult solve_ideal(const ExperimentSetup& s) {
  SolverOptions opts = s.solver;
  opts.grad_tol = s.grad_tol_rel * (1.0 + std::abs(cost(s.problem, s.problem.background.xb)));
  return assimilate(s.problem, s.problem.background.xb, opts);
}

double rmse(const Vec& a, const Vec& b) {
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

std::string perturbations_csv(const Perturbations& p) {
  std::ostringstream os;
  os << "kind,time_index,index,value\n";
  for (const auto& [k, dy] : p.data_errors)
    for (Index i = 0; i < dy.size(); ++i)
      os << "data," << k << ',' << i << ',' << format_double(dy[i]) << '\n';
  for (std::size_t k = 0; k < p.model_errors.size(); ++k)
    for (Index i = 0; i < p.model_errors[k].size(); ++i)
      os << "model," << k + 1 << ',' << i << ',' << format_double(p.model_errors[k][i]) << '\n';
  return os.str();
}

json base_summary(const ExperimentSetup& s, const AssimilationResult& ideal) {
  json j;
  j["experiment"] = s.experiment;
  j["model"] = s.model_kind;
  j["dim"] = s.problem.model->dim();
  j["steps"] = s.problem.model->num_steps();
  j["seed"] = s.seed;
  j["rng"] = kRngAlgorithm;
  j["qoi"] = s.qoi.name;
  j["analysis"] = {{"cost", ideal.cost},
                   {"grad_norm", ideal.grad_norm},
                   {"grad_tol", ideal.grad_tol},
                   {"iterations", ideal.iterations},
                   {"qoi", s.qoi.eval(ideal.analysis)}};
  if (s.kernel_clipped_fraction > 0.0) j["kernel_clipped_fraction"] = s.kernel_clipped_fraction;
  return j;
}

}  // namespace

RunOutput run_experiment(const ExperimentSetup& s) {
  RunOutput out;
  const AssimilationResult ideal = solve_ideal(s);
  json summary = base_summary(s, ideal);
  std::ostringstream table;
  const Index n = s.problem.model->dim();
  const int N = s.problem.model->num_steps();

  if (s.experiment == "assimilate") {
    const Vec& xt = s.truth.states[0];
    const Vec& xb = s.problem.background.xb;
    summary["rmse_background"] = rmse(xb, xt);
    summary["rmse_analysis"] = rmse(ideal.analysis, xt);
    std::ostringstream csv;
    csv << "index,truth,background,analysis\n";
    for (Index i = 0; i < n; ++i)
      csv << i << ',' << format_double(xt[i]) << ',' << format_double(xb[i]) << ','
          << format_double(ideal.analysis[i]) << '\n';
    out.files.emplace_back("analysis.csv", csv.str());
    table << "                 RMSE to truth\n"
          << "Background     " << sci(summary["rmse_background"].get<double>()) << "\n"
          << "Analysis       " << sci(summary["rmse_analysis"].get<double>()) << "\n"
          << "cost " << sci(ideal.cost) << "   |grad| " << sci(ideal.grad_norm) << "   iterations "
          << ideal.iterations << "\n";
  } else if (s.experiment == "covariance_column") {
    std::ostringstream csv;
    std::vector<Index> cols;
    if (s.covariance_full)
      for (Index l = 0; l < n; ++l) cols.push_back(l);
    else
      cols.push_back(s.covariance_index);
    csv << "column,row,value\n";
    double diag = 0.0;
    for (Index l : cols) {
      const Vec c = posterior_covariance_column(s.problem, ideal, l, s.impact);
      if (l == s.covariance_index) diag = c[l];
      for (Index i = 0; i < n; ++i) csv << l << ',' << i << ',' << format_double(c[i]) << '\n';
    }
    out.files.emplace_back("covariance.csv", csv.str());
    summary["covariance"] = {{"index", s.covariance_index},
                             {"columns", cols.size()},
                             {"diagonal_entry", diag}};
    table << "Posterior covariance: " << cols.size() << " column(s); entry (" << s.covariance_index
          << "," << s.covariance_index << ") = " << sci(diag) << "\n";
  } else {
    const ImpactFactors factors = compute_impact_factors(s.problem, ideal, s.qoi, s.impact);
    summary["impact"] = {{"method", s.impact.method == ImpactMethod::cg ? "cg" : "quasi_newton"},
                         {"cg_iterations", factors.cg_iterations},
                         {"hessian_solve_residual", factors.hessian_solve_residual}};

    // Realization 0 of the configured errors.
    Perturbations data, model, both;
    if (s.data_errors) data.data_errors = sample_data_errors(s.spec, s.problem.obs, 0);
    if (s.model_errors) model.model_errors = sample_model_errors(s.spec, n, N, 0);
    both.data_errors = data.data_errors;
    both.model_errors = model.model_errors;

    if (s.experiment == "estimate") {
      table << "                dE_actual       dE_est          ratio\n";
      json rows = json::array();
      auto row = [&](const std::string& label, const Perturbations& p) {
        const ErrorBudget b = estimate_error_budget(s.problem, ideal.trajectory, factors, p);
        const double actual = oracle_perturbed_resolve(s.problem, ideal, p, s.qoi, s.resolve);
        rows.push_back({{"errors", label},
                        {"actual", actual},
                        {"estimate", b.total},
                        {"budget", budget_json(b)}});
        char name[16];
        std::snprintf(name, sizeof name, "%-14s", label.c_str());
        table << name << sci(actual) << "  " << sci(b.total) << "  "
              << sci(actual != 0.0 ? b.total / actual : 0.0) << "\n";
        return b;
      };
      if (s.data_errors) row("data", data);
      if (s.model_errors) row("model", model);
      if (!s.data_errors && !s.model_errors) row("none", both);
      const ErrorBudget total =
          (s.data_errors && s.model_errors) ? row("total", both)
                                            : estimate_error_budget(s.problem, ideal.trajectory,
                                                                    factors, both);
      summary["rows"] = rows;
      summary["budget"] = budget_json(total);
      table << "budget: fwd " << sci(total.fwd) << "  adj " << sci(total.adj) << "  opt "
            << sci(total.opt) << "\n";
      out.files.emplace_back("contributions.csv", contributions_csv(total));
      out.files.emplace_back("perturbations.csv", perturbations_csv(both));
    } else if (s.experiment == "convergence_study") {
      const ConvergenceStudy st = convergence_order_study(s.problem, ideal, factors, s.qoi, both,
                                                          s.scales, s.resolve);
      std::ostringstream csv;
      csv << "scale,estimate,actual,difference\n";
      table << "scale           dE_actual       dE_est          |diff|\n";
      for (std::size_t i = 0; i < st.scales.size(); ++i) {
        csv << format_double(st.scales[i]) << ',' << format_double(st.estimates[i]) << ','
            << format_double(st.actuals[i]) << ',' << format_double(st.differences[i]) << '\n';
        table << sci(st.scales[i]) << "  " << sci(st.actuals[i]) << "  " << sci(st.estimates[i])
              << "  " << sci(st.differences[i]) << "\n";
      }
      out.files.emplace_back("convergence.csv", csv.str());
      summary["study"] = {{"noise_floor", st.noise_floor},
                          {"points_used", st.points_used},
                          {"degenerate", st.degenerate}};
      if (st.degenerate)
        summary["study"]["slope"] = nullptr;
      else
        summary["study"]["slope"] = st.slope;
      table << "slope "
            << (st.degenerate ? std::string("degenerate (differences at solver noise floor)")
                              : format_double(st.slope))
            << "\n";
    } else {  // ensemble_validate
      EnsembleOptions eo;
      eo.n_members = s.members;
      eo.threads = s.threads;
      eo.resolve = s.resolve;
      const EnsembleReport rep = ensemble_validate(s.problem, ideal, factors, s.spec, s.qoi, eo);
      std::ostringstream csv;
      csv << "member,actual,estimate\n";
      for (std::size_t i = 0; i < rep.members.size(); ++i)
        csv << rep.members[i] << ',' << format_double(rep.member_qoi_errors[i]) << ','
            << format_double(rep.member_estimates[i]) << '\n';
      out.files.emplace_back("members.csv", csv.str());
      json failures = json::array();
      for (const auto& f : rep.failures) failures.push_back({{"member", f.member}, {"error", f.message}});
      summary["ensemble"] = {{"members", rep.n_members},
                             {"failures", failures},
                             {"ensemble_mean", rep.ensemble_mean},
                             {"ensemble_var", rep.ensemble_var},
                             {"mean_standard_error", rep.mean_standard_error()},
                             {"var_standard_error", rep.var_standard_error()},
                             {"variational_mean", rep.variational_mean},
                             {"variational_var", rep.variational_var}};
      table << "                         E[dE]           var(dE)\n"
            << "Variational estimates " << sci(rep.variational_mean) << "  "
            << sci(rep.variational_var) << "\n"
            << "Ensemble estimates    " << sci(rep.ensemble_mean) << "  " << sci(rep.ensemble_var)
            << "\n"
            << "members " << rep.n_members << " (failed " << rep.failures.size() << ")\n";
    }
  }

  out.files.emplace_back("summary.json", summary.dump(2) + "\n");
  out.table = table.str();
  return out;
}

// -----------------------------------------------------------------------------

int run_command(const std::string& config_path, const std::vector<std::string>& overrides,
                const std::optional<std::string>& out_dir, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  Config cfg;
  ExperimentSetup setup;
  try {
    cfg = Config::load(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    setup = build_experiment(cfg);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }

  std::string dir = setup.output_dir;
  if (const char* env = std::getenv("VAREST_OUTPUT_DIR"); env && *env) dir = env;
  if (out_dir) dir = *out_dir;

  RunOutput result;
  try {
    result = run_experiment(setup);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  try {
    std::filesystem::create_directories(dir);
    for (const auto& [name, content] : result.files) {
      std::ofstream f(std::filesystem::path(dir) / name, std::ios::binary);
      f << content;
      if (!f) throw std::runtime_error("cannot write " + name);
    }
    json info;
    info["config"] = cfg.values();
    info["build"] = VAREST_VERSION;
    info["wall_time_seconds"] = wall;
    std::ofstream f(std::filesystem::path(dir) / "run_info.json", std::ios::binary);
    f << info.dump(2) << "\n";
    if (!f) throw std::runtime_error("cannot write run_info.json");
  } catch (const std::exception& e) {
    err << "output error: " << e.what() << "\n";
    return 1;
  }

  out << "experiment " << setup.experiment << " (" << setup.model_kind << ", seed " << setup.seed
      << ")\n"
      << result.table << "results written to " << dir << "\n";
  return 0;
}

}  // namespace varest
