/*
 * Copyright 2026 The varest Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 */

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "varest/estimator.hpp"
#include "varest/perturbation.hpp"
#include "varest/validation.hpp"

namespace varest {
namespace {

using testing::random_vec;

// N = 0, one identity observation of x0: Hess = B^-1 + R^-1, both diagonal.
FourDVarProblem static_problem(const Vec& bvar, const Vec& rvar, const Vec& y, const Vec& xb) {
  const Index n = xb.size();
  FourDVarProblem p;
  p.model = std::make_shared<LinearModel>(Mat::Identity(n, n), 0);
  Observation o;
  o.time = 0;
  o.op = std::make_shared<IdentityObs>(n);
  o.y = y;
  o.R = CovMatrix::diagonal(rvar);
  p.obs.add(std::move(o));
  p.background = {xb, CovMatrix::diagonal(bvar)};
  return p;
}

AssimilationResult solve(const FourDVarProblem& p) {
  return assimilate(p, p.background.xb, testing::tight_solver(p));
}

TEST(ImpactFactors, StaticClosedForm) {
  std::mt19937_64 rng(1);
  const Index n = 6;
  Vec bvar = random_vec(rng, n).cwiseAbs().array() + 0.5;
  Vec rvar = random_vec(rng, n).cwiseAbs().array() + 0.2;
  FourDVarProblem p = static_problem(bvar, rvar, random_vec(rng, n), random_vec(rng, n));
  AssimilationResult r = solve(p);
  ImpactFactors f = compute_impact_factors(p, r, QoiFunctional::mean_state(n));
  for (Index i = 0; i < n; ++i) {
    const double h = 1.0 / bvar[i] + 1.0 / rvar[i];
    EXPECT_NEAR(f.zeta[i], (1.0 / n) / h, 1e-13);
  }
  ASSERT_EQ(f.mu.size(), 1u);
  EXPECT_LT((f.mu[0] + f.zeta).norm(), 1e-15);
}

TEST(ImpactFactors, ZeroQoiGradientGivesZeroFactors) {
  FourDVarProblem p = testing::lorenz_problem(8, 4, 2, 2);
  AssimilationResult r = solve(p);
  QoiFunctional flat{"flat", [](const Vec&) { return 1.0; },
                     [](const Vec& x) { return Vec(Vec::Zero(x.size())); }};
  ImpactFactors f = compute_impact_factors(p, r, flat);
  EXPECT_EQ(f.zeta.norm(), 0.0);
  for (const auto& m : f.mu) EXPECT_EQ(m.norm(), 0.0);
  for (const auto& v : f.nu) EXPECT_EQ(v.norm(), 0.0);
}

TEST(ImpactFactors, ComponentQoiGradientIsBasisVector) {
  QoiFunctional q = QoiFunctional::component(5, 3);
  EXPECT_EQ(q.grad(Vec::Zero(5)), Vec::Unit(5, 3));
  Vec x(5);
  x << 1, 2, 3, 4, 5;
  EXPECT_EQ(q.eval(x), 4.0);
  EXPECT_DOUBLE_EQ(QoiFunctional::mean_of_block(5, 1, 3).eval(x), 2.5);
  EXPECT_THROW(QoiFunctional::component(5, 5), DimensionMismatch);
  EXPECT_THROW(QoiFunctional::mean_of_block(5, 3, 3), DimensionMismatch);
}

TEST(ImpactFactors, HessianEquationResidual) {
  for (std::uint64_t seed : {3, 4}) {
    FourDVarProblem p = seed == 3 ? testing::heat_problem(50, 100, 10, seed)
                                  : testing::lorenz_problem(40, 20, 2, seed);
    AssimilationResult r = solve(p);
    QoiFunctional q = QoiFunctional::mean_state(p.model->dim());
    ImpactFactors f = compute_impact_factors(p, r, q);
    const Vec e = q.grad(r.analysis);
    const Vec hz = hess_vec(p, r.trajectory, f.zeta);
    EXPECT_LE((hz - e).norm(), 1e-8 * e.norm());
    EXPECT_LE(f.hessian_solve_residual, 1e-8);
  }
}

TEST(ImpactFactors, DenseSolveOnLinearModel) {
  std::mt19937_64 rng(5);
  const Index n = 16;
  Mat A = testing::stable_propagator(rng, n);
  Vec xt = random_vec(rng, n);
  FourDVarProblem p =
      testing::linear_problem(A, 4, xt + random_vec(rng, n, 0.3), 0.4, 0.1, {2, 4}, xt);
  AssimilationResult r = solve(p);
  QoiFunctional q = QoiFunctional::mean_state(n);
  ImpactFactors f = compute_impact_factors(p, r, q);
  Mat h = reduced_hessian(p, r.trajectory).assemble();
  Vec ref = h.partialPivLu().solve(q.grad(r.analysis));
  EXPECT_LT(testing::rel_err(f.zeta, ref), 1e-7);
}

TEST(ImpactFactors, QuasiNewtonIsRough) {
  FourDVarProblem p = testing::heat_problem(30, 50, 10, 6);
  AssimilationResult r = solve(p);
  QoiFunctional q = QoiFunctional::mean_state(30);
  ImpactOptions o;
  o.method = ImpactMethod::quasi_newton;
  ImpactFactors qn = compute_impact_factors(p, r, q, o);
  ImpactFactors cg = compute_impact_factors(p, r, q);
  EXPECT_EQ(qn.method, ImpactMethod::quasi_newton);
  EXPECT_TRUE(all_finite(qn.zeta));
  EXPECT_GT(qn.hessian_solve_residual, cg.hessian_solve_residual);
}

TEST(ImpactFactors, RefusesNonOptimalPoint) {
  FourDVarProblem p = testing::lorenz_problem(8, 4, 2, 7);
  AssimilationResult r = solve(p);
  r.trajectory = gradient(p, r.analysis + Vec::Constant(8, 0.5)).trajectory;
  EXPECT_THROW(compute_impact_factors(p, r, QoiFunctional::mean_state(8)), NotAtOptimum);
}

// -----------------------------------------------------------------------------

struct Fixture {
  FourDVarProblem p;
  AssimilationResult r;
  ImpactFactors f;
};

Fixture heat_fixture(std::uint64_t seed, int n = 50, int N = 100) {
  Fixture fx;
  fx.p = testing::heat_problem(n, N, 10, seed);
  fx.r = solve(fx.p);
  fx.f = compute_impact_factors(fx.p, fx.r, QoiFunctional::mean_state(n));
  return fx;
}

Perturbations random_perturbations(std::mt19937_64& rng, const FourDVarProblem& p) {
  Perturbations out;
  for (const auto& o : p.obs.entries()) out.data_errors[o.time] = random_vec(rng, o.y.size(), 0.1);
  for (int k = 1; k <= p.model->num_steps(); ++k)
    out.model_errors.push_back(random_vec(rng, p.model->dim(), 0.01));
  return out;
}

TEST(ErrorBudget, ZeroPerturbationIsZero) {
  Fixture fx = heat_fixture(8, 20, 20);
  ErrorBudget b = estimate_error_budget(fx.p, fx.r.trajectory, fx.f, Perturbations{});
  EXPECT_EQ(b.fwd, 0.0);
  EXPECT_EQ(b.adj, 0.0);
  EXPECT_EQ(b.opt, 0.0);
  EXPECT_EQ(b.total, 0.0);
}

TEST(ErrorBudget, LinearInPerturbation) {
  Fixture fx = heat_fixture(9, 20, 30);
  std::mt19937_64 rng(9);
  Perturbations a = random_perturbations(rng, fx.p), b = random_perturbations(rng, fx.p);
  Perturbations c = scaled(a, 2.0);
  for (std::size_t k = 0; k < c.model_errors.size(); ++k) c.model_errors[k] -= 3.0 * b.model_errors[k];
  for (auto& [t, v] : c.data_errors) v -= 3.0 * b.data_errors.at(t);
  auto tot = [&](const Perturbations& x) {
    return estimate_error_budget(fx.p, fx.r.trajectory, fx.f, x).total;
  };
  EXPECT_NEAR(tot(c), 2.0 * tot(a) - 3.0 * tot(b), 1e-12 * (std::abs(tot(a)) + std::abs(tot(b))));
}

TEST(ErrorBudget, ContributionsSumToTerms) {
  Fixture fx = heat_fixture(10, 20, 30);
  std::mt19937_64 rng(10);
  ErrorBudget b =
      estimate_error_budget(fx.p, fx.r.trajectory, fx.f, random_perturbations(rng, fx.p));
  double sf = 0, sa = 0, so = 0, pt = 0, pc = 0;
  for (const auto& c : b.contributions) {
    if (c.kind == Contribution::Kind::fwd) sf += c.value;
    if (c.kind == Contribution::Kind::adj) sa += c.value;
    if (c.kind == Contribution::Kind::opt) so += c.value;
  }
  for (const auto& [k, v] : b.per_time_fwd) pt += v;
  for (const auto& [k, v] : b.per_component_adj) pc += v;
  EXPECT_NEAR(sf, b.fwd, 1e-12 * (1 + std::abs(b.fwd)));
  EXPECT_NEAR(sa, b.adj, 1e-12 * (1 + std::abs(b.adj)));
  EXPECT_NEAR(so, b.opt, 1e-15);
  EXPECT_NEAR(pt, b.fwd, 1e-12 * (1 + std::abs(b.fwd)));
  EXPECT_NEAR(pc, b.adj, 1e-12 * (1 + std::abs(b.adj)));
  EXPECT_DOUBLE_EQ(b.total, b.fwd + b.adj + b.opt);
}

// Data errors at a single time and component: the adjoint term is the
// sensitivity of E to y, i.e. -(R^-1 H mu)_i.
TEST(ErrorBudget, DataTermIsObservationSensitivity) {
  Fixture fx = heat_fixture(11, 12, 20);
  const int k = fx.p.obs.times().front();
  Perturbations d;
  d.data_errors[k] = Vec::Zero(12);
  d.data_errors[k][4] = 0.05;
  for (int t : fx.p.obs.times())
    if (!d.data_errors.count(t)) d.data_errors[t] = Vec::Zero(12);
  const double est = estimate_error_budget(fx.p, fx.r.trajectory, fx.f, d).total;
  const double act = oracle_perturbed_resolve(fx.p, fx.r, d, QoiFunctional::mean_state(12));
  EXPECT_NEAR(est, act, 1e-8 * std::abs(act));
}

// Nonlinear dynamics: the estimate is first order, so the error is O(eps^2).
TEST(ErrorBudget, SecondOrderAgreementOnLorenz) {
  FourDVarProblem p = testing::lorenz_problem(10, 10, 2, 12);
  AssimilationResult r = solve(p);
  QoiFunctional q = QoiFunctional::mean_state(10);
  ImpactFactors f = compute_impact_factors(p, r, q);
  std::mt19937_64 rng(12);
  Perturbations base = random_perturbations(rng, p);
  std::vector<double> diffs;
  for (double s : {1.0, 0.1}) {
    Perturbations ps = scaled(base, s);
    diffs.push_back(std::abs(estimate_error_budget(p, r.trajectory, f, ps).total -
                             oracle_perturbed_resolve(p, r, ps, q)));
  }
  const double slope = std::log10(diffs[0] / diffs[1]);
  EXPECT_GT(slope, 1.7);
  EXPECT_LT(slope, 2.3);
}

// -----------------------------------------------------------------------------

TEST(ErrorStatistics, UnbiasedMeanIsZero) {
  Fixture fx = heat_fixture(13, 20, 30);
  ErrorStatistics st;
  st.model_noise = CovMatrix::scaled_identity(20, 1e-4);
  EXPECT_EQ(estimate_error_statistics(fx.p, fx.r.trajectory, fx.f, st).mean, 0.0);
}

TEST(ErrorStatistics, BiasedMeanEqualsBudgetOfBias) {
  Fixture fx = heat_fixture(14, 20, 30);
  std::mt19937_64 rng(14);
  ErrorStatistics st;
  Perturbations bias;
  for (int k = 1; k <= 30; ++k) {
    st.model_bias[k] = random_vec(rng, 20, 0.01);
    bias.model_errors.push_back(st.model_bias[k]);
  }
  for (int t : fx.p.obs.times()) bias.data_errors[t] = st.data_bias[t] = random_vec(rng, 20, 0.1);
  const double m = estimate_error_statistics(fx.p, fx.r.trajectory, fx.f, st).mean;
  const double b = estimate_error_budget(fx.p, fx.r.trajectory, fx.f, bias).total;
  EXPECT_NEAR(m, b, 1e-12 * std::abs(b));
}

// Variance of the linear budget g^T z with z ~ N(0, C) is g^T C g. The
// gradient g is read off the budget itself, one unit error at a time.
TEST(ErrorStatistics, CrossCovarianceMatchesLinearForm) {
  std::mt19937_64 rng(15);
  const Index n = 3;
  const int N = 2;
  Vec xt = random_vec(rng, n);
  FourDVarProblem p = testing::linear_problem(testing::stable_propagator(rng, n), N,
                                              xt + random_vec(rng, n, 0.3), 0.5, 0.2, {1, 2}, xt);
  AssimilationResult r = solve(p);
  ImpactFactors f = compute_impact_factors(p, r, QoiFunctional::mean_state(n));

  Vec g(n * N);
  for (Index j = 0; j < n * N; ++j) {
    Perturbations u;
    u.model_errors.assign(N, Vec::Zero(n));
    u.model_errors[j / n][j % n] = 1.0;
    g[j] = estimate_error_budget(p, r.trajectory, f, u).total;
  }
  Mat C = testing::random_spd(rng, n * N) * 0.01;
  ErrorStatistics st;
  st.data_noise = false;
  st.model_noise_per_step.emplace(1, CovMatrix::dense(C.block(0, 0, n, n)));
  st.model_noise_per_step.emplace(2, CovMatrix::dense(C.block(n, n, n, n)));
  st.model_cross_cov[{1, 2}] = C.block(0, n, n, n);
  const double v = estimate_error_statistics(p, r.trajectory, f, st).variance;
  EXPECT_NEAR(v, g.dot(C * g), 1e-12 * g.dot(C * g));
}

TEST(ErrorStatistics, VarianceMatchesMonteCarlo) {
  Fixture fx = heat_fixture(16);
  PerturbationSpec spec;
  spec.seed = 16;
  CorrelationKernel k{CorrelationKernel::Kind::exponential, 3.0, 1e-4};
  spec.model_noise = kernel_covariance(k, 50).cov;
  const EstimatedMoments m =
      estimate_error_statistics(fx.p, fx.r.trajectory, fx.f, spec.statistics());
  std::vector<double> draws;
  for (int i = 0; i < 2000; ++i) {
    Perturbations d;
    d.data_errors = sample_data_errors(spec, fx.p.obs, 2 * i);
    d.model_errors = sample_model_errors(spec, 50, 100, 2 * i + 1);
    draws.push_back(estimate_error_budget(fx.p, fx.r.trajectory, fx.f, d).total);
  }
  const auto [mean, var] = sample_mean_var(draws);
  const double se = var * std::sqrt(2.0 / (draws.size() - 1));
  EXPECT_LT(std::abs(m.variance - var), 3.0 * se);
  EXPECT_NEAR(m.variance, m.model_variance + m.data_variance, 1e-15 * m.variance);
  EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(var / draws.size()));
}

// -----------------------------------------------------------------------------

TEST(PosteriorCovariance, StaticClosedForm) {
  std::mt19937_64 rng(17);
  Vec bvar = random_vec(rng, 4).cwiseAbs().array() + 0.5;
  Vec rvar = random_vec(rng, 4).cwiseAbs().array() + 0.5;
  FourDVarProblem p = static_problem(bvar, rvar, random_vec(rng, 4), random_vec(rng, 4));
  AssimilationResult r = solve(p);
  for (Index l = 0; l < 4; ++l) {
    Vec c = posterior_covariance_column(p, r, l);
    Vec ref = Vec::Unit(4, l) / (1.0 / bvar[l] + 1.0 / rvar[l]);
    EXPECT_LT((c - ref).norm(), 1e-13);
  }
}

TEST(PosteriorCovariance, IdentityHessian) {
  // B = I and an observation with huge variance leaves Hess = I to 1e-16.
  FourDVarProblem p = static_problem(Vec::Ones(3), Vec::Constant(3, 1e20), Vec::Zero(3),
                                     Vec::Zero(3));
  AssimilationResult r = solve(p);
  EXPECT_LT((posterior_covariance_column(p, r, 1) - Vec::Unit(3, 1)).norm(), 1e-12);
}

TEST(PosteriorCovariance, SymmetricPsdAndInverseHessian) {
  Fixture fx = heat_fixture(18, 16, 50);
  Mat c(16, 16);
  for (Index l = 0; l < 16; ++l) c.col(l) = posterior_covariance_column(fx.p, fx.r, l);
  EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (c + c.transpose())).eigenvalues().minCoeff(),
            -1e-10);
  Mat h = reduced_hessian(fx.p, fx.r.trajectory).assemble();
  EXPECT_LT((h * c - Mat::Identity(16, 16)).norm(), 1e-7);
}

}  // namespace
}  // namespace varest
