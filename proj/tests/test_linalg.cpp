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
#include "varest/linalg.hpp"

namespace varest {
namespace {

using testing::random_spd;
using testing::random_vec;

TEST(CgSolve, IdentityTakesOneIteration) {
  Vec b(2);
  b << 3, -1;
  CgResult r = cg_solve(SymOp::identity(2), b);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_NEAR((r.x - b).norm(), 0.0, 1e-15);
}

TEST(CgSolve, Diagonal) {
  Mat d = Vec::Map(std::vector<double>{2, 4}.data(), 2).asDiagonal();
  Vec b(2);
  b << 2, 4;
  CgResult r = cg_solve(SymOp::from_matrix(d), b);
  EXPECT_NEAR(r.x[0], 1.0, 1e-14);
  EXPECT_NEAR(r.x[1], 1.0, 1e-14);
}

TEST(CgSolve, MatchesDenseLu) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Mat a = random_spd(rng, 8);
    Vec b = random_vec(rng, 8);
    Vec ref = a.partialPivLu().solve(b);
    CgOptions o;
    o.tol = 1e-12;
    EXPECT_LT(testing::rel_err(cg_solve(SymOp::from_matrix(a), b, o).x, ref), 1e-8);
    o.diagonal_preconditioner = a.diagonal();
    EXPECT_LT(testing::rel_err(cg_solve(SymOp::from_matrix(a), b, o).x, ref), 1e-8);
  }
}

TEST(CgSolve, ZeroRhsGivesZero) {
  std::mt19937_64 rng(1);
  CgResult r = cg_solve(SymOp::from_matrix(random_spd(rng, 5)), Vec::Zero(5));
  EXPECT_EQ(r.x.norm(), 0.0);
  EXPECT_EQ(r.iterations, 0);
}

// The A-norm of the error, not the residual, is what CG decreases.
TEST(CgSolve, EnergyErrorIsMonotone) {
  std::mt19937_64 rng(5);
  Mat a = random_spd(rng, 30);
  Vec b = random_vec(rng, 30);
  Vec ref = a.llt().solve(b);
  std::vector<double> errs;
  CgOptions o;
  o.tol = 1e-12;
  o.monitor = [&](int, const Vec& x, double) {
    const Vec e = x - ref;
    errs.push_back(std::sqrt(e.dot(a * e)));
  };
  cg_solve(SymOp::from_matrix(a), b, o);
  ASSERT_GT(errs.size(), 2u);
  for (std::size_t i = 1; i < errs.size(); ++i) EXPECT_LE(errs[i], errs[i - 1] * (1 + 1e-12));
}

TEST(CgSolve, IndefiniteThrowsNegativeCurvature) {
  Mat a = Mat::Identity(3, 3);
  a(1, 1) = -1.0;
  Vec b = Vec::Ones(3);
  EXPECT_THROW(cg_solve(SymOp::from_matrix(a), b), NegativeCurvature);
}

TEST(CgSolve, IterationCapThrows) {
  std::mt19937_64 rng(3);
  Mat a = random_spd(rng, 20);
  CgOptions o;
  o.max_iter = 2;
  o.tol = 1e-14;
  EXPECT_THROW(cg_solve(SymOp::from_matrix(a), random_vec(rng, 20), o), NonConvergence);
}

TEST(CgSolve, DimensionMismatch) {
  EXPECT_THROW(cg_solve(SymOp::identity(3), Vec::Ones(2)), DimensionMismatch);
}

// -----------------------------------------------------------------------------

TEST(Lbfgs, QuadraticBowl) {
  auto f = [](const Vec& x, Vec& g) {
    g = x;
    return 0.5 * x.squaredNorm();
  };
  LbfgsOptions o;
  o.grad_tol = 1e-10;
  LbfgsResult r = lbfgs_minimize(f, Vec::Constant(2, 5.0), o);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.grad.norm(), 1e-10);
  EXPECT_LE(r.x.norm(), 1e-10);
}

TEST(Lbfgs, Rosenbrock) {
  auto f = [](const Vec& x, Vec& g) {
    const double a = 1 - x[0], b = x[1] - x[0] * x[0];
    g.resize(2);
    g[0] = -2 * a - 400 * x[0] * b;
    g[1] = 200 * b;
    return a * a + 100 * b * b;
  };
  Vec x0(2);
  x0 << -1.2, 1.0;
  LbfgsOptions o;
  o.grad_tol = 1e-9;
  LbfgsResult r = lbfgs_minimize(f, x0, o);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 1.0, 1e-5);
  EXPECT_NEAR(r.x[1], 1.0, 1e-5);
  Vec g;
  f(r.x, g);
  EXPECT_LE(g.norm(), 1e-9);
}

TEST(Lbfgs, InverseHessianOfQuadratic) {
  auto f = [](const Vec& x, Vec& g) {
    g = Vec(2);
    g << x[0], 10 * x[1];
    return 0.5 * (x[0] * x[0] + 10 * x[1] * x[1]);
  };
  LbfgsOptions o;
  o.grad_tol = 1e-12;
  LbfgsResult r = lbfgs_minimize(f, Vec::Constant(2, 3.0), o);
  ASSERT_TRUE(r.converged);
  Vec v(2);
  v << 1, 10;
  Vec h = r.inverse_hessian.apply(v);
  EXPECT_NEAR(h[0], 1.0, 1e-6);
  EXPECT_NEAR(h[1], 1.0, 1e-6);
}

// Exact line searches on a quadratic terminate in at most d steps.
TEST(Lbfgs, FiniteTerminationOnQuadratic) {
  std::mt19937_64 rng(8);
  const Index d = 10;
  Mat a = random_spd(rng, d);
  Vec b = random_vec(rng, d);
  auto f = [&](const Vec& x, Vec& g) {
    g = a * x - b;
    return 0.5 * x.dot(a * x) - b.dot(x);
  };
  LbfgsOptions o;
  o.grad_tol = 1e-8 * b.norm();
  o.memory = 20;
  LbfgsResult r = lbfgs_minimize(f, Vec::Zero(d), o);
  ASSERT_TRUE(r.converged);
  EXPECT_LE(r.iterations, d + 2);
  EXPECT_LT(testing::rel_err(r.x, a.llt().solve(b)), 1e-7);
}

TEST(Lbfgs, IterationCapReportsUnconverged) {
  auto f = [](const Vec& x, Vec& g) {
    const double a = 1 - x[0], b = x[1] - x[0] * x[0];
    g.resize(2);
    g[0] = -2 * a - 400 * x[0] * b;
    g[1] = 200 * b;
    return a * a + 100 * b * b;
  };
  Vec x0(2);
  x0 << -1.2, 1.0;
  LbfgsOptions o;
  o.max_iter = 3;
  LbfgsResult r = lbfgs_minimize(f, x0, o);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 3);
}

TEST(Lbfgs, AscentOnlyObjectiveFailsLineSearch) {
  // The reported gradient points the wrong way, so no descent step exists.
  auto f = [](const Vec& x, Vec& g) {
    g = -x;
    return 0.5 * x.squaredNorm();
  };
  EXPECT_THROW(lbfgs_minimize(f, Vec::Ones(2)), LineSearchFailure);
}

// -----------------------------------------------------------------------------

TEST(FiniteDifference, QuadraticGradient) {
  Vec x(2);
  x << 1, 2;
  Vec g = fd_gradient([](const Vec& v) { return v.squaredNorm(); }, x, 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
}

TEST(FiniteDifference, ConstantHasZeroGradient) {
  Vec g = fd_gradient([](const Vec&) { return 3.5; }, Vec::Ones(4));
  EXPECT_EQ(g.norm(), 0.0);
}

TEST(FiniteDifference, JacVecOfLinearMap) {
  std::mt19937_64 rng(2);
  Mat a = testing::random_mat(rng, 4, 3);
  Vec x = random_vec(rng, 3), d = random_vec(rng, 3);
  Vec jv = fd_jacvec([&](const Vec& v) { return Vec(a * v); }, x, d);
  EXPECT_LT(testing::rel_err(jv, a * d), 1e-9);
}

TEST(FiniteDifference, DefaultStep) {
  Vec x(2);
  x << -3, 1;
  EXPECT_DOUBLE_EQ(default_fd_step(x), std::cbrt(std::numeric_limits<double>::epsilon()) * 4.0);
}

// -----------------------------------------------------------------------------

TEST(CovMatrix, DenseSqrtReproducesMatrix) {
  std::mt19937_64 rng(4);
  Mat c = random_spd(rng, 6);
  CovMatrix cov = CovMatrix::dense(c);
  Mat s(6, 6);
  for (Index j = 0; j < 6; ++j) s.col(j) = cov.sqrt_apply(Vec::Unit(6, j));
  EXPECT_LT((s * s.transpose() - c).norm(), 1e-10 * c.norm());
  Vec v = random_vec(rng, 6);
  EXPECT_LT(testing::rel_err(cov.apply(cov.solve(v)), v), 1e-12);
}

TEST(CovMatrix, RejectsIndefinite) {
  Mat c = Mat::Identity(3, 3);
  c(2, 2) = -0.5;
  EXPECT_THROW(CovMatrix::dense(c), NotPSD);
  EXPECT_THROW(CovMatrix::diagonal(Vec::Constant(2, -1.0)), NotPSD);
}

TEST(CovMatrix, SingularSolveThrows) {
  Vec v(2);
  v << 1.0, 0.0;
  CovMatrix c = CovMatrix::diagonal(v);
  EXPECT_FALSE(c.is_positive_definite());
  EXPECT_THROW(c.solve(Vec::Ones(2)), NotPSD);
}

TEST(SymOp, SymmetryDefectOfSymmetricMatrix) {
  std::mt19937_64 rng(9);
  SymOp a = SymOp::from_matrix(random_spd(rng, 7));
  EXPECT_LT(symmetry_defect(a, random_vec(rng, 7), random_vec(rng, 7)), 1e-14);
}

}  // namespace
}  // namespace varest
