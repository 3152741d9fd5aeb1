#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stochobs/moment_lift.hpp"
#include "stochobs/riccati.hpp"

using namespace stochobs;

namespace {

const double kGolden = (1 + std::sqrt(5.0)) / 2;

RiccatiSolution solved(const SareResult& r) {
  EXPECT_TRUE(std::holds_alternative<RiccatiSolution>(r));
  if (const auto* sol = std::get_if<RiccatiSolution>(&r)) return *sol;
  return {};
}

// Stabilizable by construction: square invertible B (u = -k B^-1 x shifts A
// arbitrarily far left) with moderate state noise and no control noise, or
// noise-free systems with random (generically controllable) B.
StochasticSystem stabilizable(std::mt19937_64& rng, int trial) {
  const int n = 1 + trial % 3;
  if (trial % 2 == 0) {
    auto s = oracle::random_system(rng, n, n, 1 + trial % 2, 1.0, 0.5);
    s.B += 2.0 * Eigen::MatrixXd::Identity(n, n);
    for (auto& D : s.D) D.setZero();
    return s;
  }
  auto s = oracle::random_system(rng, n, 1, 1, 1.0, 0.0);
  return s;
}

}  // namespace

TEST(SolveSare, GoldenRatioScalar) {
  const auto sol = solved(solve_sare(oracle::s2()));
  EXPECT_NEAR(sol.P(0, 0), kGolden, 1e-10);
  EXPECT_NEAR(sol.F(0, 0), -kGolden, 1e-10);
  EXPECT_LT(sol.residual, 1e-10);
  EXPECT_NEAR(sol.closed_loop_abscissa, -std::sqrt(5.0), 1e-9);
}

TEST(SolveSare, IntegratorScalar) {
  const auto sol = solved(solve_sare(oracle::s1()));
  EXPECT_NEAR(sol.P(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(sol.F(0, 0), -1.0, 1e-12);
}

TEST(SolveSare, UncontrolledUnstableIsNotSolvable) {
  const auto r = solve_sare(oracle::s3());
  ASSERT_TRUE(std::holds_alternative<NotSolvable>(r));
  EXPECT_FALSE(std::get<NotSolvable>(r).reason.empty());
}

TEST(SolveSare, ScalarOracle) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> U(-1.5, 1.5);
  int compared = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const double a = U(rng), b = U(rng), c = U(rng), e = 0.5 * U(rng);
    const auto ref = oracle::scalar_riccati(a, b, c, e);
    const auto r = solve_sare(oracle::scalar(a, b, c, e));
    if (!ref) continue;
    ASSERT_TRUE(std::holds_alternative<RiccatiSolution>(r))
        << a << " " << b << " " << c << " " << e;
    EXPECT_NEAR(std::get<RiccatiSolution>(r).P(0, 0), *ref, 1e-9 * (1 + *ref));
    ++compared;
  }
  EXPECT_GE(compared, 30);
}

TEST(SolveSare, RandomStabilizableInvariants) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const auto sys = stabilizable(rng, trial);
    const auto sol = solved(solve_sare(sys));
    EXPECT_LT(riccati_residual(sys, sol.P), 1e-10) << "trial " << trial;
    EXPECT_LT((sol.P - sol.P.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sol.P);
    EXPECT_GT(es.eigenvalues()(0), 0.0);
    EXPECT_LT((sol.F - feedback_gain(sol.P, sys)).norm(), 1e-12);
    EXPECT_LT(spectral_abscissa(build_generator(sys, sol.F)), 0.0);
  }
}

TEST(SolveSare, ValueEqualsClosedLoopCost) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 8; ++trial) {
    const auto sys = stabilizable(rng, trial);
    const auto sol = solved(solve_sare(sys));
    const Eigen::VectorXd x0 = oracle::random_matrix(rng, sys.n, 1);
    const double cost = oracle::closed_loop_cost(sys, sol.F, x0);
    EXPECT_NEAR(cost, lq_value(sol.P, x0), 1e-8 * (1 + cost));
  }
}

TEST(SolveSare, PerturbedGainsCostMore) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 6; ++trial) {
    const auto sys = stabilizable(rng, trial);
    const auto sol = solved(solve_sare(sys));
    const Eigen::VectorXd x0 = Eigen::VectorXd::Ones(sys.n);
    const double best = lq_value(sol.P, x0);
    for (int k = 0; k < 10; ++k) {
      Eigen::MatrixXd dF = oracle::random_matrix(rng, sys.m, sys.n);
      dF *= 0.1 / dF.norm();
      const Eigen::MatrixXd F = sol.F + dF;
      if (spectral_abscissa(build_generator(sys, F)) >= 0) continue;
      EXPECT_GE(oracle::closed_loop_cost(sys, F, x0), best - 1e-9);
    }
  }
}

TEST(SolveSare, AgreesWithHautusWithoutNoise) {
  for (const auto& sys : {oracle::s1(), oracle::s3(), oracle::martingale(2)}) {
    const bool solvable = std::holds_alternative<RiccatiSolution>(solve_sare(sys));
    EXPECT_EQ(solvable, hautus_stabilizability(sys.A, sys.B));
  }
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 10; ++trial) {
    auto sys = oracle::random_system(rng, 3, 1, 1, 1.0, 0.0);
    if (trial % 2) {
      sys.A.row(0).setZero();
      sys.A.col(0).setZero();
      sys.A(0, 0) = 0.3;
      sys.B(0, 0) = 0.0;
    }
    const bool solvable = std::holds_alternative<RiccatiSolution>(solve_sare(sys));
    EXPECT_EQ(solvable, hautus_stabilizability(sys.A, sys.B)) << "trial " << trial;
  }
}

TEST(SolveSare, Reproducible) {
  std::mt19937_64 rng(26);
  const auto sys = oracle::random_system(rng, 3, 1, 2, 1.0, 0.3);
  const auto a = solve_sare(sys);
  const auto b = solve_sare(sys);
  ASSERT_EQ(a.index(), b.index());
  if (const auto* sa = std::get_if<RiccatiSolution>(&a)) {
    EXPECT_TRUE((sa->P.array() == std::get<RiccatiSolution>(b).P.array()).all());
  }
}

TEST(SolveSare, ControlNoiseCannotCancelDrift) {
  // A = 0.2, B = 0, D = 1: the lift is 2a + (c + e f)^2 >= 0.4 for every f.
  const auto sys = oracle::scalar(0.2, 0.0, 0.0, 1.0);
  EXPECT_TRUE(std::holds_alternative<NotSolvable>(solve_sare(sys)));
  // With negative drift the open loop is already stable.
  const auto stable = oracle::scalar(-0.5, 0.0, 0.5, 1.0);
  const auto sol = solved(solve_sare(stable));
  EXPECT_NEAR(sol.P(0, 0), *oracle::scalar_riccati(-0.5, 0, 0.5, 1.0), 1e-10);
}

TEST(RiccatiResidual, PrintedFormDiffers) {
  const auto sol = solved(solve_sare(oracle::s2()));
  EXPECT_LT(riccati_residual(oracle::s2(), sol.P), 1e-10);
  // Printed variant: P + P^2 at P = golden ratio, nowhere near zero.
  EXPECT_NEAR(riccati_residual(oracle::s2(), sol.P, RiccatiForm::kPrinted),
              kGolden + kGolden * kGolden, 1e-9);
}

TEST(FeedbackGain, Examples) {
  const Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  EXPECT_NEAR(feedback_gain(one, oracle::s1())(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(feedback_gain(kGolden * one, oracle::s2())(0, 0), -kGolden, 1e-15);
  auto s = oracle::s4();
  s.B.setZero();
  s.D[0].setZero();
  EXPECT_TRUE(feedback_gain(Eigen::MatrixXd::Identity(2, 2) * 3.0, s).isZero(0));
}

TEST(LqValue, Examples) {
  EXPECT_EQ(lq_value(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2)), 0.0);
  EXPECT_NEAR(lq_value(kGolden * Eigen::MatrixXd::Identity(1, 1),
                       Eigen::VectorXd::Ones(1)),
              1.6180339887, 1e-10);
  Eigen::VectorXd x(2);
  x << 0.6, 0.8;
  EXPECT_NEAR(lq_value(Eigen::MatrixXd::Identity(2, 2), x), 1.0, 1e-15);
}
