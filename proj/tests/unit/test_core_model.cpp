#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stochobs/core_model.hpp"
#include "stochobs/errors.hpp"

using namespace stochobs;

namespace {

bool mentions(const std::vector<std::string>& v, const std::string& what) {
  for (const auto& s : v)
    if (s.find(what) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(ValidateSystem, ScalarZeroNoiseIsValid) {
  auto s = StochasticSystem::Zero(1, 1, 1);
  s.B(0, 0) = 1.0;
  EXPECT_TRUE(validate_system(s).empty());
  EXPECT_NO_THROW(require_valid(s));
}

TEST(ValidateSystem, ShapeMismatchIsReported) {
  auto s = StochasticSystem::Zero(2, 1, 1);
  s.A = Eigen::MatrixXd::Zero(1, 1);
  const auto v = validate_system(s);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(mentions(v, "A shape"));
  EXPECT_THROW(require_valid(s), std::invalid_argument);
}

TEST(ValidateSystem, NonFiniteEntryIsReported) {
  auto s = StochasticSystem::Zero(2, 1, 1);
  s.A(1, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_TRUE(mentions(validate_system(s), "non-finite"));
  s.A(1, 0) = 0.0;
  s.D[0](0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_TRUE(mentions(validate_system(s), "D1 non-finite"));
}

TEST(ValidateSystem, NoiseListLengthMustMatch) {
  auto s = StochasticSystem::Zero(1, 1, 2);
  s.C.pop_back();
  EXPECT_TRUE(mentions(validate_system(s), "C count"));
}

TEST(ValidateSystem, NonPositiveDimensions) {
  StochasticSystem s;
  EXPECT_EQ(validate_system(s).size(), 3u);
}

TEST(ZeroSystem, Shapes) {
  const auto s = StochasticSystem::Zero(3, 2, 2);
  EXPECT_EQ(s.A.rows(), 3);
  EXPECT_EQ(s.B.cols(), 2);
  ASSERT_EQ(s.C.size(), 2u);
  EXPECT_EQ(s.D[1].rows(), 3);
  EXPECT_EQ(s.D[1].cols(), 2);
  EXPECT_TRUE(s.A.isZero(0));
}

TEST(HorizonConfig, StepTimesCountIsHorizon) {
  for (double T : {0.1, 1.0, 2.5, 7.0}) {
    for (int K : {1, 3, 7, 64}) {
      HorizonConfig h(T, K);
      EXPECT_NEAR(h.delta_t() * K, T, 4 * std::numeric_limits<double>::epsilon() * T);
    }
  }
  EXPECT_THROW(HorizonConfig(0.0, 3), std::invalid_argument);
  EXPECT_THROW(HorizonConfig(1.0, 0), std::invalid_argument);
}

TEST(Hautus, DoubleIntegratorIsStabilizable) {
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 0, 1, 0, 0;
  B << 0, 1;
  EXPECT_TRUE(hautus_stabilizability(A, B));
}

TEST(Hautus, UnstableUncontrolledModeFails) {
  EXPECT_FALSE(hautus_stabilizability(Eigen::MatrixXd::Constant(1, 1, 1.0),
                                      Eigen::MatrixXd::Zero(1, 1)));
}

TEST(Hautus, StableWithoutControlPasses) {
  EXPECT_TRUE(hautus_stabilizability(Eigen::MatrixXd::Constant(1, 1, -1.0),
                                     Eigen::MatrixXd::Zero(1, 1)));
}

TEST(Hautus, MarginallyStableEigenvalueIsCritical) {
  EXPECT_FALSE(hautus_stabilizability(Eigen::MatrixXd::Zero(1, 1),
                                      Eigen::MatrixXd::Zero(1, 1)));
  EXPECT_FALSE(hautus_stabilizability(Eigen::MatrixXd::Constant(1, 1, -1e-12),
                                      Eigen::MatrixXd::Zero(1, 1)));
}

TEST(Hautus, ComplexUnstablePair) {
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 0.1, 1, -1, 0.1;
  B << 1, 0;
  EXPECT_TRUE(hautus_stabilizability(A, B));
  EXPECT_FALSE(hautus_stabilizability(A, Eigen::MatrixXd::Zero(2, 1)));
}

TEST(Hautus, BadArguments) {
  EXPECT_THROW(hautus_stabilizability(Eigen::MatrixXd::Zero(2, 3),
                                      Eigen::MatrixXd::Zero(2, 1)),
               std::invalid_argument);
  EXPECT_THROW(hautus_stabilizability(Eigen::MatrixXd::Zero(1, 1),
                                      Eigen::MatrixXd::Zero(1, 1), 0.0),
               std::invalid_argument);
}

// Verdict survives (A, B) -> (S A S^-1, S B) for cond(S) < 10.
TEST(Hautus, SimilarityInvariance) {
  std::mt19937_64 rng(7);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 60; ++trial) {
    const int n = 2 + trial % 3;
    Eigen::MatrixXd S = Eigen::MatrixXd::Identity(n, n) +
                        oracle::random_matrix(rng, n, n, 0.6);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(S);
    const double cond = svd.singularValues()(0) / svd.singularValues()(n - 1);
    if (cond >= 10) continue;

    Eigen::MatrixXd A = oracle::random_matrix(rng, n, n);
    Eigen::MatrixXd B = oracle::random_matrix(rng, n, 1);
    if (trial % 2 == 1) {
      // Decouple the first state and make it unstable and uncontrolled.
      A.row(0).setZero();
      A.col(0).setZero();
      A(0, 0) = 0.5;
      B(0, 0) = 0.0;
    }
    const bool base = hautus_stabilizability(A, B);
    if (trial % 2 == 1) EXPECT_FALSE(base);
    const Eigen::MatrixXd At = S * A * S.inverse();
    const Eigen::MatrixXd Bt = S * B;
    EXPECT_EQ(hautus_stabilizability(At, Bt, 1e-9 * cond), base)
        << "trial " << trial;
    ++checked;
  }
  EXPECT_GE(checked, 40);
}
