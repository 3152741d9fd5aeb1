#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stochobs/errors.hpp"
#include "stochobs/observability.hpp"

using namespace stochobs;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

TreeDriver driver_of(int kind) {
  if (kind == 0) return TreeDriver::bernoulli();
  if (kind == 1) return TreeDriver::trinomial();
  return TreeDriver::quantized_gaussian(4);
}

ObservabilityQuery query(const TreeDriver& drv, double T, int K, double delta,
                         Route route = Route::kAuto) {
  ObservabilityQuery q;
  q.driver = drv;
  q.horizon = HorizonConfig(T, K);
  q.delta = delta;
  q.route = route;
  return q;
}

// An observable system with nontrivial dynamics: drift and state noise plus a
// full-rank B.
StochasticSystem observable_system(std::mt19937_64& rng, int n) {
  auto s = oracle::random_system(rng, n, n, 1, 0.5, 0.3);
  s.B += 1.5 * Eigen::MatrixXd::Identity(n, n);
  return s;
}

}  // namespace

TEST(AssembleForms, Invariants) {
  std::mt19937_64 rng(41);
  const auto sys = oracle::random_system(rng, 2, 1, 2);
  const auto t = build_tree(TreeDriver::trinomial(), HorizonConfig(1.0, 2), 2);
  const auto f = assemble_forms(t, sys);
  ASSERT_EQ(f.dim(), 2 * t.leaf_count());
  EXPECT_LT((f.M0 - f.M0.transpose()).norm(), 1e-14);
  EXPECT_LT((f.Q - f.Q.transpose()).norm(), 1e-12 * f.Q.norm());
  EXPECT_LT((f.M0 - f.R.transpose() * f.R).norm(), 1e-14);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(f.Q);
  EXPECT_GT(es.eigenvalues()(0), -1e-12 * f.Q.norm());
  EXPECT_GT(f.N.minCoeff(), 0.0);
  EXPECT_NEAR(f.N.sum(), 2.0, 1e-13);
}

TEST(AssembleForms, FormsEvaluateTheBsde) {
  std::mt19937_64 rng(42);
  const auto sys = oracle::random_system(rng, 2, 2, 1);
  const auto t = build_tree(TreeDriver::quantized_gaussian(4), HorizonConfig(0.7, 2), 1);
  const auto f = assemble_forms(t, sys);
  for (int k = 0; k < 100; ++k) {
    const Eigen::VectorXd v = oracle::random_matrix(rng, static_cast<int>(f.dim()), 1);
    const auto y1 = TerminalVariable::from_flat(v, 2);
    const auto bs = solve_bsde(t, sys, y1);
    EXPECT_NEAR(v.dot(f.M0 * v), bs.y0.squaredNorm(), 1e-12 * (1 + bs.y0.squaredNorm()));
    const double zz = control_energy(t, bs.z);
    EXPECT_NEAR(v.dot(f.Q * v), zz, 1e-12 * (1 + zz));
    EXPECT_NEAR(v.dot(f.N.asDiagonal() * v), terminal_inner(t, y1, y1), 1e-13);
  }
}

TEST(AssembleForms, AgreesWithBruteForceOracle) {
  std::mt19937_64 rng(43);
  for (int kind : {0, 1, 2}) {
    const auto sys = oracle::random_system(rng, 2, 1, 1);
    const auto t = build_tree(driver_of(kind), HorizonConfig(1.0, 2), 1);
    const auto f = assemble_forms(t, sys);
    const auto ref = oracle::brute_forms(sys, oracle::make_step(kind, t.delta_t(), 1), 2);
    EXPECT_LT((f.M0 - ref.M0).norm(), 1e-12);
    EXPECT_LT((f.Q - ref.Q).norm(), 1e-12);
    EXPECT_LT((f.N - ref.N).norm(), 1e-14);
  }
}

TEST(AssembleForms, NoControlChannelGivesZeroQ) {
  auto sys = oracle::s4();
  sys.B.setZero();
  sys.D[0].setZero();
  const auto t = build_tree(TreeDriver::bernoulli(), HorizonConfig(1.0, 3), 1);
  EXPECT_TRUE(assemble_forms(t, sys).Q.isZero(0));
}

TEST(AssembleForms, Budget) {
  const auto t = build_tree(TreeDriver::bernoulli(), HorizonConfig(1.0, 10), 1);
  EXPECT_THROW(assemble_forms(t, oracle::s4()), BudgetExceeded);
  EXPECT_NO_THROW(assemble_forms(t, oracle::s4(), 4096));
}

// For the martingale system y_t = E[y1 | F_t] and z = y, so the worst y1 is
// deterministic and c_opt = (1 - delta) / T on every tree.
TEST(OptimalConstant, MartingaleClosedForm) {
  const double T = 2.0;
  for (int kind : {0, 1, 2}) {
    for (int K = 2; K <= 8; ++K) {
      for (double delta : {0.0, 0.3}) {
        for (Route route : {Route::kDense, Route::kRecursive}) {
          if (route == Route::kDense && std::pow(kind == 0 ? 2 : kind == 1 ? 3 : 4, K) > 512)
            continue;
          auto q = query(driver_of(kind), T, K, delta, route);
          q.max_dense_dim = 2048;
          const auto r = observe(oracle::martingale(1), q);
          EXPECT_TRUE(r.observable);
          EXPECT_NEAR(r.c_opt, (1 - delta) / T, 1e-9)
              << "kind " << kind << " K " << K << " delta " << delta;
        }
      }
    }
  }
}

TEST(OptimalConstant, MartingaleWitnessIsDeterministic) {
  const auto t = build_tree(TreeDriver::trinomial(), HorizonConfig(1.0, 3), 1);
  const auto r = optimal_constant(assemble_forms(t, oracle::martingale(1)), 0.2);
  ASSERT_EQ(r.witness.size(), t.leaf_count());
  const Eigen::VectorXd w = r.witness / r.witness(0);
  EXPECT_LT((w.array() - 1.0).abs().maxCoeff(), 1e-8);
}

TEST(OptimalConstant, NoControlChannelIsUnobservable) {
  auto sys = oracle::s4();
  sys.B.setZero();
  sys.D[0].setZero();
  for (Route route : {Route::kDense, Route::kRecursive}) {
    const auto r = observe(sys, query(TreeDriver::bernoulli(), 1.0, 3, 0.5, route));
    EXPECT_FALSE(r.observable);
    EXPECT_EQ(r.c_opt, kInf);
  }
}

TEST(OptimalConstant, ZeroObservationNeedsNoConstant) {
  ObservabilityForms f;
  f.n = 1;
  f.K = 1;
  f.delta_t = 1.0;
  f.R = Eigen::MatrixXd::Zero(1, 2);
  f.M0 = Eigen::MatrixXd::Zero(2, 2);
  f.Q = Eigen::MatrixXd::Zero(2, 2);
  f.N = Eigen::VectorXd::Constant(2, 0.5);
  const auto r = optimal_constant(f, 0.1);
  EXPECT_TRUE(r.observable);
  EXPECT_EQ(r.c_opt, 0.0);
}

TEST(IsDeltaObservable, Examples) {
  const auto t = build_tree(TreeDriver::bernoulli(), HorizonConfig(2.0, 3), 1);
  const auto f = assemble_forms(t, oracle::martingale(1));
  // c_opt = (1 - 0.5) / 2
  EXPECT_TRUE(is_delta_observable(f, 0.5, 0.25));
  EXPECT_TRUE(is_delta_observable(f, 0.5, 10.0));
  EXPECT_FALSE(is_delta_observable(f, 0.5, 0.24));
  EXPECT_TRUE(is_delta_observable(f, 0.0, 0.5));
  EXPECT_FALSE(is_delta_observable(f, 0.0, 0.49));
  EXPECT_TRUE(is_delta_observable_recursive(t.step(), 3, oracle::martingale(1), 0.5, 0.25 * (1 + 1e-9)));
  EXPECT_FALSE(is_delta_observable_recursive(t.step(), 3, oracle::martingale(1), 0.5, 0.24));
}

TEST(OptimalConstant, MatchesBisectionOracle) {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 12; ++trial) {
    const int kind = trial % 3;
    const auto sys = trial % 2 ? observable_system(rng, 2) : oracle::random_system(rng, 1, 1, 1);
    const double delta = 0.1 + 0.07 * trial;
    const int K = kind == 0 ? 4 : 2;
    const auto t = build_tree(driver_of(kind), HorizonConfig(1.0, K), 1);
    const auto ref = oracle::brute_c_opt(
        oracle::brute_forms(sys, oracle::make_step(kind, t.delta_t(), 1), K), delta);
    const auto r = optimal_constant(assemble_forms(t, sys), delta);
    if (std::isinf(ref)) {
      EXPECT_FALSE(r.observable);
      continue;
    }
    EXPECT_NEAR(r.c_opt, ref, 1e-7 * (1 + ref)) << "trial " << trial;
    EXPECT_TRUE(is_delta_observable(assemble_forms(t, sys), delta, r.c_opt));
  }
}

TEST(OptimalConstant, DenseAndRecursiveAgree) {
  std::mt19937_64 rng(45);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 1 + trial % 3;
    const auto sys = trial % 2 ? observable_system(rng, n) : oracle::random_system(rng, n, 1, 1);
    const int kind = trial % 3;
    const int K = kind == 0 ? 4 : 3;
    const double delta = 0.2 + 0.05 * trial;
    auto q = query(driver_of(kind), 1.5, K, delta, Route::kDense);
    q.max_dense_dim = 4096;
    const double dense = observe(sys, q).c_opt;
    q.route = Route::kRecursive;
    const double rec = observe(sys, q).c_opt;
    if (std::isinf(dense) || std::isinf(rec)) {
      EXPECT_EQ(dense, rec) << "trial " << trial;
    } else {
      EXPECT_NEAR(dense, rec, 1e-7 * (1 + dense)) << "trial " << trial;
    }
  }
}

TEST(OptimalConstant, NonIncreasingInDelta) {
  for (const auto& sys : {oracle::s1(), oracle::s2(), oracle::s4()}) {
    double previous = kInf;
    for (double delta : {0.05, 0.1, 0.3, 0.5, 0.8, 0.95}) {
      const double c = observe(sys, query(TreeDriver::trinomial(), 1.0, 4, delta)).c_opt;
      EXPECT_LE(c, previous * (1 + 1e-10));
      previous = c;
    }
  }
}

// |y0|^2 <= c dt sum E|z|^2 + delta E|y1|^2 implies the weaker statement with
// E|y_t|^2 in place of |y0|^2 at t = 0.
TEST(OptimalConstant, DefiningInequalityHoldsOnRandomTerminals) {
  std::mt19937_64 rng(46);
  const auto sys = observable_system(rng, 2);
  const auto t = build_tree(TreeDriver::bernoulli(), HorizonConfig(1.0, 4), 1);
  const auto f = assemble_forms(t, sys);
  const double delta = 0.4;
  const auto r = optimal_constant(f, delta);
  ASSERT_TRUE(r.observable);
  for (int k = 0; k < 200; ++k) {
    const Eigen::VectorXd v = oracle::random_matrix(rng, static_cast<int>(f.dim()), 1);
    const auto bs = solve_bsde(t, sys, TerminalVariable::from_flat(v, 2));
    const auto y1 = TerminalVariable::from_flat(v, 2);
    EXPECT_LE(bs.y0.squaredNorm(),
              r.c_opt * control_energy(t, bs.z) + delta * terminal_inner(t, y1, y1) + 1e-10);
  }
  // The witness attains it.
  const auto y1 = TerminalVariable::from_flat(r.witness, 2);
  const auto bs = solve_bsde(t, sys, y1);
  const double rhs = r.c_opt * control_energy(t, bs.z) + delta * terminal_inner(t, y1, y1);
  EXPECT_NEAR(bs.y0.squaredNorm(), rhs, 1e-8 * rhs);
}

TEST(OptimalConstant, InvariantUnderOutputScaling) {
  std::mt19937_64 rng(47);
  const auto sys = observable_system(rng, 2);
  const auto t = build_tree(TreeDriver::trinomial(), HorizonConfig(1.0, 3), 1);
  auto f = assemble_forms(t, sys);
  const double base = optimal_constant(f, 0.3).c_opt;
  f.R *= std::sqrt(7.3);
  f.M0 *= 7.3;
  f.Q *= 7.3;
  f.N *= 7.3;
  EXPECT_NEAR(optimal_constant(f, 0.3).c_opt, base, 1e-10 * base);
}

TEST(OptimalConstant, RejectsBadDelta) {
  const auto t = build_tree(TreeDriver::bernoulli(), HorizonConfig(1.0, 2), 1);
  const auto f = assemble_forms(t, oracle::s1());
  EXPECT_THROW(optimal_constant(f, -0.1), std::invalid_argument);
  EXPECT_THROW(optimal_constant(f, 1.0), std::invalid_argument);
}

TEST(Route, Selection) {
  auto q = query(TreeDriver::bernoulli(), 1.0, 6, 0.5);
  EXPECT_EQ(resolve_route(q, oracle::s4()), Route::kDense);  // 2 * 64
  q.horizon = HorizonConfig(1.0, 10);
  EXPECT_EQ(resolve_route(q, oracle::s4()), Route::kRecursive);  // 2 * 1024
  q.max_dense_dim = 2048;
  EXPECT_EQ(resolve_route(q, oracle::s4()), Route::kDense);
  q.route = Route::kRecursive;
  EXPECT_EQ(resolve_route(q, oracle::s4()), Route::kRecursive);
}

TEST(Route, ExplicitDenseOverBudgetThrows) {
  auto q = query(TreeDriver::bernoulli(), 1.0, 10, 0.5, Route::kDense);
  EXPECT_THROW(observe(oracle::s4(), q), BudgetExceeded);
  // The recursive route never builds the tree.
  q.route = Route::kRecursive;
  q.horizon = HorizonConfig(1.0, 40);
  q.max_leaves = 1000;
  EXPECT_TRUE(observe(oracle::s4(), q).observable);
}

TEST(Invariance, CorpusGapsAreRoundingLevel) {
  const std::vector<TreeDriver> drivers = {TreeDriver::bernoulli(), TreeDriver::trinomial(),
                                           TreeDriver::quantized_gaussian(3)};
  for (const auto& sys : {oracle::s1(), oracle::s2(), oracle::s4()}) {
    const auto table = invariance_experiment(sys, 1.0, 0.5, drivers, {4, 6, 8});
    EXPECT_EQ(table.rows.size(), 9u);
    ASSERT_EQ(table.gaps.size(), 3u);
    for (const auto& g : table.gaps) EXPECT_LT(g.max_relative_gap, 1e-12) << "K " << g.K;
    EXPECT_TRUE(table.non_increasing);
  }
}

TEST(Invariance, SingleDriverHasZeroGap) {
  const auto table =
      invariance_experiment(oracle::s2(), 1.0, 0.5, {TreeDriver::bernoulli()}, {3, 5});
  for (const auto& g : table.gaps) EXPECT_EQ(g.max_relative_gap, 0.0);
  EXPECT_TRUE(table.non_increasing);
}

TEST(Invariance, UnobservableRowsAreInfinite) {
  const auto table = invariance_experiment(oracle::s3(), 1.0, 0.5,
                                           {TreeDriver::bernoulli(), TreeDriver::trinomial()},
                                           {4});
  for (const auto& row : table.rows) {
    EXPECT_FALSE(row.observable);
    EXPECT_EQ(row.c_opt, kInf);
  }
  EXPECT_EQ(table.gaps[0].max_relative_gap, 0.0);
}

TEST(RelativeGap, Examples) {
  EXPECT_EQ(relative_gap(0.0, 0.0), 0.0);
  EXPECT_EQ(relative_gap(kInf, kInf), 0.0);
  EXPECT_DOUBLE_EQ(relative_gap(1.0, 2.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_gap(-1.0, 1.0), 2.0);
}
