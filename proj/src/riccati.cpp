#include "stochobs/riccati.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>
#include <gsl/gsl_vector.h>

#include <Eigen/Eigenvalues>

#include "stochobs/errors.hpp"
#include "stochobs/moment_lift.hpp"

namespace stochobs {

namespace {

Eigen::MatrixXd control_weight(const StochasticSystem& sys,
                               const Eigen::MatrixXd& P) {
  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(sys.m, sys.m);
  for (int i = 0; i < sys.d; ++i) R += sys.D[i].transpose() * P * sys.D[i];
  return R;
}

Eigen::MatrixXd cross_term(const StochasticSystem& sys,
                           const Eigen::MatrixXd& P) {
  Eigen::MatrixXd S = sys.B.transpose() * P;
  for (int i = 0; i < sys.d; ++i) S += sys.D[i].transpose() * P * sys.C[i];
  return S;
}

bool noise_free(const StochasticSystem& sys) {
  for (int i = 0; i < sys.d; ++i) {
    if (!sys.C[i].isZero(0.0) || !sys.D[i].isZero(0.0)) return false;
  }
  return true;
}

double abscissa_of(const StochasticSystem& sys, const Eigen::MatrixXd& F) {
  return spectral_abscissa(build_generator(sys, F));
}

struct SearchContext {
  const StochasticSystem* sys;
};

double nm_objective(const gsl_vector* x, void* params) {
  const auto* ctx = static_cast<const SearchContext*>(params);
  const StochasticSystem& sys = *ctx->sys;
  Eigen::MatrixXd F(sys.m, sys.n);
  for (int j = 0; j < sys.n; ++j) {
    for (int i = 0; i < sys.m; ++i) F(i, j) = gsl_vector_get(x, i + j * sys.m);
  }
  const double a = abscissa_of(sys, F);
  return std::isfinite(a) ? a : std::numeric_limits<double>::max();
}

// Derivative-free local search on the abscissa starting from F0.
Eigen::MatrixXd nelder_mead(const StochasticSystem& sys,
                            const Eigen::MatrixXd& F0, double step,
                            double target) {
  static const bool handler_off = [] {
    gsl_set_error_handler_off();
    return true;
  }();
  (void)handler_off;

  const std::size_t dim = static_cast<std::size_t>(sys.m) * sys.n;
  SearchContext ctx{&sys};
  gsl_multimin_function func{&nm_objective, dim, &ctx};

  gsl_vector* x = gsl_vector_alloc(dim);
  gsl_vector* steps = gsl_vector_alloc(dim);
  for (std::size_t k = 0; k < dim; ++k) gsl_vector_set(x, k, F0.data()[k]);
  gsl_vector_set_all(steps, step);

  gsl_multimin_fminimizer* s =
      gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dim);
  gsl_multimin_fminimizer_set(s, &func, x, steps);

  const int max_iter = 400 * static_cast<int>(dim);
  for (int it = 0; it < max_iter; ++it) {
    if (gsl_multimin_fminimizer_iterate(s) != GSL_SUCCESS) break;
    if (s->fval < target) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), 1e-10) ==
        GSL_SUCCESS) {
      break;
    }
  }

  Eigen::MatrixXd F(sys.m, sys.n);
  for (std::size_t k = 0; k < dim; ++k) F.data()[k] = gsl_vector_get(s->x, k);

  gsl_multimin_fminimizer_free(s);
  gsl_vector_free(steps);
  gsl_vector_free(x);
  return F;
}

}  // namespace

Eigen::MatrixXd riccati_operator(const StochasticSystem& sys,
                                 const Eigen::MatrixXd& P, RiccatiForm form) {
  Eigen::MatrixXd out = P * sys.A + sys.A.transpose() * P;
  for (int i = 0; i < sys.d; ++i) out += sys.C[i].transpose() * P * sys.C[i];
  const Eigen::MatrixXd R = control_weight(sys, P);
  const Eigen::MatrixXd S = cross_term(sys, P);
  const Eigen::MatrixXd quad = S.transpose() * R.ldlt().solve(S);
  if (form == RiccatiForm::kStandard) {
    out += Eigen::MatrixXd::Identity(sys.n, sys.n) - quad;
  } else {
    out += quad;
  }
  return out;
}

double riccati_residual(const StochasticSystem& sys, const Eigen::MatrixXd& P,
                        RiccatiForm form) {
  return riccati_operator(sys, P, form).norm();
}

double riccati_residual_scale(const StochasticSystem& sys,
                              const Eigen::MatrixXd& P) {
  double scale = std::sqrt(static_cast<double>(sys.n));
  scale += (P * sys.A + sys.A.transpose() * P).norm();
  for (int i = 0; i < sys.d; ++i)
    scale += (sys.C[i].transpose() * P * sys.C[i]).norm();
  const Eigen::MatrixXd R = control_weight(sys, P);
  const Eigen::MatrixXd S = cross_term(sys, P);
  scale += (S.transpose() * R.ldlt().solve(S)).norm();
  return scale;
}

Eigen::MatrixXd feedback_gain(const Eigen::MatrixXd& P,
                              const StochasticSystem& sys) {
  require_valid(sys);
  if (P.rows() != sys.n || P.cols() != sys.n) {
    throw std::invalid_argument("feedback_gain: P must be n x n");
  }
  return -control_weight(sys, P).ldlt().solve(cross_term(sys, P));
}

double lq_value(const Eigen::MatrixXd& P, const Eigen::VectorXd& x0) {
  if (P.rows() != x0.size() || P.cols() != x0.size()) {
    throw std::invalid_argument("lq_value: dimension mismatch");
  }
  return x0.dot(P * x0);
}

std::optional<Eigen::MatrixXd> find_stabilizing_gain(const StochasticSystem& sys,
                                                     int restarts,
                                                     std::uint64_t seed) {
  require_valid(sys);
  // Require a little margin so Newton-Kleinman starts strictly inside the
  // stabilizing set.
  constexpr double kTarget = -1e-6;

  Eigen::MatrixXd F = Eigen::MatrixXd::Zero(sys.m, sys.n);
  if (abscissa_of(sys, F) < kTarget) return F;

  for (double s : {0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0}) {
    F = -s * sys.B.transpose();
    if (abscissa_of(sys, F) < kTarget) return F;
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int r = 0; r < restarts; ++r) {
    // Spread restart scales over a few decades.
    const double scale = std::pow(10.0, -1.0 + 3.0 * (r % 7) / 6.0);
    Eigen::MatrixXd F0(sys.m, sys.n);
    for (Eigen::Index k = 0; k < F0.size(); ++k) {
      F0.data()[k] = scale * normal(rng);
    }
    if (r == 0) F0.setZero();
    F = nelder_mead(sys, F0, std::max(scale, 0.5), kTarget);
    if (abscissa_of(sys, F) < kTarget) return F;
  }
  return std::nullopt;
}

SareResult solve_sare(const StochasticSystem& sys, const SareOptions& opts) {
  require_valid(sys);
  if (!(opts.tol > 0.0) || opts.max_iter < 1) {
    throw std::invalid_argument("solve_sare: need tol > 0 and max_iter >= 1");
  }
  const int n = sys.n;

  auto F0 = find_stabilizing_gain(sys, opts.restarts, opts.seed);
  if (!F0) {
    if (noise_free(sys) && hautus_stabilizability(sys.A, sys.B)) {
      throw NumericalFailure(
          "solve_sare: Hautus test passes but no stabilizing gain was found");
    }
    return NotSolvable{
        "no mean-square stabilizing feedback gain found after " +
        std::to_string(opts.restarts) + " restarts"};
  }

  Eigen::MatrixXd F = *F0;
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  double residual = std::numeric_limits<double>::infinity();
  double scale = 1.0;
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    const double previous = residual;
    // Generalized Lyapunov equation for the cost of the current gain; its
    // matrix in vec-coordinates is the transpose of the moment generator.
    const MomentGenerator gen = build_generator(sys, F);
    const Eigen::MatrixXd op = gen.L.transpose();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(op);
    if (!lu.isInvertible() || lu.rcond() < 1e-14) {
      throw NumericalFailure("solve_sare: lifted Lyapunov system is singular");
    }
    const Eigen::MatrixXd rhs = I + F.transpose() * F;
    P = unvec(lu.solve(-vec(rhs)), n);
    P = 0.5 * (P + P.transpose());
    F = feedback_gain(P, sys);
    residual = riccati_residual(sys, P);
    scale = riccati_residual_scale(sys, P);
    // Stop at the absolute tolerance, or once the iteration has stalled at
    // rounding level relative to the size of the terms.
    if (residual < opts.tol ||
        (residual < opts.tol * scale && residual > 0.5 * previous)) {
      ++it;
      break;
    }
  }
  if (!(residual < opts.tol * std::max(1.0, scale))) {
    throw NumericalFailure("solve_sare: Newton-Kleinman did not converge, "
                           "residual " + std::to_string(residual));
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(P, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0) {
    throw NumericalFailure("solve_sare: converged P is not positive definite");
  }

  RiccatiSolution sol;
  sol.P = P;
  sol.F = F;
  sol.residual = residual;
  sol.relative_residual = residual / scale;
  sol.iterations = it;
  sol.closed_loop_abscissa = abscissa_of(sys, F);
  if (!(sol.closed_loop_abscissa < 0.0)) {
    throw NumericalFailure("solve_sare: converged gain is not stabilizing");
  }
  return sol;
}

}  // namespace stochobs
