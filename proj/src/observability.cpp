#include "stochobs/observability.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "stochobs/errors.hpp"

namespace stochobs {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_delta(double delta) {
  if (!(delta >= 0.0 && delta < 1.0)) {
    throw std::invalid_argument("delta must lie in [0, 1)");
  }
}

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sym_eig(
    const Eigen::MatrixXd& S, const char* where, bool vectors = true) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
      S, vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure(std::string(where) + ": eigenvalue solver failed");
  }
  return eig;
}

double lambda_max(const Eigen::MatrixXd& S, const char* where) {
  return sym_eig(S, where, false).eigenvalues().maxCoeff();
}

double lambda_min(const Eigen::MatrixXd& S, const char* where) {
  return sym_eig(S, where, false).eigenvalues().minCoeff();
}

// Eigenvalues below 1e-12 * max(|lambda|, ref) are treated as zero; `ref` is
// the size of the matrices S was formed from, so that a matrix that is zero
// up to rounding is not inverted.
Eigen::MatrixXd symmetric_pinv(const Eigen::MatrixXd& S, double ref) {
  const auto eig = sym_eig(S, "symmetric_pinv");
  const Eigen::VectorXd& lam = eig.eigenvalues();
  const double cut = 1e-12 * std::max(lam.cwiseAbs().maxCoeff(), ref);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (std::abs(lam(i)) > cut && lam(i) != 0.0) inv(i) = 1.0 / lam(i);
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

// Branch maps of one step: x' = G_b x + H_b u.
struct StepMaps {
  std::vector<Eigen::MatrixXd> G;
  std::vector<Eigen::MatrixXd> H;
  Eigen::VectorXd p;
  double dt = 0.0;
};

StepMaps step_maps(const NoiseStep& step, const StochasticSystem& sys) {
  require_valid(sys);
  if (step.d != sys.d) {
    throw std::invalid_argument("noise step dimension does not match system");
  }
  StepMaps s;
  s.dt = step.delta_t;
  s.p = step.probs;
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(sys.n, sys.n);
  for (int k = 0; k < step.branching(); ++k) {
    Eigen::MatrixXd G = I + s.dt * sys.A;
    Eigen::MatrixXd H = s.dt * sys.B;
    for (int i = 0; i < sys.d; ++i) {
      G += step.increments(k, i) * sys.C[i];
      H += step.increments(k, i) * sys.D[i];
    }
    s.G.push_back(std::move(G));
    s.H.push_back(std::move(H));
  }
  return s;
}

// One backward step of the value recursion. Returns the gain and updates V.
Eigen::MatrixXd value_step(const StepMaps& s, const StochasticSystem& sys,
                           double c, Eigen::MatrixXd& V) {
  const int n = sys.n;
  const int m = sys.m;
  Eigen::MatrixXd GG = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd SS = Eigen::MatrixXd::Zero(m, n);
  Eigen::MatrixXd HH = Eigen::MatrixXd::Zero(m, m);
  double ref = 0.0;
  for (std::size_t k = 0; k < s.G.size(); ++k) {
    ref += s.p(k) * s.H[k].squaredNorm() * V.norm();
    const Eigen::MatrixXd VG = V * s.G[k];
    GG += s.p(k) * s.G[k].transpose() * VG;
    SS += s.p(k) * s.H[k].transpose() * VG;
    HH += s.p(k) * s.H[k].transpose() * V * s.H[k];
  }
  Eigen::MatrixXd gain = Eigen::MatrixXd::Zero(m, n);
  if (c > 0.0) {
    if (std::isinf(c)) {
      gain = -symmetric_pinv(0.5 * (HH + HH.transpose()), ref) * SS;
    } else {
      HH += (s.dt / c) * Eigen::MatrixXd::Identity(m, m);
      gain = -HH.ldlt().solve(SS);
    }
  }
  Eigen::MatrixXd next = GG + SS.transpose() * gain;
  V = 0.5 * (next + next.transpose());
  return gain;
}

Eigen::Index checked_leaves(int b, int K) {
  Eigen::Index leaves = 1;
  for (int t = 0; t < K; ++t) {
    if (leaves > std::numeric_limits<Eigen::Index>::max() / b) {
      return std::numeric_limits<Eigen::Index>::max();
    }
    leaves *= b;
  }
  return leaves;
}

}  // namespace

ObservabilityForms assemble_forms(const NoiseTree& tree,
                                  const StochasticSystem& sys,
                                  Eigen::Index max_dim) {
  require_valid(sys);
  if (tree.d() != sys.d) {
    throw std::invalid_argument("assemble_forms: noise dimension mismatch");
  }
  const int n = sys.n;
  const int K = tree.K();
  const int b = tree.branching();
  const Eigen::Index L = tree.leaf_count();
  const Eigen::Index D = n * L;
  if (D > max_dim) {
    throw BudgetExceeded("assemble_forms: terminal dimension n*L",
                         static_cast<std::size_t>(D),
                         static_cast<std::size_t>(max_dim));
  }
  const StepMaps s = step_maps(tree.step(), sys);

  ObservabilityForms f;
  f.n = n;
  f.K = K;
  f.delta_t = tree.delta_t();
  f.Q = Eigen::MatrixXd::Zero(D, D);
  f.N.resize(D);
  const Eigen::VectorXd lp = tree.leaf_probs();
  for (Eigen::Index l = 0; l < L; ++l) f.N.segment(l * n, n).setConstant(lp(l));

  // Each node keeps the map from the terminal values in its subtree (a
  // contiguous leaf range) to its y value.
  std::vector<Eigen::MatrixXd> maps(L, Eigen::MatrixXd::Identity(n, n));
  Eigen::Index width = n;  // columns of each child map
  std::vector<Eigen::MatrixXd> Gt(b), Ht(b);
  for (int k = 0; k < b; ++k) {
    Gt[k] = s.p(k) * s.G[k].transpose();
    Ht[k] = (s.p(k) / s.dt) * s.H[k].transpose();
  }
  for (int t = K - 1; t >= 0; --t) {
    const Eigen::Index count = tree.depth_size(t);
    std::vector<Eigen::MatrixXd> next(count);
    const Eigen::Index w = width * b;
    Eigen::MatrixXd Z(sys.m, w);
    for (Eigen::Index j = 0; j < count; ++j) {
      Eigen::MatrixXd Y(n, w);
      for (int k = 0; k < b; ++k) {
        const Eigen::MatrixXd& child = maps[j * b + k];
        Y.middleCols(k * width, width).noalias() = Gt[k] * child;
        Z.middleCols(k * width, width).noalias() = Ht[k] * child;
      }
      const double weight = s.dt * tree.prob(tree.depth_begin(t) + j);
      f.Q.block(j * w, j * w, w, w).noalias() +=
          weight * Z.transpose() * Z;
      next[j] = std::move(Y);
    }
    maps = std::move(next);
    width = w;
  }
  f.R = maps.front();
  f.M0 = f.R.transpose() * f.R;
  f.Q = 0.5 * (f.Q + f.Q.transpose());
  return f;
}

ObservabilityReport optimal_constant(const ObservabilityForms& forms,
                                     double delta) {
  check_delta(delta);
  const Eigen::Index D = forms.dim();
  ObservabilityReport rep;
  rep.delta = delta;
  rep.T = forms.T();

  const Eigen::VectorXd s = forms.N.cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd Qw = s.asDiagonal() * forms.Q * s.asDiagonal();
  const Eigen::MatrixXd Rw = forms.R * s.asDiagonal();

  const auto eq = sym_eig(0.5 * (Qw + Qw.transpose()), "optimal_constant");
  const Eigen::VectorXd& lam = eq.eigenvalues();
  const Eigen::MatrixXd& U = eq.eigenvectors();
  const double lam_max = std::max(lam.maxCoeff(), 0.0);
  const double eps = 1e-10 * lam_max;
  Eigen::Index nk = 0;  // eigenvalues ascend, kernel first
  while (nk < D && !(lam(nk) > eps)) ++nk;
  const Eigen::Index nr = D - nk;

  // W = U^T (M0 - delta N) U in whitened coordinates.
  const Eigen::MatrixXd RU = Rw * U;
  Eigen::MatrixXd W = RU.transpose() * RU;
  W.diagonal().array() -= delta;
  const double scale =
      std::max({1.0, delta, (Rw * Rw.transpose()).trace()});
  const double tol = 1e-10 * scale;

  auto unwhiten = [&](const Eigen::VectorXd& w) -> Eigen::VectorXd {
    return s.cwiseProduct(w);
  };

  Eigen::MatrixXd Wkk_pinv = Eigen::MatrixXd::Zero(nk, nk);
  if (nk > 0) {
    const Eigen::MatrixXd Wkk = W.topLeftCorner(nk, nk);
    const auto ek = sym_eig(0.5 * (Wkk + Wkk.transpose()), "optimal_constant");
    const Eigen::Index top = nk - 1;
    if (ek.eigenvalues()(top) > tol) {
      rep.c_opt = kInf;
      rep.observable = false;
      rep.witness = unwhiten(U.leftCols(nk) * ek.eigenvectors().col(top));
      return rep;
    }
    const Eigen::MatrixXd Wrk = W.bottomLeftCorner(nr, nk);
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(nk);
    for (Eigen::Index i = 0; i < nk; ++i) {
      const double mu = ek.eigenvalues()(i);
      if (mu < -tol) {
        inv(i) = 1.0 / mu;
      } else if (nr > 0 &&
                 (Wrk * ek.eigenvectors().col(i)).norm() > 1e-8 * scale) {
        // Flat kernel direction coupled to the range: no finite constant.
        rep.c_opt = kInf;
        rep.observable = false;
        rep.witness = unwhiten(U.leftCols(nk) * ek.eigenvectors().col(i));
        return rep;
      }
    }
    Wkk_pinv = ek.eigenvectors() * inv.asDiagonal() *
               ek.eigenvectors().transpose();
  }

  rep.observable = true;
  if (nr == 0) {
    rep.c_opt = 0.0;
    rep.witness = Eigen::VectorXd::Zero(D);
    return rep;
  }
  const Eigen::MatrixXd Wrk = W.bottomLeftCorner(nr, nk);
  Eigen::MatrixXd red = W.bottomRightCorner(nr, nr);
  if (nk > 0) red -= Wrk * Wkk_pinv * Wrk.transpose();
  const Eigen::VectorXd isq = lam.tail(nr).cwiseSqrt().cwiseInverse();
  red = isq.asDiagonal() * red * isq.asDiagonal();
  const auto er = sym_eig(0.5 * (red + red.transpose()), "optimal_constant");
  const double theta = er.eigenvalues()(nr - 1);
  rep.c_opt = std::max(0.0, theta);

  // The reduced problem divides by small eigenvalues of Q. For delta > 0 the
  // estimate is polished on the equivalent n x n condition
  //   lambda_max(R (c Q + delta)^{-1} R^T) <= 1,
  // which is well conditioned since c Q + delta >= delta.
  if (delta > 0.0 && rep.c_opt > 0.0) {
    const Eigen::VectorXd lam_r = lam.cwiseMax(0.0);
    auto excess = [&](double c) {
      const Eigen::VectorXd d =
          (c * lam_r.array() + delta).inverse().sqrt().matrix();
      const Eigen::MatrixXd S = RU * d.asDiagonal();
      return lambda_max(S * S.transpose(), "optimal_constant") - 1.0;
    };
    double lo = rep.c_opt * (1.0 - 1e-6);
    double hi = rep.c_opt * (1.0 + 1e-6);
    for (int it = 0; it < 60 && excess(hi) > 0.0; ++it) hi *= 2.0;
    for (int it = 0; it < 60 && lo > 0.0 && excess(lo) <= 0.0; ++it) lo *= 0.5;
    if (excess(hi) <= 0.0) {
      for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        (excess(mid) > 0.0 ? lo : hi) = mid;
      }
      rep.c_opt = hi;
    }
  }

  const Eigen::VectorXd a = isq.cwiseProduct(er.eigenvectors().col(nr - 1));
  Eigen::VectorXd w = U.rightCols(nr) * a;
  if (nk > 0) w -= U.leftCols(nk) * (Wkk_pinv * (Wrk.transpose() * a));
  rep.witness = unwhiten(w);
  return rep;
}

bool is_delta_observable(const ObservabilityForms& forms, double delta,
                         double c) {
  check_delta(delta);
  if (!(c >= 0.0) || !std::isfinite(c)) {
    throw std::invalid_argument("is_delta_observable: c must be finite, >= 0");
  }
  const Eigen::VectorXd s = forms.N.cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd Qw = s.asDiagonal() * forms.Q * s.asDiagonal();
  const Eigen::MatrixXd Rw = forms.R * s.asDiagonal();
  Eigen::MatrixXd G = c * Qw - Rw.transpose() * Rw;
  G.diagonal().array() += delta;
  const double qn = lambda_max(0.5 * (Qw + Qw.transpose()), "is_delta_observable");
  const double scale = std::max({1.0, c * qn, (Rw * Rw.transpose()).trace()});
  return lambda_min(0.5 * (G + G.transpose()), "is_delta_observable") >=
         -1e-10 * scale;
}

Eigen::MatrixXd observability_value(const NoiseStep& step, int K,
                                    const StochasticSystem& sys, double delta,
                                    double c) {
  check_delta(delta);
  if (!(delta > 0.0)) {
    throw std::invalid_argument("observability_value: needs delta > 0");
  }
  if (!(c >= 0.0)) throw std::invalid_argument("observability_value: c < 0");
  const StepMaps s = step_maps(step, sys);
  Eigen::MatrixXd V = Eigen::MatrixXd::Identity(sys.n, sys.n) / delta;
  for (int t = K - 1; t >= 0; --t) value_step(s, sys, c, V);
  return V;
}

std::vector<Eigen::MatrixXd> observability_gains(const NoiseStep& step, int K,
                                                 const StochasticSystem& sys,
                                                 double delta, double c) {
  check_delta(delta);
  if (!(delta > 0.0) || !(c > 0.0) || !std::isfinite(c)) {
    throw std::invalid_argument(
        "observability_gains: needs delta > 0 and finite c > 0");
  }
  const StepMaps s = step_maps(step, sys);
  Eigen::MatrixXd V = Eigen::MatrixXd::Identity(sys.n, sys.n) / delta;
  std::vector<Eigen::MatrixXd> gains(K);
  for (int t = K - 1; t >= 0; --t) gains[t] = value_step(s, sys, c, V);
  return gains;
}

Eigen::MatrixXd output_energy_floor(const NoiseStep& step, int K,
                                    const StochasticSystem& sys) {
  const StepMaps s = step_maps(step, sys);
  const int n = sys.n;
  const int b = step.branching();
  const Eigen::Index nb = static_cast<Eigen::Index>(n) * b;

  // y = Gy w and z = Hz w for the stacked children values w.
  Eigen::MatrixXd Gy(n, nb), Hz(sys.m, nb);
  for (int k = 0; k < b; ++k) {
    Gy.middleCols(k * n, n) = s.p(k) * s.G[k].transpose();
    Hz.middleCols(k * n, n) = (s.p(k) / s.dt) * s.H[k].transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Gy, Eigen::ComputeFullU |
                                                Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (sv(n - 1) <= 1e-12 * sv(0)) {
    throw NumericalFailure(
        "output_energy_floor: one-step backward map is rank deficient");
  }
  const Eigen::MatrixXd Wp = svd.matrixV().leftCols(n) *
                             sv.cwiseInverse().asDiagonal() *
                             svd.matrixU().transpose();
  const Eigen::MatrixXd Z = svd.matrixV().rightCols(nb - n);

  const Eigen::MatrixXd out = s.dt * Hz.transpose() * Hz;
  Eigen::MatrixXd Pi = Eigen::MatrixXd::Zero(n, n);
  for (int t = K - 1; t >= 0; --t) {
    Eigen::MatrixXd M = out;
    for (int k = 0; k < b; ++k) M.block(k * n, k * n, n, n) += s.p(k) * Pi;
    const Eigen::MatrixXd ZM = Z.transpose() * M;
    const Eigen::MatrixXd proj =
        M - ZM.transpose() * symmetric_pinv(ZM * Z, M.norm()) * ZM;
    Eigen::MatrixXd next = Wp.transpose() * proj * Wp;
    Pi = 0.5 * (next + next.transpose());
  }
  return Pi;
}

ObservabilityReport optimal_constant_recursive(const NoiseStep& step, int K,
                                               const StochasticSystem& sys,
                                               double delta) {
  check_delta(delta);
  ObservabilityReport rep;
  rep.delta = delta;
  rep.T = step.delta_t * K;

  if (delta == 0.0) {
    const Eigen::MatrixXd Pi = output_energy_floor(step, K, sys);
    const auto eig = sym_eig(Pi, "optimal_constant_recursive", false);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    // Output energy a unit y0 would carry if the output map were applied to
    // it directly; guards the n = 1 case where lo == hi.
    const StepMaps s = step_maps(step, sys);
    double ref = 0.0;
    for (int k = 0; k < step.branching(); ++k) {
      ref += s.p(k) * (s.H[k] / s.dt).squaredNorm();
    }
    ref *= rep.T;
    if (!(hi > 0.0) || lo <= 1e-12 * std::max(hi, ref)) {
      rep.c_opt = kInf;
      rep.observable = false;
    } else {
      rep.c_opt = 1.0 / lo;
      rep.observable = true;
    }
    return rep;
  }

  auto top = [&](double c) {
    return lambda_max(observability_value(step, K, sys, delta, c),
                      "optimal_constant_recursive");
  };
  if (top(kInf) > 1.0 - 1e-10) {
    rep.c_opt = kInf;
    rep.observable = false;
    return rep;
  }
  rep.observable = true;
  if (top(0.0) <= 1.0) {
    rep.c_opt = 0.0;
    return rep;
  }
  double lo = 0.0;
  double hi = 1.0;
  while (top(hi) > 1.0) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e300) {
      rep.c_opt = kInf;
      rep.observable = false;
      return rep;
    }
  }
  for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (top(mid) > 1.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  rep.c_opt = hi;
  return rep;
}

bool is_delta_observable_recursive(const NoiseStep& step, int K,
                                   const StochasticSystem& sys, double delta,
                                   double c) {
  check_delta(delta);
  if (!(c >= 0.0) || !std::isfinite(c)) {
    throw std::invalid_argument(
        "is_delta_observable_recursive: c must be finite, >= 0");
  }
  if (delta == 0.0) {
    const Eigen::MatrixXd Pi = output_energy_floor(step, K, sys);
    Eigen::MatrixXd G = c * Pi;
    G.diagonal().array() -= 1.0;
    const double scale = std::max(1.0, c * lambda_max(Pi, "is_delta_observable"));
    return lambda_min(G, "is_delta_observable") >= -1e-10 * scale;
  }
  return lambda_max(observability_value(step, K, sys, delta, c),
                    "is_delta_observable") <= 1.0 + 1e-10;
}

Route resolve_route(const ObservabilityQuery& q, const StochasticSystem& sys) {
  if (q.route != Route::kAuto) return q.route;
  const NoiseStep step = make_noise_step(q.driver, q.horizon.delta_t(), sys.d);
  const Eigen::Index leaves = checked_leaves(step.branching(), q.horizon.K);
  const bool fits =
      leaves <= static_cast<Eigen::Index>(q.max_leaves) &&
      leaves <= q.max_dense_dim / std::max(sys.n, 1);
  return fits ? Route::kDense : Route::kRecursive;
}

ObservabilityReport observe(const StochasticSystem& sys,
                            const ObservabilityQuery& q) {
  require_valid(sys);
  if (resolve_route(q, sys) == Route::kDense) {
    const NoiseTree tree = build_tree(q.driver, q.horizon, sys.d, q.max_leaves);
    return optimal_constant(assemble_forms(tree, sys, q.max_dense_dim), q.delta);
  }
  const NoiseStep step = make_noise_step(q.driver, q.horizon.delta_t(), sys.d);
  return optimal_constant_recursive(step, q.horizon.K, sys, q.delta);
}

bool observable_with(const StochasticSystem& sys, const ObservabilityQuery& q,
                     double c) {
  require_valid(sys);
  if (resolve_route(q, sys) == Route::kDense) {
    const NoiseTree tree = build_tree(q.driver, q.horizon, sys.d, q.max_leaves);
    return is_delta_observable(assemble_forms(tree, sys, q.max_dense_dim),
                               q.delta, c);
  }
  const NoiseStep step = make_noise_step(q.driver, q.horizon.delta_t(), sys.d);
  return is_delta_observable_recursive(step, q.horizon.K, sys, q.delta, c);
}

double relative_gap(double a, double b) {
  if (std::isinf(a) && std::isinf(b)) return 0.0;
  if (std::isinf(a) || std::isinf(b)) return kInf;
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

InvarianceTable invariance_experiment(const StochasticSystem& sys, double T,
                                      double delta,
                                      const std::vector<TreeDriver>& drivers,
                                      const std::vector<int>& K_list,
                                      Eigen::Index max_dense_dim,
                                      std::size_t max_leaves) {
  require_valid(sys);
  check_delta(delta);
  if (drivers.empty() || K_list.empty()) {
    throw std::invalid_argument("invariance_experiment: empty driver/K list");
  }
  InvarianceTable table;
  table.T = T;
  table.delta = delta;
  constexpr double kFloor = 1e-12;
  double prev = -1.0;
  for (int K : K_list) {
    const HorizonConfig horizon(T, K);
    bool all_dense = true;
    for (const auto& drv : drivers) {
      ObservabilityQuery q{drv, horizon, delta, Route::kAuto, max_dense_dim,
                           max_leaves};
      all_dense = all_dense && resolve_route(q, sys) == Route::kDense;
    }
    std::vector<double> values;
    for (const auto& drv : drivers) {
      ObservabilityQuery q{drv,
                           horizon,
                           delta,
                           all_dense ? Route::kDense : Route::kRecursive,
                           max_dense_dim,
                           max_leaves};
      const ObservabilityReport rep = observe(sys, q);
      table.rows.push_back({drv.name(), K, rep.c_opt, rep.observable, all_dense});
      values.push_back(rep.c_opt);
    }
    double gap = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      for (std::size_t j = i + 1; j < values.size(); ++j) {
        gap = std::max(gap, relative_gap(values[i], values[j]));
      }
    }
    if (prev >= 0.0 && gap > std::max(prev, kFloor)) table.non_increasing = false;
    prev = gap;
    table.gaps.push_back({K, gap});
  }
  return table;
}

}  // namespace stochobs
