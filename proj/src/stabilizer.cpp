#include "stochobs/stabilizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

#include "stochobs/errors.hpp"
#include "stochobs/moment_lift.hpp"

namespace stochobs {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct Moments {
  double mean = 0.0;
  double se = 0.0;
};

Moments summarize(const std::vector<double>& v) {
  Moments m;
  const double n = static_cast<double>(v.size());
  if (v.empty()) return m;
  double s = 0.0;
  for (double x : v) s += x;
  m.mean = s / n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.se = std::sqrt(ss / (n - 1.0) / n);
  }
  return m;
}

double top_eigenvalue(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (S + S.transpose()),
                                                     Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw NumericalFailure("eigenvalue solver failed");
  }
  return eig.eigenvalues().maxCoeff();
}

bool noise_free(const StochasticSystem& sys) {
  for (int i = 0; i < sys.d; ++i) {
    if (!sys.C[i].isZero(0.0) || !sys.D[i].isZero(0.0)) return false;
  }
  return true;
}

}  // namespace

StabilizerRun run_piecewise(const NoiseTree& tree, const StochasticSystem& sys,
                            const ControlKernel& kernel,
                            const Eigen::VectorXd& x0, int k_max, int paths,
                            std::uint64_t seed, std::size_t max_samples) {
  require_valid(sys);
  if (x0.size() != sys.n) {
    throw std::invalid_argument("run_piecewise: x0 must have size n");
  }
  if (k_max < 1 || paths < 2) {
    throw std::invalid_argument("run_piecewise: need k_max >= 1, paths >= 2");
  }
  if (static_cast<Eigen::Index>(kernel.gains.size()) != tree.internal_count()) {
    throw std::invalid_argument("run_piecewise: kernel does not match tree");
  }
  const std::size_t samples = static_cast<std::size_t>(paths) *
                              static_cast<std::size_t>(k_max) *
                              static_cast<std::size_t>(tree.K());
  if (samples > max_samples) {
    throw BudgetExceeded("run_piecewise: path steps", samples, max_samples);
  }

  const NoiseStep& step = tree.step();
  const int b = step.branching();
  const double dt = tree.delta_t();
  std::vector<double> cdf(b);
  double acc = 0.0;
  for (int k = 0; k < b; ++k) {
    acc += step.probs(k);
    cdf[k] = acc;
  }
  cdf.back() = 1.0;

  // [k][path]
  std::vector<std::vector<double>> moment(k_max + 1, std::vector<double>(paths));
  std::vector<std::vector<double>> energy(k_max + 1, std::vector<double>(paths));
  std::vector<std::vector<double>> cumulative(k_max + 1,
                                              std::vector<double>(paths));

  Eigen::VectorXd x(sys.n), xs(sys.n), u(sys.m), next(sys.n);
  for (int p = 0; p < paths; ++p) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(p))));
    x = x0;
    double total = 0.0;
    moment[0][p] = x.squaredNorm();
    for (int k = 1; k <= k_max; ++k) {
      xs = x;
      double spent = 0.0;
      Eigen::Index node = 0;
      for (int t = 0; t < tree.K(); ++t) {
        u.noalias() = kernel.gains[node] * xs;
        spent += dt * u.squaredNorm();
        const double r = uniform01(rng);
        const int br = static_cast<int>(
            std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
        const int branch = std::min(br, b - 1);
        next = x + dt * (sys.A * x + sys.B * u);
        for (int i = 0; i < sys.d; ++i) {
          next += step.increments(branch, i) * (sys.C[i] * x + sys.D[i] * u);
        }
        x = next;
        node = tree.first_child(node) + branch;
      }
      total += spent;
      moment[k][p] = x.squaredNorm();
      energy[k][p] = spent;
      cumulative[k][p] = total;
    }
  }

  StabilizerRun run;
  run.paths = paths;
  run.seed = seed;
  run.delta = kernel.delta;
  run.c = kernel.c;
  run.T = kernel.T;
  run.x0_norm2 = x0.squaredNorm();

  const IntervalTransfer tr = interval_transfer(tree, sys, kernel);
  Eigen::VectorXd X = vec(x0 * x0.transpose());
  double exact_total = 0.0;
  for (int k = 0; k <= k_max; ++k) {
    IntervalRecord rec;
    rec.k = k;
    if (k > 0) {
      const double e = tr.energy.dot(X);
      X = tr.moment * X;
      exact_total += e;
      rec.exact_control_energy = e;
    }
    rec.exact_second_moment = unvec(X, sys.n).trace();
    rec.exact_cumulative_energy = exact_total;
    const Moments m = summarize(moment[k]);
    const Moments e = summarize(energy[k]);
    const Moments c = summarize(cumulative[k]);
    rec.second_moment = m.mean;
    rec.second_moment_se = m.se;
    rec.control_energy = e.mean;
    rec.control_energy_se = e.se;
    rec.cumulative_energy = c.mean;
    rec.cumulative_energy_se = c.se;
    run.intervals.push_back(rec);
  }

  // Ordinary least squares on log moments; the slope is a fixed linear
  // combination so its error follows from the per-point relative errors.
  const int npts = k_max + 1;
  double kbar = 0.0;
  for (int k = 0; k < npts; ++k) kbar += k;
  kbar /= npts;
  double sxx = 0.0;
  for (int k = 0; k < npts; ++k) sxx += (k - kbar) * (k - kbar);
  double slope = 0.0, var = 0.0;
  bool finite = true;
  for (const auto& rec : run.intervals) {
    if (!(rec.second_moment > 0.0)) {
      finite = false;
      break;
    }
    const double w = (rec.k - kbar) / sxx;
    slope += w * std::log(rec.second_moment);
    const double rel = rec.second_moment_se / rec.second_moment;
    var += w * w * rel * rel;
  }
  run.decay_slope = finite ? slope : -kInf;
  run.decay_slope_se = finite ? std::sqrt(var) : 0.0;
  return run;
}

PiecewiseVerdict check_piecewise(const StabilizerRun& run, double c0) {
  PiecewiseVerdict v;
  const double delta = run.delta;
  v.energy_bound = run.c / delta * c0 / (1.0 - delta) * run.x0_norm2;
  for (const auto& rec : run.intervals) {
    const double target = std::pow(delta, rec.k) * run.x0_norm2;
    // The sampled moments are heavy tailed and biased low at moderate path
    // counts, so the exact transfer values must meet the targets as well.
    if (rec.second_moment > target + 3.0 * rec.second_moment_se + 1e-14 ||
        rec.exact_second_moment > target * (1.0 + 1e-10) + 1e-14) {
      ++v.decay_violations;
    }
    if (rec.cumulative_energy >
            v.energy_bound + 3.0 * rec.cumulative_energy_se + 1e-14 ||
        rec.exact_cumulative_energy > v.energy_bound * (1.0 + 1e-10) + 1e-14) {
      ++v.energy_violations;
    }
  }
  v.slope_pass = run.decay_slope <= std::log(delta) + 3.0 * run.decay_slope_se;
  return v;
}

FeedbackRun run_riccati_feedback(const StochasticSystem& sys,
                                 const Eigen::MatrixXd& F,
                                 const Eigen::VectorXd& x0, double t_max,
                                 double dt_report, double delta) {
  require_valid(sys);
  if (!F.allFinite() || F.rows() != sys.m || F.cols() != sys.n) {
    throw std::invalid_argument("run_riccati_feedback: F must be finite m x n");
  }
  if (x0.size() != sys.n) {
    throw std::invalid_argument("run_riccati_feedback: x0 must have size n");
  }
  if (!(t_max > 0.0) || !(dt_report > 0.0)) {
    throw std::invalid_argument("run_riccati_feedback: need t_max, dt > 0");
  }
  const int n = sys.n;
  const MomentGenerator gen = build_generator(sys, F);
  FeedbackRun run;
  run.abscissa = spectral_abscissa(gen);
  run.diverges = !(run.abscissa < 0.0);

  const Eigen::MatrixXd weight =
      Eigen::MatrixXd::Identity(n, n) + F.transpose() * F;
  const Eigen::RowVectorXd w = vec(weight).transpose();
  const Eigen::RowVectorXd wu = vec(F.transpose() * F).transpose();

  // Inner steps keep h |L| small so Simpson is accurate far below 1e-4.
  const double Lnorm = std::max(gen.L.norm(), 1e-12);
  const int sub = std::max(1, static_cast<int>(std::ceil(dt_report * Lnorm / 0.1)));
  const double h = dt_report / sub;
  const Eigen::MatrixXd half = (0.5 * h * gen.L).exp();

  Eigen::VectorXd v = vec(x0 * x0.transpose());
  auto record = [&](double t, const Eigen::VectorXd& x) {
    run.curve.push_back({t, unvec(x, n).trace(), wu.dot(x)});
  };
  record(0.0, v);

  std::optional<Eigen::PartialPivLU<Eigen::MatrixXd>> inv;
  if (!run.diverges) inv.emplace(-gen.L);

  double t = 0.0;
  double quad = 0.0;
  long long steps = 0;
  const long long max_steps = 50'000'000;
  for (;;) {
    const Eigen::VectorXd mid = half * v;
    const Eigen::VectorXd nxt = half * mid;
    quad += h / 6.0 * (w.dot(v) + 4.0 * w.dot(mid) + w.dot(nxt));
    v = nxt;
    ++steps;
    t = static_cast<double>(steps) * h;
    if (steps % sub == 0 && t <= t_max * (1.0 + 1e-12)) record(t, v);
    if (t >= t_max * (1.0 - 1e-12)) {
      if (run.diverges) break;
      const double tail = w.dot(inv->solve(v));
      if (tail <= 1e-4 * (quad + tail) || steps >= max_steps) {
        run.tail = tail;
        break;
      }
    }
  }
  run.t_end = t;
  run.quadrature = quad;
  run.cost = run.diverges ? kInf : quad + run.tail;

  if (!run.diverges && delta > 0.0 && delta < 1.0) {
    FeedbackControllability fc;
    fc.delta = delta;
    fc.alpha = -0.5 * run.abscissa;
    // c(alpha) = sup_t e^{alpha t} lambda_max(S_F(t)), sampled until the
    // product has decayed well below its running maximum.
    const double hs = std::min(0.01 / fc.alpha, 0.01);
    const Eigen::MatrixXd Et = (hs * gen.L.transpose()).exp();
    Eigen::VectorXd s = vec(Eigen::MatrixXd::Identity(n, n));
    double best = 1.0;
    for (int j = 1; j < 200000; ++j) {
      s = Et * s;
      const double tj = j * hs;
      const double val = std::exp(fc.alpha * tj) * top_eigenvalue(unvec(s, n));
      best = std::max(best, val);
      if (fc.alpha * tj > 30.0 && val < 1e-6 * best) break;
    }
    fc.c_alpha = best;
    fc.T_delta = std::log(fc.c_alpha / delta) / fc.alpha;

    // Exact moments on [0, T(delta)] by Simpson on a fine grid.
    const int m = 2000;
    const double hh = fc.T_delta / m;
    const Eigen::MatrixXd hstep = (0.5 * hh * gen.L).exp();
    Eigen::VectorXd xv = vec(x0 * x0.transpose());
    double e = 0.0;
    for (int j = 0; j < m; ++j) {
      const Eigen::VectorXd mid = hstep * xv;
      const Eigen::VectorXd nxt = hstep * mid;
      e += hh / 6.0 * (wu.dot(xv) + 4.0 * wu.dot(mid) + wu.dot(nxt));
      xv = nxt;
    }
    const double x2 = x0.squaredNorm();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(F);
    const double f2 = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    fc.control_energy = e;
    fc.control_bound = f2 * f2 * fc.c_alpha / fc.alpha *
                       (1.0 - std::exp(-fc.alpha * fc.T_delta)) * x2;
    fc.terminal_second_moment = unvec(xv, n).trace();
    fc.pass = fc.control_energy <= fc.control_bound * (1.0 + 1e-9) + 1e-14 &&
              fc.terminal_second_moment <= delta * x2 * (1.0 + 1e-9) + 1e-14;
    run.controllability = fc;
  }
  return run;
}

ControlKernel build_kernel(const NoiseTree& tree, const StochasticSystem& sys,
                           double c, double delta, Eigen::Index max_dense_dim) {
  if (sys.n * tree.leaf_count() <= max_dense_dim) {
    const ObservabilityForms forms = assemble_forms(tree, sys, max_dense_dim);
    return control_kernel(tree, sys, c, delta, forms);
  }
  return control_kernel_recursive(tree, sys, c, delta);
}

IntervalTransfer interval_transfer(const NoiseTree& tree,
                                   const StochasticSystem& sys,
                                   const ControlKernel& kernel) {
  if (static_cast<Eigen::Index>(kernel.gains.size()) != tree.internal_count()) {
    throw std::invalid_argument("interval_transfer: kernel does not match tree");
  }
  const int n = sys.n;
  const NoiseStep& step = tree.step();
  const double dt = tree.delta_t();
  IntervalTransfer tr;
  tr.moment = Eigen::MatrixXd::Zero(n * n, n * n);
  tr.energy = Eigen::RowVectorXd::Zero(n * n);

  std::vector<Eigen::MatrixXd> G(step.branching()), H(step.branching());
  for (int k = 0; k < step.branching(); ++k) {
    G[k] = Eigen::MatrixXd::Identity(n, n) + dt * sys.A;
    H[k] = dt * sys.B;
    for (int i = 0; i < sys.d; ++i) {
      G[k] += step.increments(k, i) * sys.C[i];
      H[k] += step.increments(k, i) * sys.D[i];
    }
  }
  // State map x_s -> x(node) for every node, by depth.
  std::vector<Eigen::MatrixXd> phi(tree.node_count());
  phi[0] = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index node = 0; node < tree.internal_count(); ++node) {
    const Eigen::MatrixXd& g = kernel.gains[node];
    tr.energy += dt * tree.prob(node) * vec(g.transpose() * g).transpose();
    const Eigen::Index c0 = tree.first_child(node);
    for (int k = 0; k < step.branching(); ++k) {
      phi[c0 + k] = G[k] * phi[node] + H[k] * g;
    }
  }
  for (Eigen::Index node = tree.internal_count(); node < tree.node_count();
       ++node) {
    tr.moment += tree.prob(node) *
                 Eigen::kroneckerProduct(phi[node], phi[node]).eval();
  }
  return tr;
}

EquivalenceReport equivalence_harness(const StochasticSystem& sys,
                                      const EquivalenceOptions& opts) {
  require_valid(sys);
  if (opts.T_grid.empty() || opts.delta_grid.empty()) {
    throw std::invalid_argument("equivalence_harness: empty grid");
  }
  for (double d : opts.delta_grid) {
    if (!(d > 0.0 && d < 1.0)) {
      throw std::invalid_argument("equivalence_harness: delta must be in (0,1)");
    }
  }
  for (double T : opts.T_grid) {
    if (!(T > 0.0)) throw std::invalid_argument("equivalence_harness: T <= 0");
  }

  EquivalenceReport rep;
  if (noise_free(sys)) rep.hautus = hautus_stabilizability(sys.A, sys.B);

  const SareResult sare = solve_sare(sys, opts.sare);
  if (const auto* sol = std::get_if<RiccatiSolution>(&sare)) {
    rep.riccati_solvable = true;
    rep.closed_loop_abscissa = sol->closed_loop_abscissa;
    rep.feedback_stabilizable = sol->closed_loop_abscissa < 0.0;
  } else {
    rep.riccati_note = std::get<NotSolvable>(sare).reason;
  }

  auto observe_grid = [&](int K) {
    rep.K_used = K;
    rep.weakly_observable = false;
    rep.null_controllable = false;
    rep.theorem51.reset();
    rep.rho = std::numeric_limits<double>::quiet_NaN();
    rep.c_opt = std::numeric_limits<double>::infinity();
    for (double T : opts.T_grid) {
      for (double delta : opts.delta_grid) {
        ObservabilityQuery q{opts.driver, HorizonConfig(T, K), delta,
                             Route::kAuto, opts.max_dense_dim, opts.max_leaves};
        const ObservabilityReport obs = observe(sys, q);
        if (!obs.observable) continue;
        rep.weakly_observable = true;
        rep.grid_T = T;
        rep.grid_delta = delta;
        rep.c_opt = obs.c_opt;
        const Theorem51Report t51 = verify_theorem_5_1(sys, q);
        rep.null_controllable = t51.applicable && t51.forward_pass;
        rep.theorem51 = t51;

        const NoiseTree tree = build_tree(q.driver, q.horizon, sys.d, q.max_leaves);
        const ControlKernel kernel =
            build_kernel(tree, sys, t51.c_used, delta, opts.max_dense_dim);
        const IntervalTransfer tr = interval_transfer(tree, sys, kernel);
        Eigen::EigenSolver<Eigen::MatrixXd> es(tr.moment, false);
        rep.rho = es.eigenvalues().cwiseAbs().maxCoeff();
        return;
      }
    }
  };

  observe_grid(opts.K);
  const bool ab = rep.riccati_solvable && rep.feedback_stabilizable;
  if (ab && !(rep.weakly_observable && rep.null_controllable)) {
    rep.refined = true;
    observe_grid(2 * opts.K);
  }
  rep.agreement = rep.riccati_solvable == rep.feedback_stabilizable &&
                  rep.feedback_stabilizable == rep.weakly_observable &&
                  rep.weakly_observable == rep.null_controllable;
  return rep;
}

}  // namespace stochobs
