#include "oracles.hpp"

#include <cmath>
#include <limits>

namespace oracle {

StochasticSystem scalar(double a, double b, double c, double e) {
  auto s = StochasticSystem::Zero(1, 1, 1);
  s.A(0, 0) = a;
  s.B(0, 0) = b;
  s.C[0](0, 0) = c;
  s.D[0](0, 0) = e;
  return s;
}

StochasticSystem s1() { return scalar(0, 1, 0, 0); }
StochasticSystem s2() { return scalar(0, 1, 1, 0); }
StochasticSystem s3() { return scalar(1, 0, 0, 0); }

StochasticSystem s4() {
  auto s = StochasticSystem::Zero(2, 1, 1);
  s.A << 0, 1, 0, 0;
  s.B << 0, 1;
  s.C[0] = 0.2 * Eigen::Matrix2d::Identity();
  s.D[0] << 0, 0.1;
  return s;
}

StochasticSystem martingale(int n) {
  auto s = StochasticSystem::Zero(n, n, 1);
  s.B.setIdentity();
  return s;
}

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, int rows, int cols,
                              double scale) {
  std::uniform_real_distribution<double> U(-scale, scale);
  Eigen::MatrixXd M(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) M(i, j) = U(rng);
  return M;
}

StochasticSystem random_system(std::mt19937_64& rng, int n, int m, int d,
                               double scale, double noise_scale) {
  auto s = StochasticSystem::Zero(n, m, d);
  s.A = random_matrix(rng, n, n, scale);
  s.B = random_matrix(rng, n, m, scale);
  for (int i = 0; i < d; ++i) {
    s.C[i] = random_matrix(rng, n, n, noise_scale);
    s.D[i] = random_matrix(rng, n, m, noise_scale);
  }
  return s;
}

Eigen::MatrixXd lift_by_basis(const StochasticSystem& sys,
                              const Eigen::MatrixXd& F) {
  const int n = sys.n;
  const Eigen::MatrixXd Abar = sys.A + sys.B * F;
  Eigen::MatrixXd L(n * n, n * n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      Eigen::MatrixXd E = Eigen::MatrixXd::Zero(n, n);
      E(i, j) = 1.0;
      Eigen::MatrixXd out = Abar * E + E * Abar.transpose();
      for (int k = 0; k < sys.d; ++k) {
        const Eigen::MatrixXd Cb = sys.C[k] + sys.D[k] * F;
        out += Cb * E * Cb.transpose();
      }
      L.col(i + j * n) = Eigen::Map<const Eigen::VectorXd>(out.data(), n * n);
    }
  }
  return L;
}

Eigen::MatrixXd expm_taylor(const Eigen::MatrixXd& M) {
  const double norm = M.cwiseAbs().colwise().sum().maxCoeff();
  int s = 0;
  if (norm > 0.5) s = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Eigen::MatrixXd X = M / std::ldexp(1.0, s);
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(M.rows(), M.cols());
  Eigen::MatrixXd sum = term;
  for (int k = 1; k <= 20; ++k) {
    term = term * X / k;
    sum += term;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum;
}

double closed_loop_cost(const StochasticSystem& sys, const Eigen::MatrixXd& F,
                        const Eigen::VectorXd& x0) {
  const int n = sys.n;
  const Eigen::MatrixXd L = lift_by_basis(sys, F);
  const Eigen::MatrixXd X0 = x0 * x0.transpose();
  const Eigen::VectorXd v0 = Eigen::Map<const Eigen::VectorXd>(X0.data(), n * n);
  const Eigen::VectorXd integral = L.fullPivLu().solve(-v0);
  const Eigen::MatrixXd W = Eigen::MatrixXd::Identity(n, n) + F.transpose() * F;
  const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(W.data(), n * n);
  return w.dot(integral);
}

std::optional<double> scalar_riccati(double a, double b, double c, double e) {
  auto g = [&](double P) {
    const double s = (b + c * e) * P;
    return (2 * a + c * c) * P + 1 - s * s / (1 + e * e * P);
  };
  double hi = 1.0;
  while (g(hi) > 0) {
    hi *= 2;
    if (hi > 1e12) return std::nullopt;
  }
  double lo = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Step make_step(int kind, double dt, int d) {
  std::vector<double> pts, pr;
  if (kind == 0) {
    pts = {-1, 1};
    pr = {0.5, 0.5};
  } else if (kind == 1) {
    pts = {-std::sqrt(3.0), 0, std::sqrt(3.0)};
    pr = {1.0 / 6, 2.0 / 3, 1.0 / 6};
  } else {
    const double r6 = std::sqrt(6.0);
    const double a = std::sqrt(3 + r6), b = std::sqrt(3 - r6);
    const double wa = (3 - r6) / 12, wb = (3 + r6) / 12;
    pts = {-a, -b, b, a};
    pr = {wa, wb, wb, wa};
  }
  const int s = static_cast<int>(pts.size());
  int branches = 1;
  for (int i = 0; i < d; ++i) branches *= s;
  Step st;
  st.dt = dt;
  for (int k = 0; k < branches; ++k) {
    Eigen::VectorXd xi(d);
    double p = 1.0;
    int rem = k;
    for (int i = d - 1; i >= 0; --i) {
      xi(i) = std::sqrt(dt) * pts[rem % s];
      p *= pr[rem % s];
      rem /= s;
    }
    st.xi.push_back(xi);
    st.p.push_back(p);
  }
  return st;
}

long node_index(const Path& path, int branching, int K) {
  (void)K;
  long begin = 0, width = 1;
  for (std::size_t t = 0; t < path.size(); ++t) {
    begin += width;
    width *= branching;
  }
  return begin + leaf_index(path, branching);
}

long leaf_index(const Path& path, int branching) {
  long idx = 0;
  for (int b : path) idx = idx * branching + b;
  return idx;
}

std::vector<Path> all_paths(int branching, int depth) {
  std::vector<Path> out{Path{}};
  for (int t = 0; t < depth; ++t) {
    std::vector<Path> next;
    for (const auto& p : out) {
      for (int b = 0; b < branching; ++b) {
        Path q = p;
        q.push_back(b);
        next.push_back(q);
      }
    }
    out.swap(next);
  }
  return out;
}

namespace {

Eigen::VectorXd euler(const StochasticSystem& sys, const Step& step,
                      const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                      int b) {
  Eigen::VectorXd next = x + step.dt * (sys.A * x + sys.B * u);
  for (int i = 0; i < sys.d; ++i) {
    next += step.xi[b](i) * (sys.C[i] * x + sys.D[i] * u);
  }
  return next;
}

BsdeNode combine(const StochasticSystem& sys, const Step& step,
                 const std::vector<Eigen::VectorXd>& ys) {
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(sys.n);
  std::vector<Eigen::VectorXd> Y(sys.d, Eigen::VectorXd::Zero(sys.n));
  for (std::size_t b = 0; b < ys.size(); ++b) {
    m1 += step.p[b] * ys[b];
    for (int i = 0; i < sys.d; ++i) Y[i] += step.p[b] * step.xi[b](i) / step.dt * ys[b];
  }
  BsdeNode node;
  node.y = m1 + step.dt * sys.A.transpose() * m1;
  node.z = sys.B.transpose() * m1;
  for (int i = 0; i < sys.d; ++i) {
    node.y += step.dt * sys.C[i].transpose() * Y[i];
    node.z += sys.D[i].transpose() * Y[i];
  }
  node.Y = Y;
  return node;
}

}  // namespace

Eigen::VectorXd forward_state(const StochasticSystem& sys, const Step& step,
                              const Eigen::VectorXd& x0, const NodeFn& u,
                              const Path& path) {
  Eigen::VectorXd x = x0;
  Path prefix;
  for (int b : path) {
    x = euler(sys, step, x, u(prefix), b);
    prefix.push_back(b);
  }
  return x;
}

BsdeNode bsde_node(const StochasticSystem& sys, const Step& step, int K,
                   const LeafFn& y1, const Path& path) {
  if (static_cast<int>(path.size()) == K) {
    BsdeNode leaf;
    leaf.y = y1(path);
    return leaf;
  }
  std::vector<Eigen::VectorXd> ys;
  for (std::size_t b = 0; b < step.p.size(); ++b) {
    Path child = path;
    child.push_back(static_cast<int>(b));
    ys.push_back(bsde_node(sys, step, K, y1, child).y);
  }
  return combine(sys, step, ys);
}

double path_prob(const Step& step, const Path& path) {
  double p = 1.0;
  for (int b : path) p *= step.p[b];
  return p;
}

namespace {

struct GapAcc {
  double terminal = 0.0;
  double output = 0.0;
};

Eigen::VectorXd gap_dfs(const StochasticSystem& sys, const Step& step, int K,
                        const NodeFn& u, const LeafFn& y1, Path& path,
                        const Eigen::VectorXd& x, double prob, GapAcc& acc) {
  if (static_cast<int>(path.size()) == K) {
    const Eigen::VectorXd y = y1(path);
    acc.terminal += prob * x.dot(y);
    return y;
  }
  const Eigen::VectorXd uu = u(path);
  std::vector<Eigen::VectorXd> ys;
  for (std::size_t b = 0; b < step.p.size(); ++b) {
    const Eigen::VectorXd xb = euler(sys, step, x, uu, static_cast<int>(b));
    path.push_back(static_cast<int>(b));
    ys.push_back(gap_dfs(sys, step, K, u, y1, path, xb, prob * step.p[b], acc));
    path.pop_back();
  }
  const BsdeNode node = combine(sys, step, ys);
  acc.output += prob * step.dt * uu.dot(node.z);
  return node.y;
}

}  // namespace

double duality_gap(const StochasticSystem& sys, const Step& step, int K,
                   const Eigen::VectorXd& x0, const NodeFn& u,
                   const LeafFn& y1) {
  GapAcc acc;
  Path path;
  const Eigen::VectorXd y0 = gap_dfs(sys, step, K, u, y1, path, x0, 1.0, acc);
  return acc.terminal - x0.dot(y0) - acc.output;
}

Forms brute_forms(const StochasticSystem& sys, const Step& step, int K) {
  const int n = sys.n;
  const int b = static_cast<int>(step.p.size());
  const auto leaves = all_paths(b, K);
  const long L = static_cast<long>(leaves.size());
  const long dim = n * L;
  std::vector<Path> internal;
  for (int t = 0; t < K; ++t)
    for (const auto& p : all_paths(b, t)) internal.push_back(p);

  Eigen::MatrixXd R(n, dim);
  Eigen::MatrixXd Z(sys.m * static_cast<long>(internal.size()), dim);
  for (long leaf = 0; leaf < L; ++leaf) {
    for (int comp = 0; comp < n; ++comp) {
      const long col = comp + n * leaf;
      LeafFn y1 = [&](const Path& p) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
        if (leaf_index(p, b) == leaf) v(comp) = 1.0;
        return v;
      };
      R.col(col) = bsde_node(sys, step, K, y1, Path{}).y;
      for (std::size_t k = 0; k < internal.size(); ++k) {
        const double w = std::sqrt(step.dt * path_prob(step, internal[k]));
        Z.block(sys.m * static_cast<long>(k), col, sys.m, 1) =
            w * bsde_node(sys, step, K, y1, internal[k]).z;
      }
    }
  }
  Forms f;
  f.M0 = R.transpose() * R;
  f.Q = Z.transpose() * Z;
  f.N.resize(dim);
  for (long leaf = 0; leaf < L; ++leaf)
    for (int comp = 0; comp < n; ++comp)
      f.N(comp + n * leaf) = path_prob(step, leaves[leaf]);
  return f;
}

double brute_c_opt(const Forms& f, double delta, double c_cap) {
  const Eigen::VectorXd s = f.N.cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd Qs = s.asDiagonal() * f.Q * s.asDiagonal();
  const Eigen::MatrixXd Ms = s.asDiagonal() * f.M0 * s.asDiagonal();
  const double scale = 1.0 + Qs.norm() + Ms.norm();
  auto feasible = [&](double c) {
    Eigen::MatrixXd W = c * Qs - Ms;
    W.diagonal().array() += delta;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0) >= -1e-13 * scale * (1.0 + c);
  };
  if (feasible(0.0)) return 0.0;
  if (!feasible(c_cap)) return std::numeric_limits<double>::infinity();
  double lo = 0.0, hi = c_cap;
  while (hi - lo > 1e-14 * hi) {
    const double mid = 0.5 * (lo + hi);
    (feasible(mid) ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace oracle
