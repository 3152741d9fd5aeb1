#include "stochobs/cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stochobs/errors.hpp"
#include "stochobs/moment_lift.hpp"
#include "stochobs/null_control.hpp"
#include "stochobs/observability.hpp"
#include "stochobs/riccati.hpp"
#include "stochobs/stabilizer.hpp"

namespace stochobs {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') &&
      s.back() == s.front()) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

std::vector<std::string> split_list(const std::string& key,
                                    const std::string& value) {
  std::string body = trim(value);
  if (!body.empty() && body.front() == '[') {
    if (body.back() != ']') throw ConfigError(key, "unterminated list");
    body = body.substr(1, body.size() - 2);
  }
  std::vector<std::string> items;
  std::string cur;
  for (char ch : body) {
    if (ch == ',' || ch == ';' || std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) items.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) items.push_back(cur);
  return items;
}

double to_double(const std::string& key, const std::string& text) {
  const char* begin = text.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (text.empty() || end != begin + text.size() || errno == ERANGE ||
      !std::isfinite(v)) {
    throw ConfigError(key, "expected a finite number, got '" + text + "'");
  }
  return v;
}

long long to_integer(const std::string& key, const std::string& text) {
  const char* begin = text.c_str();
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(begin, &end, 10);
  if (text.empty() || end != begin + text.size() || errno == ERANGE) {
    throw ConfigError(key, "expected an integer, got '" + text + "'");
  }
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& text) {
  const char* begin = text.c_str();
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(begin, &end, 10);
  if (text.empty() || text.front() == '-' || end != begin + text.size() ||
      errno == ERANGE) {
    throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

std::vector<double> to_doubles(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const auto& item : split_list(key, value)) out.push_back(to_double(key, item));
  return out;
}

Eigen::MatrixXd to_matrix(const std::string& key, const std::string& value,
                          int rows, int cols) {
  const auto entries = to_doubles(key, value);
  const std::size_t expected = static_cast<std::size_t>(rows) * cols;
  if (entries.size() != expected) {
    throw ConfigError(key, "expected " + std::to_string(expected) +
                               " entries (" + std::to_string(rows) + " x " +
                               std::to_string(cols) + ", row-major), got " +
                               std::to_string(entries.size()));
  }
  Eigen::MatrixXd M(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) M(i, j) = entries[i * cols + j];
  return M;
}

TreeDriver to_driver(const std::string& key, const std::string& text) {
  try {
    return TreeDriver::parse(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

const std::set<std::string>& scalar_keys() {
  static const std::set<std::string> keys{
      "name",   "n",         "m",          "d",        "A",       "B",
      "T",      "K",         "driver",     "levels",   "delta",   "delta_grid",
      "T_grid", "drivers",   "K_list",     "seed",     "paths",   "k_max",
      "x0",     "t_max",     "dt_report",  "output_dir", "max_leaves",
      "max_dense_dim"};
  return keys;
}

bool is_noise_key(const std::string& key) {
  if (key.size() < 2 || (key[0] != 'C' && key[0] != 'D')) return false;
  return std::all_of(key.begin() + 1, key.end(),
                     [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); });
}

void check_delta(const std::string& key, double delta) {
  if (!(delta >= 0.0 && delta < 1.0)) {
    throw ConfigError(key, "must lie in [0, 1)");
  }
}

// ---- reporting helpers -------------------------------------------------

json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

json mat_json(const Eigen::MatrixXd& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < M.cols(); ++j) r.push_back(num(M(i, j)));
    rows.push_back(r);
  }
  return rows;
}

json bound_json(const BoundCheck& b) {
  return {{"value", num(b.value)}, {"bound", num(b.bound)}, {"pass", b.pass}};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string short_fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string route_name(bool dense) { return dense ? "dense" : "recursive"; }

bool noise_free(const StochasticSystem& sys) {
  for (const auto& C : sys.C)
    if (!C.isZero(0.0)) return false;
  for (const auto& D : sys.D)
    if (!D.isZero(0.0)) return false;
  return true;
}

ObservabilityQuery query_for(const RunConfig& cfg, double T, double delta) {
  ObservabilityQuery q;
  q.driver = cfg.driver;
  q.horizon = HorizonConfig(T, cfg.horizon.K);
  q.delta = delta;
  q.max_dense_dim = cfg.max_dense_dim;
  q.max_leaves = cfg.max_leaves;
  return q;
}

json theorem51_json(const Theorem51Report& r) {
  json cases = json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"index", c.index},
                     {"control_energy", num(c.control_energy)},
                     {"control_bound", num(c.control_bound)},
                     {"terminal_energy", num(c.terminal_energy)},
                     {"terminal_bound", num(c.terminal_bound)},
                     {"identity_error", num(c.identity_error)},
                     {"pass", c.pass}});
  }
  return {{"applicable", r.applicable},
          {"reason", r.reason},
          {"delta", num(r.delta)},
          {"T", num(r.T)},
          {"K", r.K},
          {"route", route_name(r.dense)},
          {"c_opt", num(r.c_opt)},
          {"c_used", num(r.c_used)},
          {"c0_tree", num(r.c0_tree)},
          {"c0_continuous", num(r.c0_continuous)},
          {"cases", cases},
          {"forward_pass", r.forward_pass},
          {"c_hat", num(r.c_hat)},
          {"c_hat_basis", num(r.c_hat_basis)},
          {"converse_c", num(r.converse_c)},
          {"converse_c_squared", num(r.converse_c_sq)},
          {"converse_delta", num(r.converse_delta)},
          {"converse_c_opt", num(r.converse_c_opt)},
          {"converse_pass", r.converse_pass},
          {"converse_squared_pass", r.converse_sq_pass}};
}

struct Outcome {
  json report;
  std::string verdict;
  std::vector<std::pair<std::string, std::string>> csvs;  // suffix, content
};

// ---- subcommands -------------------------------------------------------

Outcome cmd_validate(const RunConfig& cfg) {
  const auto& s = cfg.system;
  Outcome o;
  o.report = {{"valid", true},
              {"n", s.n},
              {"m", s.m},
              {"d", s.d},
              {"T", num(cfg.horizon.T)},
              {"K", cfg.horizon.K},
              {"driver", cfg.driver.name()},
              {"noise_free", noise_free(s)}};
  o.verdict = "valid: n=" + std::to_string(s.n) + " m=" + std::to_string(s.m) +
              " d=" + std::to_string(s.d);
  return o;
}

Outcome cmd_stability(const RunConfig& cfg) {
  const auto& sys = cfg.system;
  const double T = cfg.horizon.T;
  const auto gen = build_generator(sys);
  const double abscissa = spectral_abscissa(gen);
  const auto c0 = growth_constant_c0(sys, T);
  const auto step = make_noise_step(cfg.driver, cfg.horizon.delta_t(), sys.d);
  const Eigen::MatrixXd S_tree =
      tree_second_moment_transfer(step, sys, cfg.horizon.K);
  const Eigen::MatrixXd X0 = cfg.x0 * cfg.x0.transpose();
  const double exact_T = propagate_second_moment(gen, X0, T).trace();
  const double tree_T = cfg.x0.dot(S_tree * cfg.x0);

  std::ostringstream csv;
  csv << "t,value,stderr\n";
  const int points = static_cast<int>(std::floor(cfg.t_max / cfg.dt_report + 1e-9));
  for (int i = 0; i <= points; ++i) {
    const double t = i * cfg.dt_report;
    csv << fmt(t) << ',' << fmt(propagate_second_moment(gen, X0, t).trace())
        << ",0\n";
  }

  Outcome o;
  o.report = {{"abscissa", num(abscissa)},
              {"mean_square_stable", abscissa < 0},
              {"tau", num(T)},
              {"c0_continuous", num(c0.c0)},
              {"c0_tree", num(S_tree.eigenvalues().real().maxCoeff())},
              {"driver", cfg.driver.name()},
              {"K", cfg.horizon.K},
              {"second_moment_T", num(exact_T)},
              {"tree_second_moment_T", num(tree_T)},
              {"tree_relative_error",
               num(exact_T > 0 ? std::abs(tree_T - exact_T) / exact_T : 0.0)}};
  o.report["hautus"] = noise_free(sys)
                           ? json(hautus_stabilizability(sys.A, sys.B))
                           : json(nullptr);
  o.csvs.emplace_back("moment", csv.str());
  o.verdict = std::string("stability: ") +
              (abscissa < 0 ? "mean-square stable" : "not mean-square stable") +
              ", abscissa " + short_fmt(abscissa) + ", c0(" + short_fmt(T) +
              ") = " + short_fmt(c0.c0);
  return o;
}

Outcome cmd_riccati(const RunConfig& cfg, bool printed_form) {
  const auto& sys = cfg.system;
  SareOptions opts;
  opts.seed = cfg.seed;
  const auto result = solve_sare(sys, opts);
  Outcome o;
  o.report["hautus"] = noise_free(sys)
                           ? json(hautus_stabilizability(sys.A, sys.B))
                           : json(nullptr);
  if (const auto* sol = std::get_if<RiccatiSolution>(&result)) {
    o.report["solvable"] = true;
    o.report["P"] = mat_json(sol->P);
    o.report["F"] = mat_json(sol->F);
    o.report["residual"] = num(sol->residual);
    o.report["relative_residual"] = num(sol->relative_residual);
    o.report["iterations"] = sol->iterations;
    o.report["closed_loop_abscissa"] = num(sol->closed_loop_abscissa);
    o.report["x0"] = vec_json(cfg.x0);
    o.report["value"] = num(lq_value(sol->P, cfg.x0));
    if (printed_form) {
      o.report["printed_form_residual"] =
          num(riccati_residual(sys, sol->P, RiccatiForm::kPrinted));
    }
    o.verdict = "riccati: solvable, residual " + short_fmt(sol->residual) +
                ", <P x0, x0> = " + short_fmt(lq_value(sol->P, cfg.x0));
  } else {
    const auto& ns = std::get<NotSolvable>(result);
    o.report["solvable"] = false;
    o.report["reason"] = ns.reason;
    o.verdict = "riccati: not solvable (" + ns.reason + ")";
  }
  return o;
}

Outcome cmd_observe(const RunConfig& cfg) {
  const std::vector<double> deltas =
      cfg.delta_grid.empty() ? std::vector<double>{cfg.delta} : cfg.delta_grid;
  const std::vector<double> Ts =
      cfg.T_grid.empty() ? std::vector<double>{cfg.horizon.T} : cfg.T_grid;
  json records = json::array();
  int observable = 0;
  for (double T : Ts) {
    for (double delta : deltas) {
      const auto q = query_for(cfg, T, delta);
      const bool dense = resolve_route(q, cfg.system) == Route::kDense;
      const auto rep = observe(cfg.system, q);
      observable += rep.observable ? 1 : 0;
      records.push_back({{"driver", cfg.driver.name()},
                         {"K", cfg.horizon.K},
                         {"delta", num(delta)},
                         {"T", num(T)},
                         {"c_opt", num(rep.c_opt)},
                         {"observable", rep.observable},
                         {"route", route_name(dense)}});
    }
  }
  Outcome o;
  o.report = {{"records", records}};
  if (records.size() == 1) {
    const auto& r = records[0];
    o.verdict = std::string("observe: ") +
                (r["observable"].get<bool>() ? "delta-observable" : "not delta-observable") +
                ", c_opt = " +
                (r["c_opt"].is_string() ? r["c_opt"].get<std::string>()
                                        : short_fmt(r["c_opt"].get<double>()));
  } else {
    o.verdict = "observe: " + std::to_string(observable) + " of " +
                std::to_string(records.size()) + " grid points observable";
  }
  return o;
}

Outcome cmd_invariance(const RunConfig& cfg) {
  const auto table =
      invariance_experiment(cfg.system, cfg.horizon.T, cfg.delta, cfg.drivers,
                            cfg.K_list, cfg.max_dense_dim, cfg.max_leaves);
  json rows = json::array();
  std::ostringstream csv;
  csv << "driver,K,c_opt,observable,route\n";
  for (const auto& r : table.rows) {
    rows.push_back({{"driver", r.driver},
                    {"K", r.K},
                    {"delta", num(table.delta)},
                    {"T", num(table.T)},
                    {"c_opt", num(r.c_opt)},
                    {"observable", r.observable},
                    {"route", route_name(r.dense)}});
    csv << r.driver << ',' << r.K << ','
        << (std::isfinite(r.c_opt) ? fmt(r.c_opt) : std::string("inf")) << ','
        << (r.observable ? "true" : "false") << ',' << route_name(r.dense)
        << '\n';
  }
  json gaps = json::array();
  double last_gap = 0.0;
  for (const auto& g : table.gaps) {
    gaps.push_back({{"K", g.K}, {"max_relative_gap", num(g.max_relative_gap)}});
    last_gap = g.max_relative_gap;
  }
  Outcome o;
  o.report = {{"T", num(table.T)},
              {"delta", num(table.delta)},
              {"rows", rows},
              {"gaps", gaps},
              {"non_increasing", table.non_increasing}};
  o.csvs.emplace_back("invariance", csv.str());
  o.verdict = std::string("invariance: gaps ") +
              (table.non_increasing ? "non-increasing" : "increasing") +
              ", final max relative gap " + short_fmt(last_gap);
  return o;
}

Outcome cmd_synthesize(const RunConfig& cfg) {
  const auto& sys = cfg.system;
  const auto q = query_for(cfg, cfg.horizon.T, cfg.delta);
  const bool dense = resolve_route(q, sys) == Route::kDense;
  const auto tree = build_tree(cfg.driver, cfg.horizon, sys.d, cfg.max_leaves);
  Outcome o;
  ObservabilityReport rep;
  ObservabilityForms forms;
  if (dense) {
    forms = assemble_forms(tree, sys, cfg.max_dense_dim);
    rep = optimal_constant(forms, cfg.delta);
  } else {
    rep = optimal_constant_recursive(tree.step(), tree.K(), sys, cfg.delta);
  }
  o.report = {{"driver", cfg.driver.name()},
              {"K", cfg.horizon.K},
              {"T", num(cfg.horizon.T)},
              {"delta", num(cfg.delta)},
              {"route", route_name(dense)},
              {"c_opt", num(rep.c_opt)},
              {"observable", rep.observable}};
  if (!rep.observable) {
    o.verdict = "synthesize: not delta-observable, no control synthesized";
    return o;
  }
  const double c = rep.c_opt > 0 ? rep.c_opt : 1.0;
  const SynthesisResult s =
      dense ? synthesize_control(tree, sys, cfg.x0, c, cfg.delta, forms)
            : synthesize_control_recursive(tree, sys, cfg.x0, c, cfg.delta);
  auto margin = [](const BoundCheck& b) { return num(b.bound - b.value); };
  o.report["c"] = num(s.c);
  o.report["x_s"] = vec_json(s.x_s);
  o.report["control_energy"] = num(s.control_energy);
  o.report["terminal_energy"] = num(s.terminal_energy);
  o.report["f_energy"] = num(s.f_energy);
  o.report["c0_tree"] = num(s.c0_tree);
  o.report["c0_continuous"] = num(s.c0_continuous);
  o.report["terminal_identity_error"] = num(s.terminal_identity_error);
  o.report["control_identity_error"] = num(s.control_identity_error);
  o.report["energy_identity_error"] = num(s.energy_identity_error);
  o.report["bounds"] = {
      {"control", bound_json(s.control_bound)},
      {"control_continuous_c0", bound_json(s.control_bound_continuous)},
      {"terminal", bound_json(s.terminal_bound)},
      {"f", bound_json(s.f_bound)}};
  o.report["margins"] = {{"control", margin(s.control_bound)},
                         {"control_continuous_c0",
                          margin(s.control_bound_continuous)},
                         {"terminal", margin(s.terminal_bound)},
                         {"f", margin(s.f_bound)}};
  o.report["bounds_pass"] = s.bounds_pass();
  std::ostringstream csv;
  write_field_csv(csv, tree, s.u);
  o.csvs.emplace_back("control", csv.str());
  o.verdict = std::string("synthesize: bounds ") +
              (s.bounds_pass() ? "hold" : "violated") + ", control energy " +
              short_fmt(s.control_energy) + ", E|x_T|^2 = " +
              short_fmt(s.terminal_energy);
  return o;
}

Outcome cmd_theorem51(const RunConfig& cfg) {
  const auto r =
      verify_theorem_5_1(cfg.system, query_for(cfg, cfg.horizon.T, cfg.delta));
  Outcome o;
  o.report = theorem51_json(r);
  if (!r.applicable) {
    o.verdict = "theorem51: not applicable (" + r.reason + ")";
  } else {
    o.verdict = std::string("theorem51: forward ") +
                (r.forward_pass ? "pass" : "fail") + ", converse " +
                (r.converse_pass ? "pass" : "fail");
  }
  return o;
}

json feedback_json(const FeedbackRun& fr, double value) {
  json j = {{"abscissa", num(fr.abscissa)},
            {"diverges", fr.diverges},
            {"quadrature", num(fr.quadrature)},
            {"tail", num(fr.tail)},
            {"cost", num(fr.cost)},
            {"t_end", num(fr.t_end)}};
  if (std::isfinite(value)) {
    j["lq_value"] = num(value);
    j["relative_error"] =
        num(value != 0 ? std::abs(fr.cost - value) / std::abs(value) : 0.0);
  }
  if (fr.controllability) {
    const auto& c = *fr.controllability;
    j["controllability"] = {{"alpha", num(c.alpha)},
                            {"c_alpha", num(c.c_alpha)},
                            {"delta", num(c.delta)},
                            {"T_delta", num(c.T_delta)},
                            {"control_energy", num(c.control_energy)},
                            {"control_bound", num(c.control_bound)},
                            {"terminal_second_moment",
                             num(c.terminal_second_moment)},
                            {"pass", c.pass}};
  }
  return j;
}

Outcome cmd_stabilize(const RunConfig& cfg) {
  const auto& sys = cfg.system;
  Outcome o;

  // Riccati feedback route (F = 0 when no stabilizing solution exists).
  SareOptions opts;
  opts.seed = cfg.seed;
  const auto sare = solve_sare(sys, opts);
  Eigen::MatrixXd F = Eigen::MatrixXd::Zero(sys.m, sys.n);
  double value = std::numeric_limits<double>::quiet_NaN();
  if (const auto* sol = std::get_if<RiccatiSolution>(&sare)) {
    F = sol->F;
    value = lq_value(sol->P, cfg.x0);
  }
  const auto fr =
      run_riccati_feedback(sys, F, cfg.x0, cfg.t_max, cfg.dt_report, cfg.delta);
  o.report["feedback"] = feedback_json(fr, value);
  o.report["feedback"]["riccati_gain"] = std::isfinite(value);
  std::ostringstream fcsv;
  fcsv << "t,value,stderr,control\n";
  for (const auto& p : fr.curve) {
    fcsv << fmt(p.t) << ',' << fmt(p.second_moment) << ",0,"
         << fmt(p.control_moment) << '\n';
  }
  o.csvs.emplace_back("feedback", fcsv.str());

  // Piecewise null-control route.
  const auto q = query_for(cfg, cfg.horizon.T, cfg.delta);
  const auto rep = observe(sys, q);
  o.report["c_opt"] = num(rep.c_opt);
  o.report["observable"] = rep.observable;
  std::string piece = "not delta-observable";
  if (rep.observable) {
    const double c = rep.c_opt > 0 ? rep.c_opt : 1.0;
    const auto tree = build_tree(cfg.driver, cfg.horizon, sys.d, cfg.max_leaves);
    const auto kernel = build_kernel(tree, sys, c, cfg.delta, cfg.max_dense_dim);
    const auto run =
        run_piecewise(tree, sys, kernel, cfg.x0, cfg.k_max, cfg.paths, cfg.seed);
    const double c0 = tree_growth_constant(tree.step(), sys, tree.K());
    const auto v = check_piecewise(run, c0);
    json intervals = json::array();
    std::ostringstream csv;
    csv << "k,value,stderr,exact\n";
    for (const auto& r : run.intervals) {
      intervals.push_back(
          {{"k", r.k},
           {"second_moment", num(r.second_moment)},
           {"second_moment_se", num(r.second_moment_se)},
           {"exact_second_moment", num(r.exact_second_moment)},
           {"target", num(std::pow(run.delta, r.k) * run.x0_norm2)},
           {"control_energy", num(r.control_energy)},
           {"control_energy_se", num(r.control_energy_se)},
           {"exact_control_energy", num(r.exact_control_energy)},
           {"cumulative_energy", num(r.cumulative_energy)},
           {"cumulative_energy_se", num(r.cumulative_energy_se)},
           {"exact_cumulative_energy", num(r.exact_cumulative_energy)}});
      csv << r.k << ',' << fmt(r.second_moment) << ','
          << fmt(r.second_moment_se) << ',' << fmt(r.exact_second_moment)
          << '\n';
    }
    o.csvs.emplace_back("decay", csv.str());
    o.report["piecewise"] = {{"c", num(run.c)},
                             {"delta", num(run.delta)},
                             {"T", num(run.T)},
                             {"K", tree.K()},
                             {"driver", cfg.driver.name()},
                             {"paths", run.paths},
                             {"seed", run.seed},
                             {"c0_tree", num(c0)},
                             {"energy_bound", num(v.energy_bound)},
                             {"intervals", intervals},
                             {"decay_slope", num(run.decay_slope)},
                             {"decay_slope_se", num(run.decay_slope_se)},
                             {"log_delta", num(std::log(run.delta))},
                             {"decay_violations", v.decay_violations},
                             {"energy_violations", v.energy_violations},
                             {"slope_pass", v.slope_pass},
                             {"pass", v.pass()}};
    piece = v.pass() && v.slope_pass ? "piecewise pass" : "piecewise fail";
  }
  o.verdict = "stabilize: " + piece + ", feedback " +
              (fr.diverges ? std::string("diverges")
                           : "cost " + short_fmt(fr.cost));
  return o;
}

Outcome cmd_equivalence(const RunConfig& cfg) {
  EquivalenceOptions opts;
  if (!cfg.T_grid.empty()) opts.T_grid = cfg.T_grid;
  if (!cfg.delta_grid.empty()) opts.delta_grid = cfg.delta_grid;
  opts.K = cfg.horizon.K;
  opts.driver = cfg.driver;
  opts.max_dense_dim = cfg.max_dense_dim;
  opts.max_leaves = cfg.max_leaves;
  opts.sare.seed = cfg.seed;
  const auto r = equivalence_harness(cfg.system, opts);
  Outcome o;
  o.report = {{"riccati_solvable", r.riccati_solvable},
              {"feedback_stabilizable", r.feedback_stabilizable},
              {"weakly_observable", r.weakly_observable},
              {"null_controllable", r.null_controllable},
              {"agreement", r.agreement},
              {"K_used", r.K_used},
              {"refined", r.refined},
              {"closed_loop_abscissa", num(r.closed_loop_abscissa)},
              {"grid_T", num(r.grid_T)},
              {"grid_delta", num(r.grid_delta)},
              {"c_opt", num(r.c_opt)},
              {"rho", num(r.rho)},
              {"riccati_note", r.riccati_note}};
  o.report["hautus"] = r.hautus ? json(*r.hautus) : json(nullptr);
  o.report["theorem51"] = r.theorem51 ? theorem51_json(*r.theorem51) : json(nullptr);
  auto b = [](bool v) { return v ? "T" : "F"; };
  o.verdict = std::string("equivalence: (a)") + b(r.riccati_solvable) + " (b)" +
              b(r.feedback_stabilizable) + " (c)" + b(r.weakly_observable) +
              " (d)" + b(r.null_controllable) + ", agreement " +
              (r.agreement ? "true" : "false");
  return o;
}

std::string timestamp_utc() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoFailure("cannot open " + path.string() + " for writing");
  os << content;
  os.flush();
  if (!os) throw IoFailure("write to " + path.string() + " failed");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoFailure("cannot create directory " + dir.string() +
                    (ec ? ": " + ec.message() : std::string()));
  }
}

std::size_t env_cap(const char* name) {
  const char* raw = std::getenv(name);
  if (raw == nullptr) return 0;
  const std::string text = trim(raw);
  const long long v = to_integer(name, text);
  if (v < 1) throw ConfigError(name, "must be a positive integer");
  return static_cast<std::size_t>(v);
}

}  // namespace

// ---- config ------------------------------------------------------------

RunConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno),
                        "expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(lineno), "empty key");
    }
    if (!scalar_keys().count(key) && !is_noise_key(key)) {
      throw ConfigError(key, "unknown key");
    }
    if (value.empty()) throw ConfigError(key, "empty value");
    if (!kv.emplace(key, value).second) throw ConfigError(key, "duplicate key");
  }

  auto require = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(key, "missing required key");
    return it->second;
  };
  auto has = [&](const std::string& key) { return kv.count(key) > 0; };

  const long long n = to_integer("n", require("n"));
  const long long m = to_integer("m", require("m"));
  const long long d = to_integer("d", require("d"));
  if (n < 1 || n > 64) throw ConfigError("n", "must be in 1..64");
  if (m < 1 || m > 64) throw ConfigError("m", "must be in 1..64");
  if (d < 1 || d > 16) throw ConfigError("d", "must be in 1..16");

  RunConfig cfg;
  cfg.source = text;
  auto& sys = cfg.system;
  sys = StochasticSystem::Zero(static_cast<int>(n), static_cast<int>(m),
                               static_cast<int>(d));
  sys.A = to_matrix("A", require("A"), sys.n, sys.n);
  sys.B = to_matrix("B", require("B"), sys.n, sys.m);
  for (const auto& [key, value] : kv) {
    if (!is_noise_key(key)) continue;
    const long long i = to_integer(key, key.substr(1));
    if (i < 1 || i > d) {
      throw ConfigError(key, "unknown key (noise index must be in 1.." +
                                 std::to_string(d) + ")");
    }
    if (key[0] == 'C') {
      sys.C[i - 1] = to_matrix(key, value, sys.n, sys.n);
    } else {
      sys.D[i - 1] = to_matrix(key, value, sys.n, sys.m);
    }
  }

  if (has("name")) {
    cfg.name = unquote(kv["name"]);
    const bool ok = !cfg.name.empty() &&
                    std::all_of(cfg.name.begin(), cfg.name.end(), [](char ch) {
                      return std::isalnum(static_cast<unsigned char>(ch)) ||
                             ch == '_' || ch == '-' || ch == '.';
                    });
    if (!ok) throw ConfigError("name", "use letters, digits, '_', '-', '.'");
  }
  double T = 1.0;
  long long K = 6;
  if (has("T")) T = to_double("T", kv["T"]);
  if (has("K")) K = to_integer("K", kv["K"]);
  if (!(T > 0)) throw ConfigError("T", "must be positive");
  if (K < 1 || K > 64) throw ConfigError("K", "must be in 1..64");
  cfg.horizon = HorizonConfig(T, static_cast<int>(K));

  if (has("driver")) cfg.driver = to_driver("driver", unquote(kv["driver"]));
  if (has("levels")) {
    if (cfg.driver.kind != DriverKind::kQuantizedGaussian) {
      throw ConfigError("levels", "only valid with driver = quantized_gaussian");
    }
    const long long levels = to_integer("levels", kv["levels"]);
    try {
      cfg.driver = TreeDriver::quantized_gaussian(static_cast<int>(levels));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("levels", e.what());
    }
  }
  if (has("drivers")) {
    cfg.drivers.clear();
    for (const auto& item : split_list("drivers", kv["drivers"]))
      cfg.drivers.push_back(to_driver("drivers", unquote(item)));
    if (cfg.drivers.empty()) throw ConfigError("drivers", "empty list");
  }
  if (has("K_list")) {
    cfg.K_list.clear();
    for (const auto& item : split_list("K_list", kv["K_list"])) {
      const long long k = to_integer("K_list", item);
      if (k < 1 || k > 64) throw ConfigError("K_list", "entries must be in 1..64");
      cfg.K_list.push_back(static_cast<int>(k));
    }
    if (cfg.K_list.empty()) throw ConfigError("K_list", "empty list");
  }

  if (has("delta")) cfg.delta = to_double("delta", kv["delta"]);
  check_delta("delta", cfg.delta);
  if (has("delta_grid")) {
    cfg.delta_grid = to_doubles("delta_grid", kv["delta_grid"]);
    if (cfg.delta_grid.empty()) throw ConfigError("delta_grid", "empty list");
    for (double v : cfg.delta_grid) check_delta("delta_grid", v);
  }
  if (has("T_grid")) {
    cfg.T_grid = to_doubles("T_grid", kv["T_grid"]);
    if (cfg.T_grid.empty()) throw ConfigError("T_grid", "empty list");
    for (double v : cfg.T_grid)
      if (!(v > 0)) throw ConfigError("T_grid", "entries must be positive");
  }

  if (has("seed")) cfg.seed = to_u64("seed", kv["seed"]);
  if (has("paths")) {
    const long long p = to_integer("paths", kv["paths"]);
    if (p < 1 || p > 100000000) throw ConfigError("paths", "must be in 1..1e8");
    cfg.paths = static_cast<int>(p);
  }
  if (has("k_max")) {
    const long long k = to_integer("k_max", kv["k_max"]);
    if (k < 1 || k > 1000) throw ConfigError("k_max", "must be in 1..1000");
    cfg.k_max = static_cast<int>(k);
  }
  cfg.x0 = Eigen::VectorXd::Ones(sys.n);
  if (has("x0")) cfg.x0 = to_matrix("x0", kv["x0"], sys.n, 1);
  if (has("t_max")) cfg.t_max = to_double("t_max", kv["t_max"]);
  if (!(cfg.t_max > 0)) throw ConfigError("t_max", "must be positive");
  if (has("dt_report")) cfg.dt_report = to_double("dt_report", kv["dt_report"]);
  if (!(cfg.dt_report > 0) || cfg.dt_report > cfg.t_max) {
    throw ConfigError("dt_report", "must be positive and at most t_max");
  }
  if (has("output_dir")) cfg.output_dir = unquote(kv["output_dir"]);
  if (has("max_leaves")) {
    const long long v = to_integer("max_leaves", kv["max_leaves"]);
    if (v < 1) throw ConfigError("max_leaves", "must be positive");
    cfg.max_leaves = static_cast<std::size_t>(v);
  }
  if (has("max_dense_dim")) {
    const long long v = to_integer("max_dense_dim", kv["max_dense_dim"]);
    if (v < 1) throw ConfigError("max_dense_dim", "must be positive");
    cfg.max_dense_dim = static_cast<Eigen::Index>(v);
  }

  const auto violations = validate_system(sys);
  if (!violations.empty()) {
    std::string joined;
    for (const auto& v : violations) joined += (joined.empty() ? "" : "; ") + v;
    throw ConfigError("", joined);
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("", "cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

void apply_env_overrides(RunConfig& cfg) {
  if (const auto v = env_cap("STOCHOBS_MAX_LEAVES")) cfg.max_leaves = v;
  if (const auto v = env_cap("STOCHOBS_MAX_DENSE_DIM"))
    cfg.max_dense_dim = static_cast<Eigen::Index>(v);
}

std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---- corpus ------------------------------------------------------------

std::string corpus_config(const std::string& id) {
  static const std::map<std::string, std::string> corpus{
      {"S1",
       "# S1: controlled integrator dx = u dt, no noise.\n"
       "# Expected: Riccati solvable with P = 1, F = -1, cost from x0 = 1 equal\n"
       "# to 1; Hautus passes; weakly observable at T = 1, delta = 0.5;\n"
       "# equivalence verdicts all true.\n"
       "name = S1\n"
       "n = 1\nm = 1\nd = 1\n"
       "A = [0]\nB = [1]\nC1 = [0]\nD1 = [0]\n"
       "T = 1\nK = 6\ndriver = bernoulli\ndelta = 0.5\n"
       "x0 = [1]\nseed = 20240607\npaths = 10000\nk_max = 5\n"},
      {"S2",
       "# S2: dx = u dt + x dw.\n"
       "# Expected: P = (1 + sqrt 5)/2 = 1.6180339887, F = -P, closed-loop\n"
       "# abscissa -sqrt 5 = -2.236; c_opt(T = 1, delta = 0.5, K = 6) = 1.6302\n"
       "# for every driver; not observable at delta = 0 on the tree;\n"
       "# equivalence verdicts all true.\n"
       "name = S2\n"
       "n = 1\nm = 1\nd = 1\n"
       "A = [0]\nB = [1]\nC1 = [1]\nD1 = [0]\n"
       "T = 1\nK = 6\ndriver = bernoulli\ndelta = 0.5\n"
       "x0 = [1]\nseed = 20240607\npaths = 10000\nk_max = 5\n"},
      {"S3",
       "# S3: dx = x dt, control has no effect.\n"
       "# Expected: Riccati not solvable; Hautus fails; open-loop abscissa 2\n"
       "# (feedback F = 0 diverges); not delta-observable; equivalence\n"
       "# verdicts all false with agreement.\n"
       "name = S3\n"
       "n = 1\nm = 1\nd = 1\n"
       "A = [1]\nB = [0]\nC1 = [0]\nD1 = [0]\n"
       "T = 1\nK = 6\ndriver = bernoulli\ndelta = 0.5\n"
       "x0 = [1]\nseed = 20240607\npaths = 10000\nk_max = 5\n"},
      {"S4",
       "# S4: double integrator with state and control noise.\n"
       "# Expected: Riccati solvable; weakly observable at T = 1, delta = 0.5\n"
       "# (c_opt about 10.65 at K = 6); equivalence verdicts all true.\n"
       "name = S4\n"
       "n = 2\nm = 1\nd = 1\n"
       "A = [0, 1, 0, 0]\nB = [0, 1]\n"
       "C1 = [0.2, 0, 0, 0.2]\nD1 = [0, 0.1]\n"
       "T = 1\nK = 6\ndriver = bernoulli\ndelta = 0.5\n"
       "x0 = [1, 1]\nseed = 20240607\npaths = 10000\nk_max = 5\n"},
      {"M0",
       "# M0: martingale case dx = u dt with B = I, A = C = D = 0.\n"
       "# Expected: P = I (cost |x0|^2 = 2 from x0 = (1, 1)); c_opt = 1/T at\n"
       "# delta = 0 for every driver and K; equivalence verdicts all true.\n"
       "name = M0\n"
       "n = 2\nm = 2\nd = 1\n"
       "A = [0, 0, 0, 0]\nB = [1, 0, 0, 1]\n"
       "C1 = [0, 0, 0, 0]\nD1 = [0, 0, 0, 0]\n"
       "T = 1\nK = 6\ndriver = bernoulli\ndelta = 0.5\n"
       "x0 = [1, 1]\nseed = 20240607\npaths = 10000\nk_max = 5\n"},
  };
  auto it = corpus.find(id);
  if (it == corpus.end()) throw std::invalid_argument("unknown corpus id " + id);
  return it->second;
}

std::vector<fs::path> emit_corpus(const fs::path& dir) {
  ensure_dir(dir);
  std::vector<fs::path> files;
  for (const char* id : {"S1", "S2", "S3", "S4", "M0"}) {
    const fs::path p = dir / (std::string(id) + ".cfg");
    write_file(p, corpus_config(id));
    files.push_back(p);
  }
  return files;
}

// ---- entry point -------------------------------------------------------

int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err) {
  CLI::App app{"Observability, null controllability and stabilization of "
               "linear stochastic systems"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Spec {
    const char* name;
    const char* help;
  };
  const Spec specs[] = {
      {"validate", "parse and validate a config"},
      {"stability", "mean-square stability and growth constants"},
      {"riccati", "stabilizing solution of the stochastic Riccati equation"},
      {"observe", "optimal delta-observability constant on the tree"},
      {"invariance", "c_opt across drivers and depths"},
      {"synthesize", "null control synthesis from x0"},
      {"theorem51", "observability <=> null controllability check"},
      {"stabilize", "piecewise null-control and Riccati feedback runs"},
      {"equivalence", "four-way equivalence harness"},
  };
  std::string config_path;
  std::string output_dir;
  bool printed_form = false;
  std::map<std::string, CLI::App*> subs;
  for (const auto& s : specs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("config", config_path, "config file")->required();
    sub->add_option("-o,--output-dir", output_dir,
                    "directory for reports (overrides output_dir)");
    subs[s.name] = sub;
  }
  subs["riccati"]->add_flag("--printed-form", printed_form,
                            "also report the residual of the printed variant");
  std::string corpus_dir = "corpus";
  auto* corpus = app.add_subcommand("corpus", "write the bundled example configs");
  corpus->add_option("dir", corpus_dir, "output directory");

  std::vector<std::string> storage = args;
  if (storage.empty()) storage.push_back("stochobs");
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (corpus->parsed()) {
      const auto files = emit_corpus(corpus_dir);
      out << "corpus: " << files.size() << " config files written to "
          << corpus_dir << '\n';
      return 0;
    }
    std::string command;
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) command = name;

    RunConfig cfg = load_config(config_path);
    apply_env_overrides(cfg);
    if (!output_dir.empty()) cfg.output_dir = output_dir;

    Outcome o;
    if (command == "validate") o = cmd_validate(cfg);
    else if (command == "stability") o = cmd_stability(cfg);
    else if (command == "riccati") o = cmd_riccati(cfg, printed_form);
    else if (command == "observe") o = cmd_observe(cfg);
    else if (command == "invariance") o = cmd_invariance(cfg);
    else if (command == "synthesize") o = cmd_synthesize(cfg);
    else if (command == "theorem51") o = cmd_theorem51(cfg);
    else if (command == "stabilize") o = cmd_stabilize(cfg);
    else o = cmd_equivalence(cfg);

    const fs::path dir(cfg.output_dir);
    ensure_dir(dir);
    json artifacts = json::array();
    for (const auto& [suffix, content] : o.csvs) {
      const std::string file = cfg.name + "_" + suffix + ".csv";
      write_file(dir / file, content);
      artifacts.push_back(file);
    }
    const std::string report_file = cfg.name + "_" + command + ".json";
    json doc;
    doc["header"] = {{"timestamp", timestamp_utc()}};
    doc["provenance"] = {
        {"tool", "stochobs"},
        {"version", kVersion},
        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                      std::to_string(EIGEN_MAJOR_VERSION) + "." +
                      std::to_string(EIGEN_MINOR_VERSION)},
        {"config_name", cfg.name},
        {"config_hash", fnv1a64_hex(cfg.source)},
        {"seed", cfg.seed},
        {"max_leaves", cfg.max_leaves},
        {"max_dense_dim", cfg.max_dense_dim}};
    doc["command"] = command;
    doc["artifacts"] = artifacts;
    doc["report"] = o.report;
    write_file(dir / report_file, doc.dump(2) + "\n");
    out << o.verdict << '\n';
    return 0;
  } catch (const ConfigError& e) {
    err << "stochobs: invalid config: " << e.what() << '\n';
    return 1;
  } catch (const BudgetExceeded& e) {
    err << "stochobs: budget exceeded: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    err << "stochobs: invalid config: " << e.what() << '\n';
    return 1;
  } catch (const NumericalFailure& e) {
    err << "stochobs: numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const IoFailure& e) {
    err << "stochobs: i/o failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "stochobs: failure: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace stochobs
