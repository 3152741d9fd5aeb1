#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stochobs/core_model.hpp"
#include "stochobs/observability.hpp"
#include "stochobs/tree.hpp"

namespace stochobs {

inline constexpr const char* kVersion = "0.1.0";

/// Malformed or inconsistent configuration. `key()` names the offending key
/// (empty when the problem is not tied to one key).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message),
        key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Artifact could not be written.
class IoFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parsed run configuration. The file format is one `key = value` per line,
/// `#` starts a comment. Lists are written `[a, b, c]` (brackets optional,
/// commas or blanks separate entries). Matrices are row-major lists whose
/// shape follows from n, m, d:
///
///   A: n x n, B: n x m, C1..Cd: n x n, D1..Dd: n x m.
///
/// C_i and D_i default to zero when omitted.
struct RunConfig {
  std::string name = "run";
  StochasticSystem system;
  HorizonConfig horizon;
  TreeDriver driver = TreeDriver::bernoulli();
  double delta = 0.5;
  std::vector<double> delta_grid;  // empty: use delta
  std::vector<double> T_grid;      // empty: use horizon.T
  std::vector<TreeDriver> drivers{TreeDriver::bernoulli(),
                                  TreeDriver::trinomial(),
                                  TreeDriver::quantized_gaussian(3)};
  std::vector<int> K_list{4, 6, 8};
  std::uint64_t seed = 20240607;
  int paths = 10000;
  int k_max = 5;
  Eigen::VectorXd x0;  // default: all ones
  double t_max = 10.0;
  double dt_report = 0.1;
  std::string output_dir = ".";
  std::size_t max_leaves = kDefaultMaxLeaves;
  Eigen::Index max_dense_dim = kDefaultMaxDenseDim;
  std::string source;  // raw text, hashed into the provenance block
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// STOCHOBS_MAX_LEAVES and STOCHOBS_MAX_DENSE_DIM override the caps.
void apply_env_overrides(RunConfig& cfg);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a64_hex(const std::string& bytes);

/// Writes S1.cfg, S2.cfg, S3.cfg, S4.cfg and M0.cfg into `dir` (created if
/// missing). Output is byte-stable. Throws IoFailure.
std::vector<std::filesystem::path> emit_corpus(
    const std::filesystem::path& dir);

/// Text of a bundled corpus config ("S1".."S4", "M0").
std::string corpus_config(const std::string& id);

/// Entry point of the `stochobs` tool. `args` includes the program name.
/// Exit status: 0 analysis completed, 1 invalid config or usage, 2 numerical
/// or I/O failure, 3 budget exceeded.
int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err);

}  // namespace stochobs
