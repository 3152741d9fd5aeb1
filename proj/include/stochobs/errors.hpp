#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stochobs {

/// An eigen-decomposition, factorization or linear solve did not succeed.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A requested tree or matrix exceeds the configured size cap.
class BudgetExceeded : public std::runtime_error {
 public:
  BudgetExceeded(const std::string& what, std::size_t requested,
                 std::size_t limit)
      : std::runtime_error(what + ": requested " + std::to_string(requested) +
                           ", limit " + std::to_string(limit)),
        requested_(requested),
        limit_(limit) {}

  std::size_t requested() const { return requested_; }
  std::size_t limit() const { return limit_; }

 private:
  std::size_t requested_;
  std::size_t limit_;
};

}  // namespace stochobs
