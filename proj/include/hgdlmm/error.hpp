#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace hgd {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind { usage, data, numerical, convergence };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

/// Malformed input: shapes, parse failures, rank-deficient designs.
class DataError : public Error {
public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Caller broke an operation's precondition (e.g. gamma = 0 passed to the divergence).
class ContractError : public Error {
public:
  explicit ContractError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

/// A factorization or solve failed. Carries the offending cluster id when there is one.
class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& what, std::string cluster_id = {})
      : Error(ErrorKind::numerical,
              cluster_id.empty() ? what : what + " (cluster '" + cluster_id + "')"),
        cluster_id_(std::move(cluster_id)) {}
  const std::string& cluster_id() const noexcept { return cluster_id_; }

private:
  std::string cluster_id_;
};

class ConvergenceError : public Error {
public:
  explicit ConvergenceError(const std::string& what) : Error(ErrorKind::convergence, what) {}
};

}  // namespace hgd
