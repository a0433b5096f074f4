#pragma once

// Clustered bootstrap: each replicate refits with cluster weights xi ~ m * Dirichlet(1,...,1)
// folded into the density-weight normalization, and intervals are read off the draws.

#include <cstdint>
#include <vector>

#include "hgdlmm/core.hpp"
#include "hgdlmm/estimator.hpp"
#include "hgdlmm/rng.hpp"

namespace hgd {

struct BootstrapConfig {
  int replicates = 500;
  double level = 0.95;
  std::uint64_t seed = 0;
  int threads = 0;                 // 0: HGDLMM_THREADS or all cores
  bool identical_streams = false;  // test hook: every replicate draws from stream 0

  void validate() const;
};

struct Interval {
  double lower = 0;
  double upper = 0;
};

struct BootstrapResult {
  Eigen::MatrixXd beta_draws;               // kept x p
  Eigen::VectorXd sigma2_draws;             // kept
  Eigen::MatrixXd R_draws;                  // kept x q(q+1)/2, vech order
  std::vector<Eigen::MatrixXd> ranef_draws; // kept entries, each m x q
  std::vector<int> replicate_ids;           // original replicate index of each kept draw

  std::vector<Interval> beta_ci;
  Interval sigma2_ci;
  std::vector<Interval> R_ci;      // vech order
  std::vector<Interval> ranef_ci;  // row-major over (cluster, component)

  int requested = 0;
  int dropped = 0;  // replicates that failed or did not converge
  double level = 0.95;
  double gamma = 0;
};

/// xi = m * E / sum(E) with E_i iid unit exponentials, so sum(xi) = m.
Eigen::VectorXd sample_cluster_weights(Index m, CounterRng& rng);

/// The MM fit with cluster weights xi (xi >= 0, sum xi = m).
FitResult<double> fit_weighted(const Dataset<double>& data, const Eigen::VectorXd& xi,
                               const FitConfig<double>& cfg);

/// Linear-interpolation sample quantile: with sorted x_(1..n), h = (n-1) p,
/// Q = x_(floor h) + (h - floor h)(x_(floor h + 1) - x_(floor h)), zero-based.
double quantile(std::vector<double> values, double prob);

/// ((1-level)/2, (1+level)/2) quantiles.
Interval percentile_interval(const std::vector<double>& values, double level);

/// Replicates run at fit.gamma, warm-started from fit. `base` supplies tol/max_iter.
/// More than 20% failed replicates is an error.
BootstrapResult run_bootstrap(const Dataset<double>& data, const FitResult<double>& fit,
                              const BootstrapConfig& bcfg, const FitConfig<double>& base = {});

}  // namespace hgd
