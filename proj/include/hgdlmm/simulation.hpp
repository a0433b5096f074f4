#pragma once

// Contaminated LMM generator and the Monte-Carlo harness that scores estimators on it.
//
// y_ij = b0 + b1 x1 + b2 x2 + b3 x3 + u0_i + u1_i x2 + e_ij, covariates trivariate normal with
// unit variances and common correlation. e_ij ~ N(a, 1) with probability
// 2 c1 / (1 + exp(3 - x1)), else N(0, sigma^2); u_i ~ N((a, a), I) with probability c2,
// else N(0, R).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hgdlmm/bootstrap.hpp"
#include "hgdlmm/core.hpp"
#include "hgdlmm/estimator.hpp"
#include "hgdlmm/rng.hpp"
#include "hgdlmm/tuning.hpp"

namespace hgd {

struct ScenarioConfig {
  std::string code;  // S1..S9, or empty for a custom (c1, c2)
  int m = 50;
  double c1 = 0;
  double c2 = 0;
  double a = 10;
  Eigen::VectorXd beta_true = (Eigen::VectorXd(4) << 0.5, 0.3, 0.5, 0.8).finished();
  double sigma_true = 1.5;
  Eigen::MatrixXd R_true = (Eigen::MatrixXd(2, 2) << 1.0, 0.3, 0.3, 1.0).finished();
  double covariate_corr = 0.4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Contamination {
  double c1, c2;
};

/// S1..S9 -> (c1, c2) with c1, c2 in {0, 0.05, 0.1}.
Contamination scenario(std::string_view code);

/// Default config for a named scenario.
ScenarioConfig scenario_config(std::string_view code, int m, std::uint64_t seed);

/// 2 c1 / (1 + exp(3 - x1))
double contamination_prob_error(double x1, double c1);

/// Sizes 10, 15, 20, 25, 30, each used for a fifth of the clusters in that order. When m is
/// not a multiple of 5 each size is repeated ceil(m/5) times and the list truncated to m;
/// `warning` is then set.
std::vector<int> cluster_sizes(int m, std::string* warning = nullptr);

struct SimulatedData {
  Dataset<double> data;
  ModelParams<double> truth;
  RandomEffects<double> ranef;
  std::vector<std::vector<char>> error_outlier;  // per observation
  std::vector<char> ranef_outlier;               // per cluster
  std::string warning;
};

/// Columns of X: 1, x1, x2, x3. Columns of Z: 1, x2. Cluster ids "1".."m".
SimulatedData simulate_dataset(const ScenarioConfig& cfg, CounterRng& rng);

/// width + (2 / alpha) (shortfall below + excess above), alpha = 1 - level.
double interval_score(double lower, double upper, double truth, double level);

struct Method {
  enum class Kind { ml, hgd, ahgd, truth };
  Kind kind = Kind::ml;
  double gamma = 0;  // hgd only

  /// "ml", "hgd:<gamma>", "ahgd" or "truth" (returns the data-generating values).
  static Method parse(std::string_view text);
  std::string label() const;
};

std::vector<Method> parse_methods(std::string_view comma_list);

struct SimulationOptions {
  int replicates = 100;
  int bootstrap_replicates = 0;  // 0: no intervals
  double level = 0.95;
  FitConfig<double> fit;
  GammaGrid grid = GammaGrid::standard();
  int threads = 0;
};

struct ReplicateRecord {
  int replicate = 0;
  std::string method;
  bool ok = false;
  std::string failure;
  double gamma = 0;
  double mse_beta = 0, mse_sigma2 = 0, mse_R = 0, mse_ranef = 0;
  bool has_intervals = false;
  std::vector<Interval> beta_ci;
  std::vector<char> covered;
  std::vector<double> interval_score;
  int bootstrap_dropped = 0;
};

struct MethodSummary {
  std::string method;
  int attempted = 0;
  int failed = 0;
  int interval_replicates = 0;  // replicates contributing intervals
  double mse_beta = 0, mse_sigma2 = 0, mse_R = 0, mse_ranef = 0;
  std::vector<double> coverage;        // per beta element
  std::vector<double> interval_score;  // per beta element
  std::vector<double> gamma_selected;  // ahgd: per successful replicate
  double mean_gamma = 0;
};

struct ScenarioReport {
  ScenarioConfig config;
  SimulationOptions options;
  std::vector<MethodSummary> methods;
  std::vector<ReplicateRecord> records;  // replicate-major, then method order
  std::vector<std::string> warnings;

  const MethodSummary& summary(std::string_view label) const;
};

/// Replicate r draws its data from stream (seed, r); bootstrap weights are shared across
/// methods within a replicate. Failed fits are excluded from the averages and counted.
ScenarioReport run_scenario(const ScenarioConfig& cfg, const std::vector<Method>& methods,
                            const SimulationOptions& opts);

}  // namespace hgd
