#include "hgdlmm/bootstrap.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "hgdlmm/error.hpp"
#include "hgdlmm/threads.hpp"

namespace hgd {

void BootstrapConfig::validate() const {
  if (replicates < 2) throw ContractError("bootstrap needs at least 2 replicates");
  if (!(level > 0 && level < 1)) throw ContractError("interval level must lie in (0, 1)");
}

Eigen::VectorXd sample_cluster_weights(Index m, CounterRng& rng) {
  if (m < 1) throw ContractError("cluster weights need m >= 1");
  Eigen::VectorXd e(m);
  for (Index i = 0; i < m; ++i) e(i) = rng.exponential();
  return (e / e.sum()) * static_cast<double>(m);
}

FitResult<double> fit_weighted(const Dataset<double>& data, const Eigen::VectorXd& xi,
                               const FitConfig<double>& cfg) {
  return detail::run_mm(data, xi, cfg);
}

double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw ContractError("quantile of an empty sample");
  if (!(prob >= 0 && prob <= 1)) throw ContractError("quantile probability must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = static_cast<double>(values.size() - 1) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

Interval percentile_interval(const std::vector<double>& values, double level) {
  return {quantile(values, (1 - level) / 2), quantile(values, (1 + level) / 2)};
}

namespace {

template <typename Get>
Interval column_interval(std::size_t n, double level, Get get) {
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = get(k);
  return percentile_interval(v, level);
}

}  // namespace

BootstrapResult run_bootstrap(const Dataset<double>& data, const FitResult<double>& fit,
                              const BootstrapConfig& bcfg, const FitConfig<double>& base) {
  bcfg.validate();
  if (!fit.converged) throw ContractError("bootstrap requires a converged fit");
  FitConfig<double> cfg = warm_started(base, fit);
  cfg.gamma = fit.gamma;
  cfg.validate();

  const int B = bcfg.replicates;
  const Index m = data.m();
  std::vector<std::optional<FitResult<double>>> reps(static_cast<std::size_t>(B));
  const int nt = resolve_threads(bcfg.threads);
  (void)nt;
#pragma omp parallel for schedule(dynamic) num_threads(nt)
  for (int k = 0; k < B; ++k) {
    CounterRng rng(bcfg.seed, bcfg.identical_streams ? 0 : static_cast<std::uint64_t>(k));
    const Eigen::VectorXd xi = sample_cluster_weights(m, rng);
    try {
      FitResult<double> f = fit_weighted(data, xi, cfg);
      if (f.converged) reps[static_cast<std::size_t>(k)] = std::move(f);
    } catch (const Error&) {
    }
  }

  BootstrapResult out;
  out.requested = B;
  out.level = bcfg.level;
  out.gamma = fit.gamma;
  for (int k = 0; k < B; ++k)
    if (reps[static_cast<std::size_t>(k)]) out.replicate_ids.push_back(k);
  out.dropped = B - static_cast<int>(out.replicate_ids.size());
  if (out.dropped * 5 > B || out.replicate_ids.size() < 2) {
    std::ostringstream os;
    os << out.dropped << " of " << B
       << " bootstrap replicates failed to converge; inspect the data or the fit settings";
    throw ConvergenceError(os.str());
  }

  const auto K = out.replicate_ids.size();
  const Index p = data.p();
  const Index q = data.q();
  const Index nv = q * (q + 1) / 2;
  out.beta_draws.resize(static_cast<Index>(K), p);
  out.sigma2_draws.resize(static_cast<Index>(K));
  out.R_draws.resize(static_cast<Index>(K), nv);
  out.ranef_draws.reserve(K);
  for (std::size_t r = 0; r < K; ++r) {
    const auto& f = *reps[static_cast<std::size_t>(out.replicate_ids[r])];
    const auto row = static_cast<Index>(r);
    out.beta_draws.row(row) = f.params.beta().transpose();
    out.sigma2_draws(row) = f.params.sigma2();
    out.R_draws.row(row) = vech(f.params.R()).transpose();
    out.ranef_draws.push_back(f.ranef.b);
  }

  const double lv = bcfg.level;
  for (Index j = 0; j < p; ++j)
    out.beta_ci.push_back(column_interval(K, lv, [&](std::size_t r) {
      return out.beta_draws(static_cast<Index>(r), j);
    }));
  out.sigma2_ci = column_interval(K, lv, [&](std::size_t r) {
    return out.sigma2_draws(static_cast<Index>(r));
  });
  for (Index j = 0; j < nv; ++j)
    out.R_ci.push_back(column_interval(K, lv, [&](std::size_t r) {
      return out.R_draws(static_cast<Index>(r), j);
    }));
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < q; ++j)
      out.ranef_ci.push_back(column_interval(K, lv, [&](std::size_t r) {
        return out.ranef_draws[r](i, j);
      }));
  return out;
}

}  // namespace hgd
