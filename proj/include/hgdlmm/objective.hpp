#pragma once

// Hierarchical gamma-divergence
//
//   D_g(theta, b) = N/g log( 1/N sum_ij phi(y_ij; mu_ij, sigma2)^g ) + N(1+2g)/(2(1+g)) log sigma2
//                 + m/g log( 1/m sum_i phi_q(b_i; 0, R)^g )       + m(1+2g)/(2(1+g)) log det R
//                 - 1/2 sum_i log det Sigma_i
//
// its normalized powered-density weights, and the MM surrogate. All optional
// xi arguments are the cluster-level bootstrap weights; xi = 1 gives the
// plain objective. Powered densities are handled as g * log phi throughout.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "hgdlmm/core.hpp"

namespace hgd {

template <typename Scalar>
struct GammaConfig {
  Scalar gamma = 0;  // 0 is the maximum-likelihood limit

  explicit GammaConfig(Scalar g = Scalar(0)) : gamma(g) {
    if (!(g >= Scalar(0)) || !std::isfinite(static_cast<double>(g)))
      throw ContractError("gamma must be a finite nonnegative number");
  }
};

/// w_ij (ragged, one vector per cluster) sums to N; u_i sums to m.
template <typename Scalar>
struct DensityWeights {
  std::vector<VectorX<Scalar>> w;
  VectorX<Scalar> u;
};

/// Every compute_weights() call verifies its normalization and bumps these.
struct WeightCheckStats {
  std::atomic<std::uint64_t> checked{0};
  std::atomic<std::uint64_t> violations{0};
};

inline WeightCheckStats& weight_check_stats() {
  static WeightCheckStats stats;
  return stats;
}

namespace detail {

template <typename Scalar>
void check_ranef(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                 const RandomEffects<Scalar>& ranef) {
  if (ranef.m() != data.m() || ranef.q() != params.q())
    throw DataError("random effects have shape " + std::to_string(ranef.m()) + "x" +
                    std::to_string(ranef.q()) + ", expected " + std::to_string(data.m()) + "x" +
                    std::to_string(params.q()));
}

template <typename Scalar>
void check_xi(const Dataset<Scalar>& data, const VectorX<Scalar>& xi) {
  if (xi.size() != data.m())
    throw ContractError("cluster weights have length " + std::to_string(xi.size()) +
                        ", expected " + std::to_string(data.m()));
  if (!xi.allFinite() || (xi.array() < Scalar(0)).any() || !(xi.sum() > Scalar(0)))
    throw ContractError("cluster weights must be finite, nonnegative and not all zero");
}

/// Residuals and log densities at one (theta, b).
template <typename Scalar>
struct PointEval {
  std::vector<VectorX<Scalar>> resid;   // y_ij - x_ij'beta - z_ij'b_i
  std::vector<VectorX<Scalar>> logphi;  // log phi(y_ij; mu_ij, sigma2)
  VectorX<Scalar> logphi_q;             // log phi_q(b_i; 0, R)
  VectorX<Scalar> quad_q;               // b_i' R^{-1} b_i
  Scalar logdet_R = 0;
};

template <typename Scalar>
PointEval<Scalar> evaluate_point(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                                 const RandomEffects<Scalar>& ranef) {
  using std::log;
  check_ranef(data, params, ranef);
  const SpdFactor<Scalar> Rf(params.R());
  const Scalar s2 = params.sigma2();
  const Scalar half_log_2pi_s2 = Scalar(0.5) * (log_two_pi<Scalar>() + log(s2));
  PointEval<Scalar> pe;
  pe.resid.resize(static_cast<std::size_t>(data.m()));
  pe.logphi.resize(static_cast<std::size_t>(data.m()));
  pe.logphi_q.resize(data.m());
  pe.quad_q.resize(data.m());
  pe.logdet_R = Rf.logdet;
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    check_dims(c, params.p(), params.q());
    const auto k = static_cast<std::size_t>(i);
    pe.resid[k] = c.y - c.X * params.beta() - c.Z * ranef.b.row(i).transpose();
    pe.logphi[k] = (-half_log_2pi_s2 - pe.resid[k].array().square() / (Scalar(2) * s2)).matrix();
    const VectorX<Scalar> v = Rf.llt.matrixL().solve(VectorX<Scalar>(ranef.b.row(i).transpose()));
    pe.quad_q(i) = v.squaredNorm();
    pe.logphi_q(i) =
        -Scalar(0.5) * (Scalar(params.q()) * log_two_pi<Scalar>() + Rf.logdet + pe.quad_q(i));
  }
  return pe;
}

template <typename Scalar>
Scalar sum_logdet_sigma(const Dataset<Scalar>& data, const ModelParams<Scalar>& params) {
  Scalar s = 0;
  for (const auto& c : data) s += MarginalFactor<Scalar>(c, params.sigma2(), params.R()).logdet;
  return s;
}

/// log( (1/count) sum_k exp(a_k) ), tolerant of -inf entries and accurate when all a_k ~ 0.
template <typename Scalar>
Scalar log_mean_exp(const std::vector<Scalar>& a, Scalar count) {
  using std::exp;
  using std::log1p;
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (Scalar v : a) mx = v > mx ? v : mx;
  Scalar finite = 0;
  Scalar excess = 0;
  for (Scalar v : a) {
    if (v == -std::numeric_limits<Scalar>::infinity()) continue;
    finite += 1;
    excess += std::expm1(v - mx);
  }
  return mx + log1p((finite - count + excess) / count);
}

template <typename Scalar>
DensityWeights<Scalar> weights_from(const Dataset<Scalar>& data, const PointEval<Scalar>& pe,
                                    Scalar gamma, const VectorX<Scalar>& xi) {
  using std::exp;
  using std::log;
  const Scalar N = Scalar(data.N());
  const Scalar m = Scalar(data.m());
  DensityWeights<Scalar> dw;
  dw.w.resize(static_cast<std::size_t>(data.m()));
  dw.u.resize(data.m());

  if (gamma == Scalar(0)) {
    Scalar s_obs = 0;
    for (Index i = 0; i < data.m(); ++i) s_obs += xi(i) * Scalar(data[i].size());
    const Scalar s_cl = xi.sum();
    for (Index i = 0; i < data.m(); ++i) {
      dw.w[static_cast<std::size_t>(i)] = VectorX<Scalar>::Constant(data[i].size(), N * xi(i) / s_obs);
      dw.u(i) = m * xi(i) / s_cl;
    }
  } else {
    // log-sum-exp normalization of gamma * log phi + log xi
    const Scalar ninf = -std::numeric_limits<Scalar>::infinity();
    Scalar mx = ninf;
    Scalar mq = ninf;
    for (Index i = 0; i < data.m(); ++i) {
      if (xi(i) == Scalar(0)) continue;
      const Scalar lx = log(xi(i));
      mx = std::max(mx, gamma * pe.logphi[static_cast<std::size_t>(i)].maxCoeff() + lx);
      mq = std::max(mq, gamma * pe.logphi_q(i) + lx);
    }
    Scalar s_obs = 0;
    Scalar s_cl = 0;
    for (Index i = 0; i < data.m(); ++i) {
      auto& wi = dw.w[static_cast<std::size_t>(i)];
      if (xi(i) == Scalar(0)) {
        wi = VectorX<Scalar>::Zero(data[i].size());
        dw.u(i) = 0;
        continue;
      }
      const Scalar lx = log(xi(i));
      wi = (gamma * pe.logphi[static_cast<std::size_t>(i)].array() + (lx - mx)).exp().matrix();
      dw.u(i) = exp(gamma * pe.logphi_q(i) + lx - mq);
      s_obs += wi.sum();
      s_cl += dw.u(i);
    }
    for (auto& wi : dw.w) wi *= N / s_obs;
    dw.u *= m / s_cl;
  }

  auto& stats = weight_check_stats();
  Scalar total_w = 0;
  for (const auto& wi : dw.w) total_w += wi.sum();
  using std::abs;
  const bool ok = abs(total_w - N) <= Scalar(1e-8) * N && abs(dw.u.sum() - m) <= Scalar(1e-8) * m;
  stats.checked.fetch_add(1, std::memory_order_relaxed);
  if (!ok) {
    stats.violations.fetch_add(1, std::memory_order_relaxed);
    throw NumericalError("density weights lost their normalization");
  }
  return dw;
}

}  // namespace detail

template <typename Scalar>
VectorX<Scalar> unit_cluster_weights(const Dataset<Scalar>& data) {
  return VectorX<Scalar>::Ones(data.m());
}

/// Normalized powered-density weights at (theta, b).
template <typename Scalar>
DensityWeights<Scalar> compute_weights(const Dataset<Scalar>& data,
                                       const ModelParams<Scalar>& params,
                                       const RandomEffects<Scalar>& ranef,
                                       const GammaConfig<Scalar>& cfg, const VectorX<Scalar>& xi) {
  detail::check_xi(data, xi);
  return detail::weights_from(data, detail::evaluate_point(data, params, ranef), cfg.gamma, xi);
}

template <typename Scalar>
DensityWeights<Scalar> compute_weights(const Dataset<Scalar>& data,
                                       const ModelParams<Scalar>& params,
                                       const RandomEffects<Scalar>& ranef,
                                       const GammaConfig<Scalar>& cfg) {
  return compute_weights(data, params, ranef, cfg, unit_cluster_weights(data));
}

template <typename Scalar>
struct HgdTerms {
  Scalar response = 0;      // N/g log mean phi^g
  Scalar sigma2_term = 0;   // N(1+2g)/(2(1+g)) log sigma2
  Scalar ranef = 0;         // m/g log mean phi_q^g
  Scalar R_term = 0;        // m(1+2g)/(2(1+g)) log det R
  Scalar logdet_sigma = 0;  // -1/2 sum log det Sigma_i

  Scalar total() const { return response + sigma2_term + ranef + R_term + logdet_sigma; }
};

namespace detail {

template <typename Scalar>
HgdTerms<Scalar> hgd_terms(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                           const PointEval<Scalar>& pe, Scalar gamma, const VectorX<Scalar>& xi,
                           Scalar sum_logdet) {
  using std::log;
  const Scalar N = Scalar(data.N());
  const Scalar m = Scalar(data.m());
  const Scalar ninf = -std::numeric_limits<Scalar>::infinity();
  std::vector<Scalar> a;
  a.reserve(static_cast<std::size_t>(data.N()));
  std::vector<Scalar> aq;
  aq.reserve(static_cast<std::size_t>(data.m()));
  for (Index i = 0; i < data.m(); ++i) {
    const Scalar lx = xi(i) == Scalar(0) ? ninf : log(xi(i));
    for (Scalar l : pe.logphi[static_cast<std::size_t>(i)]) a.push_back(gamma * l + lx);
    aq.push_back(gamma * pe.logphi_q(i) + lx);
  }
  const Scalar ratio = (Scalar(1) + Scalar(2) * gamma) / (Scalar(2) * (Scalar(1) + gamma));
  HgdTerms<Scalar> t;
  t.response = N / gamma * log_mean_exp(a, N);
  t.sigma2_term = N * ratio * log(params.sigma2());
  t.ranef = m / gamma * log_mean_exp(aq, m);
  t.R_term = m * ratio * pe.logdet_R;
  t.logdet_sigma = -Scalar(0.5) * sum_logdet;
  return t;
}

/// gamma = 0 objective: L_J with the bootstrap-normalized weights (all ones when xi = 1).
template <typename Scalar>
Scalar weighted_joint_loglik(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                             const PointEval<Scalar>& pe, const VectorX<Scalar>& xi,
                             Scalar sum_logdet) {
  using std::log;
  const auto dw = weights_from(data, pe, Scalar(0), xi);
  Scalar total = 0;
  for (Index i = 0; i < data.m(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    total += dw.w[k].dot(pe.logphi[k]);
    total += dw.u(i) * pe.logphi_q(i);
  }
  total -= Scalar(0.5) * sum_logdet;
  total += Scalar(0.5) * Scalar(data.N()) * log(params.sigma2());
  total += Scalar(0.5) * Scalar(data.m()) * pe.logdet_R;
  return total;
}

}  // namespace detail

/// The five terms of D_g. Requires gamma > 0; the gamma = 0 limit is joint_modified_loglik.
template <typename Scalar>
HgdTerms<Scalar> evaluate_hgd_terms(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                                    const RandomEffects<Scalar>& ranef,
                                    const GammaConfig<Scalar>& cfg, const VectorX<Scalar>& xi) {
  if (!(cfg.gamma > Scalar(0)))
    throw ContractError(
        "evaluate_hgd requires gamma > 0; use joint_modified_loglik for the gamma = 0 limit");
  detail::check_xi(data, xi);
  const auto pe = detail::evaluate_point(data, params, ranef);
  return detail::hgd_terms(data, params, pe, cfg.gamma, xi,
                           detail::sum_logdet_sigma(data, params));
}

template <typename Scalar>
Scalar evaluate_hgd(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                    const RandomEffects<Scalar>& ranef, const GammaConfig<Scalar>& cfg,
                    const VectorX<Scalar>& xi) {
  return evaluate_hgd_terms(data, params, ranef, cfg, xi).total();
}

template <typename Scalar>
Scalar evaluate_hgd(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                    const RandomEffects<Scalar>& ranef, const GammaConfig<Scalar>& cfg) {
  return evaluate_hgd(data, params, ranef, cfg, unit_cluster_weights(data));
}

/// The quantity the fitter maximizes: D_g for gamma > 0, the (xi-weighted) L_J at gamma = 0.
template <typename Scalar>
Scalar objective_value(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                       const RandomEffects<Scalar>& ranef, const GammaConfig<Scalar>& cfg,
                       const VectorX<Scalar>& xi) {
  detail::check_xi(data, xi);
  const auto pe = detail::evaluate_point(data, params, ranef);
  const Scalar ld = detail::sum_logdet_sigma(data, params);
  if (cfg.gamma == Scalar(0)) return detail::weighted_joint_loglik(data, params, pe, xi, ld);
  return detail::hgd_terms(data, params, pe, cfg.gamma, xi, ld).total();
}

template <typename Scalar>
Scalar objective_value(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                       const RandomEffects<Scalar>& ranef, const GammaConfig<Scalar>& cfg) {
  return objective_value(data, params, ranef, cfg, unit_cluster_weights(data));
}

namespace detail {

template <typename Scalar>
Scalar surrogate_from(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                      const PointEval<Scalar>& pe, const DensityWeights<Scalar>& weights,
                      Scalar gamma, Scalar sum_logdet) {
  using std::log;
  Scalar wrss = 0;
  Scalar uquad = 0;
  for (Index i = 0; i < data.m(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    wrss += weights.w[k].dot(pe.resid[k].cwiseAbs2());
    uquad += weights.u(i) * pe.quad_q(i);
  }
  const Scalar shrink = gamma / (Scalar(2) * (Scalar(1) + gamma));
  return -wrss / (Scalar(2) * params.sigma2()) - Scalar(0.5) * uquad +
         Scalar(data.N()) * shrink * log(params.sigma2()) +
         Scalar(data.m()) * shrink * pe.logdet_R - Scalar(0.5) * sum_logdet;
}

}  // namespace detail

/// MM surrogate D_{g,M} built from weights frozen at an anchor, without its additive constant.
template <typename Scalar>
Scalar minorization_value(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                          const RandomEffects<Scalar>& ranef,
                          const DensityWeights<Scalar>& weights, const GammaConfig<Scalar>& cfg) {
  const auto pe = detail::evaluate_point(data, params, ranef);
  return detail::surrogate_from(data, params, pe, weights, cfg.gamma,
                                detail::sum_logdet_sigma(data, params));
}

}  // namespace hgd
