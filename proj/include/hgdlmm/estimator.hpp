#pragma once

// MM fitting of the hierarchical gamma-divergence.
//
// Each iteration freezes the density weights at the current point and then
// updates, in order, beta (weighted least squares), b (ridge solves per
// cluster, using the new beta), sigma2 and R (closed-form fixed-point steps
// evaluated with the previous-iteration marginal covariances). The variance
// step is accepted only if it does not decrease the surrogate; otherwise it
// is backtracked toward the previous values.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hgdlmm/core.hpp"
#include "hgdlmm/objective.hpp"

namespace hgd {

template <typename Scalar>
struct FitStart {
  ModelParams<Scalar> params;
  RandomEffects<Scalar> ranef;
};

/// none: one plain MM step per iteration. squarem: each iteration is a monotone
/// squared-extrapolation cycle over two such steps.
enum class Acceleration { none, squarem };

template <typename Scalar>
struct FitConfig {
  Scalar gamma = 0;
  Scalar tol = Scalar(1e-12);  // on |dD| / (1 + |D|)
  // Once the objective has settled, iteration continues until the scaled estimating
  // equations also hold to this level. Flat directions near a variance boundary can stall
  // the objective well before the parameters stop moving.
  Scalar stationarity_tol = Scalar(1e-7);
  int max_iter = 1000;
  std::optional<FitStart<Scalar>> start;  // empty: OLS initialization
  Acceleration acceleration = Acceleration::squarem;

  void validate() const {
    GammaConfig<Scalar> g(gamma);
    if (!(tol > Scalar(0))) throw ContractError("tolerance must be positive");
    if (max_iter < 1) throw ContractError("max_iter must be at least 1");
    if (!(stationarity_tol > Scalar(0))) throw ContractError("stationarity tolerance must be positive");
  }
};

template <typename Scalar>
struct FitResult {
  ModelParams<Scalar> params;
  RandomEffects<Scalar> ranef;
  DensityWeights<Scalar> weights;  // at the returned point
  std::vector<Scalar> objective_trace;
  int iterations = 0;
  bool converged = false;
  Scalar gamma = 0;
  int safeguarded_steps = 0;  // variance steps that were backtracked
};

namespace detail {

/// sum_i tr(Sigma_i^{-1}), sum_i Z_i' Sigma_i^{-1} Z_i and sum_i log det Sigma_i at (sigma2, R).
template <typename Scalar>
struct MarginalSummary {
  Scalar trace_inv = 0;
  MatrixX<Scalar> ZSZ;
  Scalar logdet = 0;

  MarginalSummary() = default;
  MarginalSummary(const Dataset<Scalar>& data, Scalar sigma2, const MatrixX<Scalar>& R)
      : ZSZ(MatrixX<Scalar>::Zero(R.rows(), R.cols())) {
    for (const auto& c : data) {
      const MarginalFactor<Scalar> f(c, sigma2, R);
      trace_inv += f.trace_inverse();
      ZSZ += f.project(c.Z);
      logdet += f.logdet;
    }
  }
};

template <typename Scalar>
VectorX<Scalar> solve_gram(const MatrixX<Scalar>& G, const VectorX<Scalar>& rhs, const char* what) {
  Eigen::LLT<MatrixX<Scalar>> llt(G);
  const Scalar scale = G.diagonal().cwiseAbs().maxCoeff();
  if (llt.info() != Eigen::Success || !(scale > Scalar(0)) ||
      !(llt.matrixLLT().diagonal().cwiseAbs2().minCoeff() > Scalar(1e-13) * scale))
    throw DataError(std::string(what) +
                    " is singular; remove collinear or constant covariates");
  return llt.solve(rhs);
}

}  // namespace detail

/// beta = OLS ignoring random effects, b = 0, sigma2 = residual mean square, R = s * I.
template <typename Scalar>
FitStart<Scalar> init_params(const Dataset<Scalar>& data) {
  const Index N = data.N();
  const Index p = data.p();
  MatrixX<Scalar> X(N, p);
  VectorX<Scalar> y(N);
  Index row = 0;
  for (const auto& c : data) {
    X.middleRows(row, c.size()) = c.X;
    y.segment(row, c.size()) = c.y;
    row += c.size();
  }
  Eigen::ColPivHouseholderQR<MatrixX<Scalar>> qr(X);
  if (qr.rank() < p)
    throw DataError("fixed-effect design is rank deficient (rank " + std::to_string(qr.rank()) +
                    " < p = " + std::to_string(p) + "); remove collinear covariates");
  VectorX<Scalar> beta = qr.solve(y);
  const VectorX<Scalar> e = y - X * beta;
  const Scalar dof = N > p ? Scalar(N - p) : Scalar(N);
  const Scalar sigma2 = std::max(e.squaredNorm() / dof, Scalar(1e-8));

  VectorX<Scalar> means(data.m());
  row = 0;
  for (Index i = 0; i < data.m(); ++i) {
    means(i) = e.segment(row, data[i].size()).mean();
    row += data[i].size();
  }
  Scalar var = 0;
  if (data.m() > 1) var = (means.array() - means.mean()).square().sum() / Scalar(data.m() - 1);
  var = std::max(var, Scalar(1e-4));
  return {ModelParams<Scalar>(std::move(beta), sigma2,
                              var * MatrixX<Scalar>::Identity(data.q(), data.q())),
          RandomEffects<Scalar>::zeros(data.m(), data.q())};
}

/// Weighted least squares on y_ij - z_ij' b_i.
template <typename Scalar>
VectorX<Scalar> update_beta(const Dataset<Scalar>& data, const RandomEffects<Scalar>& ranef,
                            const DensityWeights<Scalar>& weights) {
  MatrixX<Scalar> G = MatrixX<Scalar>::Zero(data.p(), data.p());
  VectorX<Scalar> rhs = VectorX<Scalar>::Zero(data.p());
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    const auto& w = weights.w[static_cast<std::size_t>(i)];
    G.noalias() += c.X.transpose() * w.asDiagonal() * c.X;
    rhs.noalias() += c.X.transpose() * (w.asDiagonal() * (c.y - c.Z * ranef.b.row(i).transpose()));
  }
  return detail::solve_gram(G, rhs, "weighted fixed-effect Gram matrix");
}

/// b_i = (Z' W Z + u_i sigma2 R^{-1})^{-1} Z' W (y - X beta), with sigma2 and R from params.
template <typename Scalar>
RandomEffects<Scalar> update_ranef(const Dataset<Scalar>& data, const VectorX<Scalar>& beta,
                                   const ModelParams<Scalar>& params,
                                   const DensityWeights<Scalar>& weights) {
  const MatrixX<Scalar> Rinv = detail::SpdFactor<Scalar>(params.R()).inverse();
  auto out = RandomEffects<Scalar>::zeros(data.m(), data.q());
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    const auto& w = weights.w[static_cast<std::size_t>(i)];
    const Scalar ui = weights.u(i);
    if (ui == Scalar(0) && (w.array() == Scalar(0)).all()) continue;  // cluster carries no weight
    MatrixX<Scalar> A = c.Z.transpose() * w.asDiagonal() * c.Z;
    A.noalias() += (ui * params.sigma2()) * Rinv;
    const VectorX<Scalar> rhs = c.Z.transpose() * (w.asDiagonal() * (c.y - c.X * beta));
    Eigen::LLT<MatrixX<Scalar>> llt(A);
    if (llt.info() != Eigen::Success)
      throw NumericalError("random-effect system is singular", c.id);
    out.b.row(i) = llt.solve(rhs).transpose();
  }
  return out;
}

template <typename Scalar>
struct VarianceUpdate {
  Scalar sigma2 = 0;
  MatrixX<Scalar> R;
  bool sigma2_feasible = true;  // false: fixed-point denominator <= 0, sigma2 left unchanged
  bool R_floored = false;       // an eigenvalue was raised to the floor
};

namespace detail {

template <typename Scalar>
VarianceUpdate<Scalar> variance_step(const Dataset<Scalar>& data, const VectorX<Scalar>& beta,
                                     const RandomEffects<Scalar>& ranef,
                                     const ModelParams<Scalar>& prev,
                                     const DensityWeights<Scalar>& weights, Scalar gamma,
                                     const MarginalSummary<Scalar>& summary) {
  const Scalar N = Scalar(data.N());
  const Scalar m = Scalar(data.m());
  VarianceUpdate<Scalar> out;

  Scalar wrss = 0;
  MatrixX<Scalar> S = MatrixX<Scalar>::Zero(data.q(), data.q());
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    const VectorX<Scalar> bi = ranef.b.row(i).transpose();
    const VectorX<Scalar> r = c.y - c.X * beta - c.Z * bi;
    wrss += weights.w[static_cast<std::size_t>(i)].dot(r.cwiseAbs2());
    S.noalias() += weights.u(i) * bi * bi.transpose();
  }
  const Scalar denom = prev.sigma2() * summary.trace_inv - N * gamma / (Scalar(1) + gamma);
  if (denom > Scalar(0) && wrss > Scalar(0)) {
    out.sigma2 = wrss / denom;
  } else {
    out.sigma2 = prev.sigma2();
    out.sigma2_feasible = false;
  }

  const MatrixX<Scalar>& Rp = prev.R();
  MatrixX<Scalar> R = (Scalar(1) + gamma) / m * (S - Rp * summary.ZSZ * Rp + m * Rp);
  R = ((R + R.transpose()) / Scalar(2)).eval();
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(R);
  const Scalar floor = Scalar(1e-8);
  if (eig.info() != Eigen::Success || !(eig.eigenvalues().minCoeff() >= floor)) {
    const VectorX<Scalar> ev = eig.eigenvalues().cwiseMax(floor);
    R = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
    R = ((R + R.transpose()) / Scalar(2)).eval();
    out.R_floored = true;
  }
  out.R = std::move(R);
  return out;
}

}  // namespace detail

/// Closed-form fixed-point updates for sigma2 and R.
template <typename Scalar>
VarianceUpdate<Scalar> update_variances(const Dataset<Scalar>& data, const VectorX<Scalar>& beta,
                                        const RandomEffects<Scalar>& ranef,
                                        const ModelParams<Scalar>& params_prev,
                                        const DensityWeights<Scalar>& weights,
                                        const GammaConfig<Scalar>& cfg) {
  const detail::MarginalSummary<Scalar> summary(data, params_prev.sigma2(), params_prev.R());
  return detail::variance_step(data, beta, ranef, params_prev, weights, cfg.gamma, summary);
}

/// Gradient of the fitted objective (D_g, or L_J at gamma = 0) in each parameter block.
/// The R block treats all q*q entries as free, so it is symmetric.
template <typename Scalar>
struct ScoreBlocks {
  VectorX<Scalar> beta;
  MatrixX<Scalar> ranef;  // m x q
  Scalar sigma2 = 0;
  MatrixX<Scalar> R;
};

template <typename Scalar>
ScoreBlocks<Scalar> score_blocks(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                                 const RandomEffects<Scalar>& ranef,
                                 const GammaConfig<Scalar>& cfg, const VectorX<Scalar>& xi) {
  detail::check_xi(data, xi);
  const auto pe = detail::evaluate_point(data, params, ranef);
  const auto dw = detail::weights_from(data, pe, cfg.gamma, xi);
  const detail::MarginalSummary<Scalar> summary(data, params.sigma2(), params.R());
  const MatrixX<Scalar> Rinv = detail::SpdFactor<Scalar>(params.R()).inverse();
  const Scalar s2 = params.sigma2();
  const Scalar g = cfg.gamma;
  const Scalar shrink = g / (Scalar(2) * (Scalar(1) + g));

  ScoreBlocks<Scalar> sb;
  sb.beta = VectorX<Scalar>::Zero(data.p());
  sb.ranef = MatrixX<Scalar>::Zero(data.m(), data.q());
  MatrixX<Scalar> bb = MatrixX<Scalar>::Zero(data.q(), data.q());
  Scalar wrss = 0;
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    const auto k = static_cast<std::size_t>(i);
    const VectorX<Scalar> wr = dw.w[k].cwiseProduct(pe.resid[k]);
    const VectorX<Scalar> bi = ranef.b.row(i).transpose();
    sb.beta.noalias() += c.X.transpose() * wr / s2;
    sb.ranef.row(i) = (c.Z.transpose() * wr / s2 - dw.u(i) * (Rinv * bi)).transpose();
    wrss += wr.dot(pe.resid[k]);
    bb.noalias() += dw.u(i) * bi * bi.transpose();
  }
  sb.sigma2 = wrss / (Scalar(2) * s2 * s2) + Scalar(data.N()) * shrink / s2 -
              Scalar(0.5) * summary.trace_inv;
  sb.R = Scalar(0.5) * Rinv * bb * Rinv + Scalar(data.m()) * shrink * Rinv -
         Scalar(0.5) * summary.ZSZ;
  return sb;
}

template <typename Scalar>
ScoreBlocks<Scalar> score_blocks(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                                 const RandomEffects<Scalar>& ranef,
                                 const GammaConfig<Scalar>& cfg) {
  return score_blocks(data, params, ranef, cfg, unit_cluster_weights(data));
}

/// Stacked weighted estimating equations, each block divided by its problem size:
/// [ (1/N) sum w x r | per cluster (1/n_i)((1/sigma2) sum w z r - u R^{-1} b) |
///   (1/N) dD/dsigma2 | (1/m) vech(dD/dR) ]
template <typename Scalar>
VectorX<Scalar> wee_residuals(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                              const RandomEffects<Scalar>& ranef, const GammaConfig<Scalar>& cfg,
                              const VectorX<Scalar>& xi) {
  const auto sb = score_blocks(data, params, ranef, cfg, xi);
  const Index p = data.p();
  const Index q = data.q();
  const Index m = data.m();
  const Index nv = q * (q + 1) / 2;
  VectorX<Scalar> out(p + m * q + 1 + nv);
  out.head(p) = sb.beta * params.sigma2() / Scalar(data.N());
  for (Index i = 0; i < m; ++i)
    out.segment(p + i * q, q) = sb.ranef.row(i).transpose() / Scalar(data[i].size());
  out(p + m * q) = sb.sigma2 / Scalar(data.N());
  out.tail(nv) = vech(sb.R) / Scalar(m);
  return out;
}

template <typename Scalar>
VectorX<Scalar> wee_residuals(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                              const RandomEffects<Scalar>& ranef,
                              const GammaConfig<Scalar>& cfg) {
  return wee_residuals(data, params, ranef, cfg, unit_cluster_weights(data));
}

namespace detail {

template <typename Scalar>
Scalar objective_from(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                      const PointEval<Scalar>& pe, Scalar gamma, const VectorX<Scalar>& xi,
                      Scalar sum_logdet) {
  if (gamma == Scalar(0)) return weighted_joint_loglik(data, params, pe, xi, sum_logdet);
  return hgd_terms(data, params, pe, gamma, xi, sum_logdet).total();
}

/// A point of the iteration with everything the next step needs.
template <typename Scalar>
struct MmState {
  ModelParams<Scalar> params;
  RandomEffects<Scalar> ranef;
  MarginalSummary<Scalar> summary;
  PointEval<Scalar> pe;
  Scalar D;
};

template <typename Scalar>
MmState<Scalar> make_state(const Dataset<Scalar>& data, ModelParams<Scalar> params,
                           RandomEffects<Scalar> ranef, Scalar gamma, const VectorX<Scalar>& xi) {
  MarginalSummary<Scalar> summary(data, params.sigma2(), params.R());
  PointEval<Scalar> pe = evaluate_point(data, params, ranef);
  const Scalar D = objective_from(data, params, pe, gamma, xi, summary.logdet);
  return {std::move(params), std::move(ranef), std::move(summary), std::move(pe), D};
}

/// One MM iteration: weights -> beta -> b -> (sigma2, R), the variance step backtracked
/// along the segment from the anchor until the surrogate does not decrease.
template <typename Scalar>
MmState<Scalar> mm_step(const Dataset<Scalar>& data, const VectorX<Scalar>& xi, Scalar gamma,
                        const MmState<Scalar>& s, int& safeguarded_steps) {
  constexpr int max_halvings = 40;
  const ModelParams<Scalar>& params = s.params;
  const DensityWeights<Scalar> w = weights_from(data, s.pe, gamma, xi);
  VectorX<Scalar> beta = update_beta(data, s.ranef, w);
  RandomEffects<Scalar> b = update_ranef(data, beta, params, w);
  const VarianceUpdate<Scalar> prop = variance_step(data, beta, b, params, w, gamma, s.summary);

  const auto mid = ModelParams<Scalar>::unchecked(beta, params.sigma2(), params.R());
  const Scalar base =
      surrogate_from(data, mid, evaluate_point(data, mid, b), w, gamma, s.summary.logdet);

  // An infeasible fixed-point denominator means the surrogate still increases in sigma2.
  const Scalar target_s2 = prop.sigma2_feasible ? prop.sigma2 : Scalar(2) * params.sigma2();
  bool safeguarded = !prop.sigma2_feasible;
  Scalar step = 1;
  for (int h = 0; h <= max_halvings; ++h, step /= Scalar(2)) {
    const Scalar s2 = params.sigma2() + step * (target_s2 - params.sigma2());
    MatrixX<Scalar> R = params.R() + step * (prop.R - params.R());
    auto cand = ModelParams<Scalar>::unchecked(beta, s2, std::move(R));
    std::optional<MarginalSummary<Scalar>> cs;
    try {
      cs.emplace(data, cand.sigma2(), cand.R());
    } catch (const NumericalError&) {
      safeguarded = true;
      continue;
    }
    PointEval<Scalar> cpe = evaluate_point(data, cand, b);
    if (surrogate_from(data, cand, cpe, w, gamma, cs->logdet) >= base) {
      if (safeguarded) ++safeguarded_steps;
      const Scalar D = objective_from(data, cand, cpe, gamma, xi, cs->logdet);
      return {std::move(cand), std::move(b), std::move(*cs), std::move(cpe), D};
    }
    safeguarded = true;
  }
  ++safeguarded_steps;  // no ascent along the segment: keep the variance components
  return make_state(data, mid, std::move(b), gamma, xi);
}

/// (beta, sigma2, vech R, vec b) as one flat vector.
template <typename Scalar>
VectorX<Scalar> flatten(const MmState<Scalar>& s) {
  const Index p = s.params.p();
  const Index q = s.params.q();
  const Index nv = q * (q + 1) / 2;
  VectorX<Scalar> v(p + 1 + nv + s.ranef.b.size());
  v.head(p) = s.params.beta();
  v(p) = s.params.sigma2();
  v.segment(p + 1, nv) = vech(s.params.R());
  v.tail(s.ranef.b.size()) = Eigen::Map<const VectorX<Scalar>>(s.ranef.b.data(), s.ranef.b.size());
  return v;
}

/// Inverse of flatten(); empty when sigma2 <= 0 or R is not positive definite.
template <typename Scalar>
std::optional<MmState<Scalar>> unflatten(const Dataset<Scalar>& data, const VectorX<Scalar>& v,
                                         Scalar gamma, const VectorX<Scalar>& xi) {
  const Index p = data.p();
  const Index q = data.q();
  const Index nv = q * (q + 1) / 2;
  if (!v.allFinite() || !(v(p) > Scalar(0))) return std::nullopt;
  MatrixX<Scalar> R = unvech(v.segment(p + 1, nv), q);
  Eigen::LLT<MatrixX<Scalar>> llt(R);
  if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().minCoeff() > Scalar(0)))
    return std::nullopt;
  RandomEffects<Scalar> b{Eigen::Map<const MatrixX<Scalar>>(v.tail(data.m() * q).data(), data.m(), q)};
  try {
    return make_state(data, ModelParams<Scalar>::unchecked(v.head(p), v(p), std::move(R)),
                      std::move(b), gamma, xi);
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}

/// Squared-extrapolation cycle built on two MM steps. The extrapolated point is
/// stabilized by one more MM step and only kept if it beats the plain double step,
/// so the objective never decreases.
template <typename Scalar>
MmState<Scalar> squarem_cycle(const Dataset<Scalar>& data, const VectorX<Scalar>& xi,
                              Scalar gamma, const MmState<Scalar>& s0, int& safeguarded_steps) {
  MmState<Scalar> s1 = mm_step(data, xi, gamma, s0, safeguarded_steps);
  MmState<Scalar> s2 = mm_step(data, xi, gamma, s1, safeguarded_steps);
  const VectorX<Scalar> t0 = flatten(s0);
  const VectorX<Scalar> r = flatten(s1) - t0;
  const VectorX<Scalar> v = flatten(s2) - flatten(s1) - r;
  const Scalar vn = v.norm();
  if (!(vn > Scalar(0))) return s2;
  Scalar alpha = std::min(-r.norm() / vn, Scalar(-1));
  for (int k = 0; k < 8 && alpha < Scalar(-1); ++k, alpha = (alpha - Scalar(1)) / Scalar(2)) {
    const VectorX<Scalar> t = t0 - Scalar(2) * alpha * r + alpha * alpha * v;
    auto ext = unflatten(data, t, gamma, xi);
    if (!ext) continue;
    int sg = 0;
    try {
      MmState<Scalar> s3 = mm_step(data, xi, gamma, *ext, sg);
      if (s3.D >= s2.D) {
        safeguarded_steps += sg;
        return s3;
      }
    } catch (const Error&) {
      continue;
    }
  }
  return s2;
}

/// The MM engine shared by the plain and the cluster-weighted fit.
template <typename Scalar>
FitResult<Scalar> run_mm(const Dataset<Scalar>& data, const VectorX<Scalar>& xi,
                         const FitConfig<Scalar>& cfg) {
  using std::abs;
  cfg.validate();
  check_xi(data, xi);
  const Scalar gamma = cfg.gamma;

  FitStart<Scalar> start = cfg.start ? *cfg.start : init_params(data);
  check_ranef(data, start.params, start.ranef);
  MmState<Scalar> state = make_state(data, std::move(start.params), std::move(start.ranef), gamma, xi);

  FitResult<Scalar> res{state.params, state.ranef, {}, {state.D}, 0, false, gamma, 0};
  for (int it = 1; it <= cfg.max_iter; ++it) {
    MmState<Scalar> next = cfg.acceleration == Acceleration::squarem
                               ? squarem_cycle(data, xi, gamma, state, res.safeguarded_steps)
                               : mm_step(data, xi, gamma, state, res.safeguarded_steps);
    const Scalar change = abs(next.D - state.D) / (Scalar(1) + abs(state.D));
    state = std::move(next);
    res.objective_trace.push_back(state.D);
    res.iterations = it;
    if (change < cfg.tol &&
        wee_residuals(data, state.params, state.ranef, GammaConfig<Scalar>(gamma), xi)
                .cwiseAbs()
                .maxCoeff() < cfg.stationarity_tol) {
      res.converged = true;
      break;
    }
  }

  // sigma2 > 0 and R SPD hold by convexity of the variance step; this re-checks them.
  res.params = ModelParams<Scalar>(state.params.beta(), state.params.sigma2(), state.params.R());
  res.ranef = std::move(state.ranef);
  res.weights = weights_from(data, state.pe, gamma, xi);
  return res;
}

}  // namespace detail

/// Fit by the MM algorithm. Non-convergence is reported through FitResult::converged.
template <typename Scalar>
FitResult<Scalar> fit_hgd(const Dataset<Scalar>& data, const FitConfig<Scalar>& cfg) {
  return detail::run_mm(data, unit_cluster_weights(data), cfg);
}

/// Warm start from a previous fit.
template <typename Scalar>
FitConfig<Scalar> warm_started(FitConfig<Scalar> cfg, const FitResult<Scalar>& from) {
  cfg.start = FitStart<Scalar>{from.params, from.ranef};
  return cfg;
}

}  // namespace hgd
