#pragma once

// Choice of gamma by the two H-scores (response level and random-effect level).

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hgdlmm/core.hpp"
#include "hgdlmm/estimator.hpp"

namespace hgd {

/// C_g(sigma2) = ((1+g)^{-1/2} (2 pi sigma2)^{-g/2})^{g/(1+g)}, returned as its log.
template <typename Scalar>
Scalar log_c_response(Scalar gamma, Scalar sigma2) {
  using std::log;
  using std::log1p;
  const Scalar inner = -Scalar(0.5) * log1p(gamma) - gamma / Scalar(2) * (log_two_pi<Scalar>() + log(sigma2));
  return gamma / (Scalar(1) + gamma) * inner;
}

/// C_g(R) = ((1+g)^{-q/2} (2 pi)^{-q g/2} det(R)^{-g/2})^{g/(1+g)}, returned as its log.
template <typename Scalar>
Scalar log_c_ranef(Scalar gamma, Index q, Scalar logdet_R) {
  using std::log1p;
  const Scalar qs = Scalar(q);
  const Scalar inner = -qs / Scalar(2) * log1p(gamma) - qs * gamma / Scalar(2) * log_two_pi<Scalar>() -
                       gamma / Scalar(2) * logdet_R;
  return gamma / (Scalar(1) + gamma) * inner;
}

/// H1 = sum_ij [ 2 (g r^2 - s2) / (s2^2 C) phi^g + r^2 / (s2^2 C^2) phi^{2g} ],
/// with r the conditional residual at the fitted beta and b.
template <typename Scalar>
Scalar h_score_response(const Dataset<Scalar>& data, const FitResult<Scalar>& fit) {
  using std::exp;
  const Scalar g = fit.gamma;
  const Scalar s2 = fit.params.sigma2();
  const Scalar logC = log_c_response(g, s2);
  const auto pe = detail::evaluate_point(data, fit.params, fit.ranef);
  Scalar h = 0;
  for (std::size_t k = 0; k < pe.resid.size(); ++k) {
    for (Index j = 0; j < pe.resid[k].size(); ++j) {
      const Scalar r2 = pe.resid[k](j) * pe.resid[k](j);
      const Scalar lp = pe.logphi[k](j);
      h += Scalar(2) * (g * r2 - s2) / (s2 * s2) * exp(g * lp - logC) +
           r2 / (s2 * s2) * exp(Scalar(2) * (g * lp - logC));
    }
  }
  return h;
}

/// H2 = sum_i [ 2 (g s_i^2 - tr R^{-1}) / C phi_q^g + s_i^2 / C^2 phi_q^{2g} ],
/// s_i = 1' R^{-1} b_i.
template <typename Scalar>
Scalar h_score_ranef(const FitResult<Scalar>& fit) {
  using std::exp;
  const Scalar g = fit.gamma;
  const detail::SpdFactor<Scalar> Rf(fit.params.R());
  const MatrixX<Scalar> Rinv = Rf.inverse();
  const Scalar tr = Rinv.trace();
  const Scalar logC = log_c_ranef(g, fit.params.q(), Rf.logdet);
  const VectorX<Scalar> row_sums = Rinv.colwise().sum().transpose();  // (1' R^{-1})'
  Scalar h = 0;
  for (Index i = 0; i < fit.ranef.m(); ++i) {
    const VectorX<Scalar> bi = fit.ranef.b.row(i).transpose();
    const Scalar s = row_sums.dot(bi);
    const Scalar lp = Rf.log_density(bi);
    h += Scalar(2) * (g * s * s - tr) * exp(g * lp - logC) +
         s * s * exp(Scalar(2) * (g * lp - logC));
  }
  return h;
}

/// Candidate gammas: strictly increasing, nonnegative, nonempty.
struct GammaGrid {
  std::vector<double> values;

  explicit GammaGrid(std::vector<double> v);
  /// {0, 0.05, ..., 0.5}
  static GammaGrid standard();
  /// "lo:hi:step", or a comma-separated list.
  static GammaGrid parse(std::string_view text);
  std::string to_string() const;
};

struct TuningReport {
  std::vector<double> grid;
  std::vector<double> h1, h2;  // NaN where the fit is invalid
  std::vector<bool> valid;
  double gamma1 = 0, gamma2 = 0, gamma_opt = 0;
  std::vector<std::string> warnings;
  std::vector<std::optional<FitResult<double>>> fits;  // grid order; empty if the fit threw

  const FitResult<double>& best() const;
};

struct GammaChoice {
  double gamma1, gamma2, gamma_opt;
};

/// Argmins over the valid grid points (ties to the smaller gamma), then the larger of the two.
GammaChoice choose_gamma(const std::vector<double>& grid, const std::vector<double>& h1,
                         const std::vector<double>& h2, const std::vector<bool>& valid);

enum class TuningMode {
  continuation,  // sequential, each grid fit warm-started from the previous one
  cold           // independent OLS-started fits, run in parallel
};

/// Refit at every grid value and select gamma. cfg.gamma is ignored; cfg.start seeds the
/// first continuation fit. Non-converged grid fits are excluded with a warning.
TuningReport select_gamma(const Dataset<double>& data, const GammaGrid& grid,
                          const FitConfig<double>& cfg,
                          TuningMode mode = TuningMode::continuation, int threads = 0);

}  // namespace hgd
