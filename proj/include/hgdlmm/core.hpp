#pragma once

// Independent-cluster linear mixed model:
//
//   y_ij = x_ij' beta + z_ij' b_i + e_ij,   b_i ~ N(0, R),   e_ij ~ N(0, sigma2)
//
// Data containers and the classical (non-robust) quantities: marginal
// covariance, marginal log-likelihood, the modified joint log-likelihood and
// the BLUP. Everything is templated on the scalar type; the library itself is
// instantiated with double, tests occasionally use long double.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "hgdlmm/error.hpp"

namespace hgd {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
inline Scalar log_two_pi() {
  using std::log;
  return log(Scalar(2) * std::numbers::pi_v<Scalar>);
}

template <typename Scalar>
struct ClusterData {
  std::string id;
  VectorX<Scalar> y;  // n_i
  MatrixX<Scalar> X;  // n_i x p
  MatrixX<Scalar> Z;  // n_i x q

  Index size() const { return y.size(); }
};

template <typename Scalar>
void validate(const ClusterData<Scalar>& c) {
  const std::string where = "cluster '" + c.id + "'";
  if (c.y.size() < 1) throw DataError(where + " has no observations");
  if (c.X.rows() != c.y.size() || c.Z.rows() != c.y.size())
    throw DataError(where + ": row counts of y (" + std::to_string(c.y.size()) + "), X (" +
                    std::to_string(c.X.rows()) + ") and Z (" + std::to_string(c.Z.rows()) +
                    ") disagree");
  if (!c.y.allFinite() || !c.X.allFinite() || !c.Z.allFinite())
    throw DataError(where + " contains non-finite entries");
}

/// Ordered clusters with common covariate dimensions.
template <typename Scalar>
class Dataset {
public:
  using Cluster = ClusterData<Scalar>;

  explicit Dataset(std::vector<Cluster> clusters) : clusters_(std::move(clusters)) {
    if (clusters_.empty()) throw DataError("dataset has no clusters");
    p_ = clusters_.front().X.cols();
    q_ = clusters_.front().Z.cols();
    for (const auto& c : clusters_) {
      validate(c);
      if (c.X.cols() != p_ || c.Z.cols() != q_)
        throw DataError("cluster '" + c.id + "' has covariate dimensions (p=" +
                        std::to_string(c.X.cols()) + ", q=" + std::to_string(c.Z.cols()) +
                        "), expected (p=" + std::to_string(p_) + ", q=" + std::to_string(q_) +
                        ")");
      n_total_ += c.size();
    }
  }

  const std::vector<Cluster>& clusters() const { return clusters_; }
  const Cluster& operator[](Index i) const { return clusters_[static_cast<std::size_t>(i)]; }
  auto begin() const { return clusters_.begin(); }
  auto end() const { return clusters_.end(); }

  Index m() const { return static_cast<Index>(clusters_.size()); }
  Index N() const { return n_total_; }
  Index p() const { return p_; }
  Index q() const { return q_; }

private:
  std::vector<Cluster> clusters_;
  Index n_total_ = 0;
  Index p_ = 0;
  Index q_ = 0;
};

/// theta = (beta, sigma2, R). R is held as a full symmetric matrix.
template <typename Scalar>
class ModelParams {
public:
  ModelParams(VectorX<Scalar> beta, Scalar sigma2, MatrixX<Scalar> R)
      : beta_(std::move(beta)), sigma2_(sigma2), R_(std::move(R)) {
    using std::abs;
    if (!(sigma2_ > Scalar(0)) || !std::isfinite(static_cast<double>(sigma2_)))
      throw DataError("sigma2 must be positive and finite");
    if (!beta_.allFinite() || !R_.allFinite()) throw DataError("non-finite model parameters");
    if (R_.rows() != R_.cols() || R_.rows() < 1) throw DataError("R must be square and non-empty");
    const Scalar asym = (R_ - R_.transpose()).cwiseAbs().maxCoeff();
    if (asym > Scalar(1e-10) * (Scalar(1) + R_.cwiseAbs().maxCoeff()))
      throw DataError("R is not symmetric");
    R_ = Scalar(0.5) * (R_ + R_.transpose()).eval();
    Eigen::LLT<MatrixX<Scalar>> llt(R_);
    if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().minCoeff() > Scalar(0)))
      throw DataError("R is not positive definite");
  }

  /// Bypasses the SPD and positivity checks. Only for degenerate test inputs such as R = 0.
  static ModelParams unchecked(VectorX<Scalar> beta, Scalar sigma2, MatrixX<Scalar> R) {
    return ModelParams(Unchecked{}, std::move(beta), sigma2, std::move(R));
  }

  const VectorX<Scalar>& beta() const { return beta_; }
  Scalar sigma2() const { return sigma2_; }
  const MatrixX<Scalar>& R() const { return R_; }
  Index p() const { return beta_.size(); }
  Index q() const { return R_.rows(); }

private:
  struct Unchecked {};
  ModelParams(Unchecked, VectorX<Scalar> beta, Scalar sigma2, MatrixX<Scalar> R)
      : beta_(std::move(beta)), sigma2_(sigma2), R_(std::move(R)) {}

  VectorX<Scalar> beta_;
  Scalar sigma2_;
  MatrixX<Scalar> R_;
};

/// Stacked random effects, one row per cluster.
template <typename Scalar>
struct RandomEffects {
  MatrixX<Scalar> b;  // m x q

  static RandomEffects zeros(Index m, Index q) { return {MatrixX<Scalar>::Zero(m, q)}; }
  Index m() const { return b.rows(); }
  Index q() const { return b.cols(); }
};

/// Half-vectorization: lower triangle stacked column by column.
template <typename Derived>
VectorX<typename Derived::Scalar> vech(const Eigen::MatrixBase<Derived>& A) {
  const Index q = A.rows();
  VectorX<typename Derived::Scalar> v(q * (q + 1) / 2);
  Index k = 0;
  for (Index c = 0; c < q; ++c)
    for (Index r = c; r < q; ++r) v(k++) = A(r, c);
  return v;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> unvech(const Eigen::MatrixBase<Derived>& v, Index q) {
  MatrixX<typename Derived::Scalar> A(q, q);
  Index k = 0;
  for (Index c = 0; c < q; ++c)
    for (Index r = c; r < q; ++r) A(r, c) = A(c, r) = v(k++);
  return A;
}

namespace detail {

template <typename Scalar>
void check_dims(const ClusterData<Scalar>& c, Index p, Index q) {
  if (c.X.cols() != p || c.Z.cols() != q)
    throw DataError("cluster '" + c.id + "': design has p=" + std::to_string(c.X.cols()) +
                    ", q=" + std::to_string(c.Z.cols()) + " but parameters have p=" +
                    std::to_string(p) + ", q=" + std::to_string(q));
}

/// Cholesky factor of Sigma_i = Z R Z' + sigma2 I together with its log-determinant.
template <typename Scalar>
struct MarginalFactor {
  Eigen::LLT<MatrixX<Scalar>> llt;
  Scalar logdet = 0;

  MarginalFactor(const ClusterData<Scalar>& c, Scalar sigma2, const MatrixX<Scalar>& R) {
    using std::log;
    MatrixX<Scalar> S = c.Z * R * c.Z.transpose();
    S.diagonal().array() += sigma2;
    llt.compute(S);
    if (llt.info() != Eigen::Success)
      throw NumericalError("marginal covariance is not positive definite", c.id);
    const auto d = llt.matrixLLT().diagonal();
    if (!(d.minCoeff() > Scalar(0)))
      throw NumericalError("marginal covariance is not positive definite", c.id);
    logdet = Scalar(2) * d.array().log().sum();
  }

  /// tr(Sigma^{-1})
  Scalar trace_inverse() const {
    const Index n = llt.rows();
    MatrixX<Scalar> Linv = llt.matrixL().solve(MatrixX<Scalar>::Identity(n, n));
    return Linv.squaredNorm();
  }

  /// Z' Sigma^{-1} Z
  MatrixX<Scalar> project(const MatrixX<Scalar>& Z) const {
    MatrixX<Scalar> W = llt.matrixL().solve(Z);
    return W.transpose() * W;
  }
};

/// log det and inverse of a small SPD matrix (typically R).
template <typename Scalar>
struct SpdFactor {
  Eigen::LLT<MatrixX<Scalar>> llt;
  Scalar logdet = 0;

  explicit SpdFactor(const MatrixX<Scalar>& A, const char* what = "R") {
    llt.compute(A);
    if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().minCoeff() > Scalar(0)))
      throw NumericalError(std::string(what) + " is not positive definite");
    logdet = Scalar(2) * llt.matrixLLT().diagonal().array().log().sum();
  }

  MatrixX<Scalar> inverse() const {
    return llt.solve(MatrixX<Scalar>::Identity(llt.rows(), llt.cols()));
  }

  /// log phi_q(b; 0, A)
  template <typename Vec>
  Scalar log_density(const Vec& b) const {
    const VectorX<Scalar> w = llt.matrixL().solve(VectorX<Scalar>(b));
    return -Scalar(0.5) * (Scalar(llt.rows()) * log_two_pi<Scalar>() + logdet + w.squaredNorm());
  }
};

}  // namespace detail

/// log phi(y; mean, variance) for a univariate normal.
template <typename Scalar>
Scalar log_normal(Scalar y, Scalar mean, Scalar variance) {
  using std::log;
  const Scalar r = y - mean;
  return -Scalar(0.5) * (log_two_pi<Scalar>() + log(variance) + r * r / variance);
}

/// Sigma_i = Z_i R Z_i' + sigma2 I.
template <typename Scalar>
MatrixX<Scalar> marginal_covariance(const ClusterData<Scalar>& cluster,
                                    const ModelParams<Scalar>& params) {
  detail::check_dims(cluster, params.p(), params.q());
  const MatrixX<Scalar> ZR = cluster.Z * params.R();
  MatrixX<Scalar> S(cluster.size(), cluster.size());
  for (Index c = 0; c < S.cols(); ++c)
    for (Index r = c; r < S.rows(); ++r) S(r, c) = S(c, r) = ZR.row(r).dot(cluster.Z.row(c));
  S.diagonal().array() += params.sigma2();
  return S;
}

/// Sum over clusters of log phi_{n_i}(y_i; X_i beta, Sigma_i).
template <typename Scalar>
Scalar marginal_loglik(const Dataset<Scalar>& data, const ModelParams<Scalar>& params) {
  Scalar total = 0;
  for (const auto& c : data) {
    detail::check_dims(c, params.p(), params.q());
    const detail::MarginalFactor<Scalar> f(c, params.sigma2(), params.R());
    const VectorX<Scalar> r = c.y - c.X * params.beta();
    const VectorX<Scalar> w = f.llt.matrixL().solve(r);
    total -= Scalar(0.5) * (Scalar(c.size()) * log_two_pi<Scalar>() + f.logdet + w.squaredNorm());
  }
  return total;
}

/// The five additive pieces of the modified joint log-likelihood.
template <typename Scalar>
struct JointLoglikTerms {
  Scalar response = 0;      // sum_ij log phi(y_ij; x'beta + z'b_i, sigma2)
  Scalar ranef = 0;         // sum_i log phi_q(b_i; 0, R)
  Scalar logdet_sigma = 0;  // -1/2 sum_i log det Sigma_i
  Scalar sigma2_term = 0;   // N/2 log sigma2
  Scalar R_term = 0;        // m/2 log det R

  Scalar total() const { return response + ranef + logdet_sigma + sigma2_term + R_term; }
};

template <typename Scalar>
JointLoglikTerms<Scalar> joint_modified_loglik_terms(const Dataset<Scalar>& data,
                                                     const ModelParams<Scalar>& params,
                                                     const RandomEffects<Scalar>& ranef) {
  using std::log;
  if (ranef.m() != data.m() || ranef.q() != params.q())
    throw DataError("random effects have shape " + std::to_string(ranef.m()) + "x" +
                    std::to_string(ranef.q()) + ", expected " + std::to_string(data.m()) + "x" +
                    std::to_string(params.q()));
  const detail::SpdFactor<Scalar> Rf(params.R());
  JointLoglikTerms<Scalar> t;
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    detail::check_dims(c, params.p(), params.q());
    const VectorX<Scalar> bi = ranef.b.row(i).transpose();
    const VectorX<Scalar> mu = c.X * params.beta() + c.Z * bi;
    for (Index j = 0; j < c.size(); ++j) t.response += log_normal(c.y(j), mu(j), params.sigma2());
    t.ranef += Rf.log_density(bi);
    t.logdet_sigma -= Scalar(0.5) * detail::MarginalFactor<Scalar>(c, params.sigma2(), params.R()).logdet;
  }
  t.sigma2_term = Scalar(0.5) * Scalar(data.N()) * log(params.sigma2());
  t.R_term = Scalar(0.5) * Scalar(data.m()) * Rf.logdet;
  return t;
}

/// L_J(theta, b). Maximized over b by blup(); its profile equals marginal_loglik plus a constant.
template <typename Scalar>
Scalar joint_modified_loglik(const Dataset<Scalar>& data, const ModelParams<Scalar>& params,
                             const RandomEffects<Scalar>& ranef) {
  return joint_modified_loglik_terms(data, params, ranef).total();
}

/// b_i = R Z_i' Sigma_i^{-1} (y_i - X_i beta)
template <typename Scalar>
RandomEffects<Scalar> blup(const Dataset<Scalar>& data, const ModelParams<Scalar>& params) {
  auto out = RandomEffects<Scalar>::zeros(data.m(), params.q());
  for (Index i = 0; i < data.m(); ++i) {
    const auto& c = data[i];
    detail::check_dims(c, params.p(), params.q());
    const detail::MarginalFactor<Scalar> f(c, params.sigma2(), params.R());
    const VectorX<Scalar> r = c.y - c.X * params.beta();
    out.b.row(i) = (params.R() * c.Z.transpose() * f.llt.solve(r)).transpose();
  }
  return out;
}

}  // namespace hgd
