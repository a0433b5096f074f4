#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hgdlmm/core.hpp"
#include "hgdlmm/error.hpp"
#include "hgdlmm/objective.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace hgd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Dataset<double> single_intercept(const VectorXd& y) {
  return Dataset<double>({ClusterData<double>{"a", y, MatrixXd::Ones(y.size(), 1), MatrixXd::Ones(y.size(), 1)}});
}

// The additive constant the surrogate omits, for weights frozen at an anchor.
// D >= surrogate + this, with equality at the anchor.
double surrogate_offset(const DensityWeights<double>& w, double g, double N, double mq) {
  auto xlogx = [](double v) { return v > 0 ? v * std::log(v) : 0.0; };
  double ent = 0;
  for (const auto& wi : w.w)
    for (Eigen::Index j = 0; j < wi.size(); ++j) ent += xlogx(wi(j));
  for (Eigen::Index i = 0; i < w.u.size(); ++i) ent += xlogx(w.u(i));
  return -0.5 * (N + mq) * std::log(oracle::two_pi) - ent / g;
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("gamma config") {
  CHECK_THROWS_AS(GammaConfig<double>(-0.1), ContractError);
  CHECK_THROWS_AS(GammaConfig<double>(std::nan("")), ContractError);
  CHECK(GammaConfig<double>(0.0).gamma == 0.0);
}

TEST_CASE("weights: zeroth power is uniform") {
  CounterRng rng(11);
  const auto d = toy::make(2);
  const auto th = toy::random_params(rng, 3, 2);
  const auto re = toy::random_ranef(rng, d.m(), 2);
  const auto w = compute_weights(d, th, re, GammaConfig<double>(0.0));
  for (const auto& wi : w.w) CHECK((wi.array() == 1.0).all());
  CHECK((w.u.array() == 1.0).all());
}

TEST_CASE("weights: symmetric residuals give unit weights") {
  // y = 1 + b_i + 0.5 everywhere; all residuals equal and all b_i equal.
  std::vector<ClusterData<double>> cs;
  for (int i = 0; i < 4; ++i)
    cs.push_back({std::to_string(i), VectorXd::Constant(3, 1.7), MatrixXd::Ones(3, 1), MatrixXd::Ones(3, 1)});
  const Dataset<double> d(std::move(cs));
  const ModelParams<double> th(VectorXd::Constant(1, 1.0), 0.8, MatrixXd::Constant(1, 1, 0.5));
  const RandomEffects<double> re{MatrixXd::Constant(4, 1, 0.2)};
  for (double g : {0.1, 0.5, 2.0}) {
    const auto w = compute_weights(d, th, re, GammaConfig<double>(g));
    for (const auto& wi : w.w) CHECK((wi.array() - 1.0).abs().maxCoeff() < 1e-14);
    CHECK((w.u.array() - 1.0).abs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("weights: two-observation direct formula") {
  for (double r : {0.3, 1.0, 2.5, 7.0}) {
    VectorXd y(2);
    y << 0.0, r;
    const auto d = single_intercept(y);
    const ModelParams<double> th(VectorXd::Zero(1), 1.0, MatrixXd::Identity(1, 1));
    const auto w = compute_weights(d, th, RandomEffects<double>::zeros(1, 1), GammaConfig<double>(0.5));
    const double e = std::exp(-r * r / 4);
    CHECK(w.w[0](0) == doctest::Approx(2.0 / (1 + e)).epsilon(1e-14));
    CHECK(w.w[0](1) == doctest::Approx(2.0 * e / (1 + e)).epsilon(1e-12));
    CHECK(w.u(0) == 1.0);
  }
}

TEST_CASE("weights: normalization survives extreme outliers") {
  const auto base = toy::make(3);
  const auto d = toy::with_shift(base, 0, 0, 1e8);
  const ModelParams<double> th(toy::truth_beta(3), 0.25, toy::truth_R(2, 1.0));
  const auto w = compute_weights(d, th, RandomEffects<double>::zeros(d.m(), 2), GammaConfig<double>(0.5));
  double s = 0;
  for (const auto& wi : w.w) s += wi.sum();
  CHECK(std::abs(s - double(d.N())) < 1e-8 * double(d.N()));
  CHECK(w.w[0](0) < 1e-300);
  CHECK(std::abs(w.u.sum() - double(d.m())) < 1e-8 * double(d.m()));
}

TEST_CASE("weights: monotone down-weighting") {
  const auto base = toy::make(4);
  const ModelParams<double> th(toy::truth_beta(3), 0.25, toy::truth_R(2, 1.0));
  const auto re = RandomEffects<double>::zeros(base.m(), 2);
  const double r0 = base[2].y(1) - base[2].X.row(1).dot(th.beta());
  const double sgn = r0 >= 0 ? 1.0 : -1.0;
  for (double g : {0.05, 0.3, 1.0}) {
    double prev = HUGE_VAL;
    for (double delta : {0.0, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0}) {
      const auto d = toy::with_shift(base, 2, 1, sgn * delta);
      const double w = compute_weights(d, th, re, GammaConfig<double>(g)).w[2](1);
      CHECK(w < prev);
      prev = w;
    }
  }
}

TEST_CASE("hgd: termwise oracle, one observation") {
  VectorXd y(1);
  y << 0.7;
  MatrixXd X(1, 1), Z(1, 1);
  X << 1.3;
  Z << 0.6;
  const Dataset<double> d({ClusterData<double>{"only", y, X, Z}});
  const ModelParams<double> th(VectorXd::Constant(1, 0.2), 0.9, MatrixXd::Constant(1, 1, 1.4));
  const RandomEffects<double> re{MatrixXd::Constant(1, 1, -0.35)};
  for (double g : {0.01, 0.3, 1.0, 2.5})
    CHECK(std::abs(evaluate_hgd(d, th, re, GammaConfig<double>(g)) - oracle::hgd(d, th, re, g)) < 1e-10);
}

TEST_CASE("hgd: termwise oracle, random instances") {
  CounterRng rng(21);
  for (int t = 0; t < 10; ++t) {
    const auto d = toy::make(100 + t, {6, 4, 3, 2});
    const auto th = toy::random_params(rng, 3, 2);
    const auto re = toy::random_ranef(rng, d.m(), 2);
    for (double g : {0.1, 0.5}) {
      const double a = evaluate_hgd(d, th, re, GammaConfig<double>(g));
      const double o = oracle::hgd(d, th, re, g);
      CHECK(std::abs(a - o) < 1e-10 * std::max(1.0, std::abs(o)));
    }
  }
}

TEST_CASE("hgd: gamma zero is a contract error") {
  const auto d = toy::make(5);
  const ModelParams<double> th(toy::truth_beta(3), 0.25, toy::truth_R(2, 1.0));
  const auto re = RandomEffects<double>::zeros(d.m(), 2);
  CHECK_THROWS_AS(evaluate_hgd(d, th, re, GammaConfig<double>(0.0)), ContractError);
  // The dispatcher routes gamma = 0 to the joint likelihood.
  CHECK(objective_value(d, th, re, GammaConfig<double>(0.0)) == doctest::Approx(joint_modified_loglik(d, th, re)).epsilon(1e-13));
}

TEST_CASE("hgd: saturates under a growing outlier") {
  const auto base = toy::make(6);
  const ModelParams<double> th(toy::truth_beta(3), 0.25, toy::truth_R(2, 1.0));
  const auto re = RandomEffects<double>::zeros(base.m(), 2);
  for (double g : {0.1, 0.5}) {
    std::vector<double> D;
    for (int k = 1; k <= 6; ++k)
      D.push_back(evaluate_hgd(toy::with_shift(base, 1, 0, std::pow(10.0, k)), th, re, GammaConfig<double>(g)));
    for (std::size_t k = 1; k < D.size(); ++k) {
      CHECK(std::isfinite(D[k]));
      CHECK(D[k] <= D[k - 1]);
    }
    CHECK(std::abs(D[5] - D[4]) < 1e-10 * std::abs(D[5]));
  }
}

TEST_CASE("surrogate: touches with a constant offset at the anchor") {
  CounterRng rng(31);
  const auto d = toy::make(7);
  const double N = double(d.N()), mq = double(d.m() * d.q());
  for (double g : {0.1, 0.5}) {
    const GammaConfig<double> cfg(g);
    std::vector<double> gaps;
    for (int a = 0; a < 5; ++a) {
      const auto th = toy::random_params(rng, 3, 2);
      const auto re = toy::random_ranef(rng, d.m(), 2);
      const auto w = compute_weights(d, th, re, cfg);
      gaps.push_back(evaluate_hgd(d, th, re, cfg) - minorization_value(d, th, re, w, cfg) -
                     surrogate_offset(w, g, N, mq));
    }
    for (double gap : gaps) CHECK(std::abs(gap - gaps[0]) < 1e-8);
    CHECK(std::abs(gaps[0]) < 1e-8);
  }
}

TEST_CASE("surrogate: quadratic in beta") {
  CounterRng rng(41);
  const auto d = toy::make(8);
  const auto th = toy::random_params(rng, 3, 2);
  const auto re = toy::random_ranef(rng, d.m(), 2);
  const GammaConfig<double> cfg(0.3);
  const auto w = compute_weights(d, th, re, cfg);
  for (int dir = 0; dir < 3; ++dir) {
    VectorXd v(3);
    for (int k = 0; k < 3; ++k) v(k) = rng.normal();
    auto f = [&](const VectorXd& b) {
      return minorization_value(d, ModelParams<double>(b, th.sigma2(), th.R()), re, w, cfg);
    };
    std::vector<double> second;
    for (int s = 0; s < 5; ++s) {
      const VectorXd b0 = th.beta() + (s - 2) * 0.7 * v;
      const double h = 0.25;
      second.push_back(f(b0 + h * v) - 2 * f(b0) + f(b0 - h * v));
    }
    const auto [lo, hi] = std::minmax_element(second.begin(), second.end());
    CHECK(*hi - *lo < 1e-6);
    CHECK(*hi < 0);
  }
}

TEST_CASE("surrogate: minorizes away from the anchor") {
  CounterRng rng(51);
  const auto d = toy::make(9);
  const double N = double(d.N()), mq = double(d.m() * d.q());
  for (double g : {0.1, 0.5}) {
    const GammaConfig<double> cfg(g);
    const auto th0 = toy::random_params(rng, 3, 2);
    const auto re0 = toy::random_ranef(rng, d.m(), 2);
    const auto w = compute_weights(d, th0, re0, cfg);
    const double C = surrogate_offset(w, g, N, mq);
    int below = 0;
    for (int t = 0; t < 100; ++t) {
      const double scale = 0.05 + 0.5 * rng.uniform();
      VectorXd beta = th0.beta();
      for (int k = 0; k < 3; ++k) beta(k) += scale * rng.normal();
      MatrixXd A = MatrixXd::Identity(2, 2);
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) A(r, c) += 0.3 * scale * rng.normal();
      const ModelParams<double> th(beta, th0.sigma2() * std::exp(scale * rng.normal()),
                                   A * th0.R() * A.transpose());
      RandomEffects<double> re = re0;
      for (Eigen::Index i = 0; i < re.m(); ++i)
        for (int k = 0; k < 2; ++k) re.b(i, k) += scale * rng.normal();
      const double D = evaluate_hgd(d, th, re, cfg);
      const double S = minorization_value(d, th, re, w, cfg) + C;
      if (S <= D + 1e-10 * std::abs(D)) ++below;
    }
    CHECK(below == 100);
  }
}

}  // TEST_SUITE
