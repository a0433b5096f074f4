#include <doctest.h>

#include <cmath>
#include <vector>

#include "hgdlmm/estimator.hpp"
#include "hgdlmm/simulation.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace hgd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

DensityWeights<double> unit_weights(const Dataset<double>& d) {
  DensityWeights<double> w;
  for (const auto& c : d) w.w.push_back(VectorXd::Ones(c.size()));
  w.u = VectorXd::Ones(d.m());
  return w;
}

VectorXd packed(const ModelParams<double>& th) {
  const VectorXd vr = vech(th.R());
  VectorXd v(th.p() + 1 + vr.size());
  v << th.beta(), th.sigma2(), vr;
  return v;
}

VectorXd packed(const FitResult<double>& f) {
  const VectorXd t = packed(f.params);
  VectorXd v(t.size() + f.ranef.b.size());
  v << t, Eigen::Map<const VectorXd>(f.ranef.b.data(), f.ranef.b.size());
  return v;
}

FitConfig<double> config(double g) {
  FitConfig<double> cfg;
  cfg.gamma = g;
  return cfg;
}

}  // namespace

TEST_SUITE("estimator") {

TEST_CASE("init_params") {
  SUBCASE("perfect linear fit floors sigma2") {
    auto d = toy::make(1, {4, 3, 3, 1});
    std::vector<ClusterData<double>> cs(d.begin(), d.end());
    for (auto& c : cs) c.y = c.X * toy::truth_beta(3);
    const auto s = init_params(Dataset<double>(std::move(cs)));
    CHECK(s.params.sigma2() == 1e-8);
    CHECK(s.ranef.b.isZero(0));
    CHECK((s.params.beta() - toy::truth_beta(3)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("intercept-only single cluster gives the mean") {
    VectorXd y(4);
    y << 1.0, 2.0, 4.0, 9.0;
    const Dataset<double> d({ClusterData<double>{"a", y, MatrixXd::Ones(4, 1), MatrixXd::Ones(4, 1)}});
    const auto s = init_params(d);
    CHECK(s.params.beta()(0) == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(s.params.R()(0, 0) == 1e-4);
  }
  SUBCASE("least-squares oracle") {
    const auto d = toy::make(2);
    MatrixXd XtX = MatrixXd::Zero(3, 3);
    VectorXd Xty = VectorXd::Zero(3);
    for (const auto& c : d) {
      XtX += c.X.transpose() * c.X;
      Xty += c.X.transpose() * c.y;
    }
    const VectorXd ols = XtX.ldlt().solve(Xty);
    CHECK((init_params(d).params.beta() - ols).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("rank deficiency is a data error") {
    auto d = toy::make(3);
    std::vector<ClusterData<double>> cs(d.begin(), d.end());
    for (auto& c : cs) c.X.col(2) = 2.0 * c.X.col(1);
    CHECK_THROWS_AS(init_params(Dataset<double>(std::move(cs))), DataError);
  }
}

TEST_CASE("update_beta") {
  SUBCASE("unit weights, intercept only") {
    VectorXd y(3);
    y << 1.0, 2.0, 6.0;
    const Dataset<double> d({ClusterData<double>{"a", y, MatrixXd::Ones(3, 1), MatrixXd::Ones(3, 1)}});
    CHECK(update_beta(d, RandomEffects<double>::zeros(1, 1), unit_weights(d))(0) == doctest::Approx(3.0));
  }
  SUBCASE("zero weight removes an observation") {
    VectorXd y(2);
    y << 1.0, 5.0;
    const Dataset<double> d({ClusterData<double>{"a", y, MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1)}});
    auto w = unit_weights(d);
    w.w[0] << 2.0, 0.0;
    CHECK(update_beta(d, RandomEffects<double>::zeros(1, 1), w)(0) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("solves the weighted normal equations") {
    CounterRng rng(5);
    const auto d = toy::make(4);
    const auto th = toy::random_params(rng, 3, 2);
    const auto re = toy::random_ranef(rng, d.m(), 2);
    const auto w = compute_weights(d, th, re, GammaConfig<double>(0.4));
    const VectorXd beta = update_beta(d, re, w);
    VectorXd eq = VectorXd::Zero(3);
    for (Eigen::Index i = 0; i < d.m(); ++i) {
      const auto& c = d[i];
      eq += c.X.transpose() * w.w[i].cwiseProduct(c.y - c.X * beta - c.Z * re.b.row(i).transpose());
    }
    CHECK(eq.norm() < 1e-10);
  }
}

TEST_CASE("update_ranef") {
  const ModelParams<double> th(VectorXd::Zero(1), 1.0, MatrixXd::Identity(1, 1));
  SUBCASE("zero residuals give zero") {
    const Dataset<double> d({ClusterData<double>{"a", VectorXd::Zero(2), MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1)}});
    CHECK(update_ranef(d, VectorXd(VectorXd::Zero(1)), th, unit_weights(d)).b.isZero(0));
  }
  SUBCASE("scalar ridge") {
    const Dataset<double> d({ClusterData<double>{"a", VectorXd::Ones(2), MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1)}});
    CHECK(update_ranef(d, VectorXd(VectorXd::Zero(1)), th, unit_weights(d)).b(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("huge cluster weight shrinks to zero") {
    const Dataset<double> d({ClusterData<double>{"a", VectorXd::Ones(2), MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1)}});
    auto w = unit_weights(d);
    w.u(0) = 1e8;
    CHECK(std::abs(update_ranef(d, VectorXd(VectorXd::Zero(1)), th, w).b(0, 0)) < 1e-6);
  }
  SUBCASE("solves the per-cluster equations") {
    CounterRng rng(6);
    const auto d = toy::make(5);
    const auto p = toy::random_params(rng, 3, 2);
    const auto w = compute_weights(d, p, toy::random_ranef(rng, d.m(), 2), GammaConfig<double>(0.3));
    const auto b = update_ranef(d, p.beta(), p, w);
    const MatrixXd Rinv = p.R().inverse();
    for (Eigen::Index i = 0; i < d.m(); ++i) {
      const auto& c = d[i];
      const VectorXd bi = b.b.row(i).transpose();
      const VectorXd eq = c.Z.transpose() * w.w[i].cwiseProduct(c.y - c.X * p.beta() - c.Z * bi) / p.sigma2() -
                          w.u(i) * Rinv * bi;
      CHECK(eq.norm() < 1e-10);
    }
  }
}

TEST_CASE("update_variances") {
  const auto d = toy::make(7);
  for (double g : {0.0, 0.3}) {
    auto cfg = config(g);
    cfg.tol = 1e-15;
    cfg.max_iter = 5000;
    cfg.acceleration = Acceleration::none;
    const auto fit = fit_hgd(d, cfg);
    const auto w = compute_weights(d, fit.params, fit.ranef, GammaConfig<double>(g));
    const auto up = update_variances(d, fit.params.beta(), fit.ranef, fit.params, w, GammaConfig<double>(g));
    CHECK(up.sigma2_feasible);
    CHECK(std::abs(up.sigma2 - fit.params.sigma2()) < 1e-8);
    CHECK((up.R - fit.params.R()).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(up.R == up.R.transpose());
  }
  SUBCASE("symmetric output away from the fixed point") {
    CounterRng rng(8);
    for (int t = 0; t < 5; ++t) {
      const auto th = toy::random_params(rng, 3, 2);
      const auto re = toy::random_ranef(rng, d.m(), 2);
      const auto w = compute_weights(d, th, re, GammaConfig<double>(0.2));
      const auto up = update_variances(d, th.beta(), re, th, w, GammaConfig<double>(0.2));
      CHECK(up.R == up.R.transpose());
    }
  }
}

TEST_CASE("fit at gamma 0 matches the marginal-likelihood oracle") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto d = toy::make(seed);
    const auto fit = fit_hgd(d, config(0.0));
    REQUIRE(fit.converged);
    const auto ml = oracle::ml_fit(d, init_params(d).params);
    CHECK((packed(fit) - packed(FitResult<double>{ml.params, ml.ranef})).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("duplicating every cluster leaves estimates unchanged") {
  const auto d = toy::make(14);
  std::vector<ClusterData<double>> cs(d.begin(), d.end());
  for (const auto& c : d) cs.push_back({c.id + "_dup", c.y, c.X, c.Z});
  const Dataset<double> dd(std::move(cs));
  for (double g : {0.0, 0.3}) {
    auto cfg = config(g);
    cfg.tol = 1e-15;
    const auto a = fit_hgd(d, cfg);
    const auto b = fit_hgd(dd, cfg);
    REQUIRE(a.converged);
    REQUIRE(b.converged);
    CHECK((packed(a.params) - packed(b.params)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("stationarity diagnostics") {
  const auto d = toy::make(15);
  for (double g : {0.0, 0.2, 0.5}) {
    const GammaConfig<double> gc(g);
    const auto fit = fit_hgd(d, config(g));
    REQUIRE(fit.converged);
    CHECK(wee_residuals(d, fit.params, fit.ranef, gc).cwiseAbs().maxCoeff() < 1e-6);
    const auto s = init_params(d);
    CHECK(wee_residuals(d, s.params, s.ranef, gc).norm() > 1e-2);
  }
}

TEST_CASE("beta score matches finite differences") {
  CounterRng rng(16);
  const auto d = toy::make(16);
  for (double g : {0.1, 0.5}) {
    const GammaConfig<double> gc(g);
    const auto th = toy::random_params(rng, 3, 2);
    const auto re = toy::random_ranef(rng, d.m(), 2);
    const VectorXd a = score_blocks(d, th, re, gc).beta;
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-5;
      VectorXd bp = th.beta(), bm = th.beta();
      bp(k) += h;
      bm(k) -= h;
      const double fd = (evaluate_hgd(d, ModelParams<double>(bp, th.sigma2(), th.R()), re, gc) -
                         evaluate_hgd(d, ModelParams<double>(bm, th.sigma2(), th.R()), re, gc)) / (2 * h);
      CHECK(std::abs(a(k) - fd) <= 1e-5 * std::max({std::abs(a(k)), std::abs(fd), 1.0}));
    }
  }
}

TEST_CASE("plain MM ascends") {
  CounterRng rng(17);
  for (int t = 0; t < 10; ++t) {
    const auto d = toy::make(200 + t, {8, 4, 3, 2});
    for (double g : {0.1, 0.5}) {
      auto cfg = config(g);
      cfg.acceleration = Acceleration::none;
      cfg.start = FitStart<double>{toy::random_params(rng, 3, 2), toy::random_ranef(rng, d.m(), 2)};
      const auto fit = fit_hgd(d, cfg);
      for (std::size_t k = 1; k < fit.objective_trace.size(); ++k)
        CHECK(fit.objective_trace[k] >= fit.objective_trace[k - 1] - 1e-10 * std::abs(fit.objective_trace[k - 1]));
    }
  }
}

TEST_CASE("planted outlier gets the smallest weight in its cluster") {
  const auto base = toy::make(18);
  const auto d = toy::with_shift(base, 3, 2, 10 * toy::Truth{}.sigma);
  const auto fit = fit_hgd(d, config(0.5));
  REQUIRE(fit.converged);
  const VectorXd& w = fit.weights.w[3];
  Eigen::Index arg;
  w.minCoeff(&arg);
  CHECK(arg == 2);
  for (Eigen::Index j = 0; j < w.size(); ++j)
    if (j != 2) CHECK(w(j) > w(2));
}

TEST_CASE("small gamma is close to the likelihood fit") {
  const auto d = toy::make(19);
  const auto a = fit_hgd(d, config(0.0));
  const auto b = fit_hgd(d, config(1e-3));
  REQUIRE(a.converged);
  REQUIRE(b.converged);
  CHECK((packed(a.params) - packed(b.params)).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("clean simulated data at gamma 0.5 recovers the fixed effects") {
  constexpr int reps = 20;
  MatrixXd est(reps, 4);
  for (int r = 0; r < reps; ++r) {
    CounterRng rng(2024, r);
    const auto sim = simulate_dataset(scenario_config("S1", 50, 2024), rng);
    const auto fit = fit_hgd(sim.data, config(0.5));
    REQUIRE(fit.converged);
    est.row(r) = fit.params.beta().transpose();
  }
  const VectorXd truth = scenario_config("S1", 50, 1).beta_true;
  const VectorXd mean = est.colwise().mean();
  const VectorXd sd = ((est.rowwise() - mean.transpose()).array().square().colwise().sum() / (reps - 1)).sqrt();
  for (int k = 0; k < 4; ++k) CHECK(std::abs(mean(k) - truth(k)) < 3 * sd(k) / std::sqrt(double(reps)));
}

}  // TEST_SUITE
