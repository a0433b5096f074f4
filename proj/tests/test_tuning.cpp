#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hgdlmm/error.hpp"
#include "hgdlmm/tuning.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace hgd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

FitResult<double> at(const ModelParams<double>& th, const RandomEffects<double>& re, double g) {
  FitResult<double> f{th, re};
  f.gamma = g;
  f.converged = true;
  return f;
}

}  // namespace

TEST_SUITE("tuning") {

TEST_CASE("H1 at gamma 0, single zero residual") {
  const Dataset<double> d({ClusterData<double>{"a", VectorXd::Zero(1), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)}});
  const ModelParams<double> th(VectorXd::Zero(1), 1.0, MatrixXd::Identity(1, 1));
  CHECK(h_score_response(d, at(th, RandomEffects<double>::zeros(1, 1), 0.0)) == doctest::Approx(-2.0).epsilon(1e-15));
}

TEST_CASE("H1 at gamma 0 reduces to the Gaussian score") {
  CounterRng rng(1);
  const auto d = toy::make(1);
  const auto th = toy::random_params(rng, 3, 2);
  const auto re = toy::random_ranef(rng, d.m(), 2);
  double h = 0;
  for (Eigen::Index i = 0; i < d.m(); ++i) {
    const VectorXd r = d[i].y - d[i].X * th.beta() - d[i].Z * re.b.row(i).transpose();
    h += (-2.0 / th.sigma2() + r.array().square() / std::pow(th.sigma2(), 2)).sum();
  }
  CHECK(h_score_response(d, at(th, re, 0.0)) == doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("H2 at gamma 0, scalar case") {
  const ModelParams<double> th(VectorXd::Zero(1), 1.0, MatrixXd::Identity(1, 1));
  CHECK(h_score_ranef(at(th, RandomEffects<double>::zeros(1, 1), 0.0)) == doctest::Approx(-2.0).epsilon(1e-15));
}

TEST_CASE("H-scores match the termwise oracles") {
  CounterRng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto d = toy::make(300 + t, {5, 3, 3, 2});
    const auto th = toy::random_params(rng, 3, 2);
    const auto re = toy::random_ranef(rng, d.m(), 2);
    for (double g : {0.0, 0.2, 0.3, 0.5}) {
      const auto f = at(th, re, g);
      const double a1 = h_score_response(d, f), o1 = oracle::h1(d, th, re, g);
      const double a2 = h_score_ranef(f), o2 = oracle::h2(th, re, g);
      CHECK(std::abs(a1 - o1) < 1e-10 * std::max(1.0, std::abs(o1)));
      CHECK(std::abs(a2 - o2) < 1e-10 * std::max(1.0, std::abs(o2)));
    }
  }
}

TEST_CASE("H1 is additive, H2 is permutation invariant") {
  CounterRng rng(3);
  const auto d = toy::make(4);
  const auto th = toy::random_params(rng, 3, 2);
  const auto re = toy::random_ranef(rng, d.m(), 2);
  std::vector<ClusterData<double>> cs(d.begin(), d.end());
  for (const auto& c : d) cs.push_back({c.id + "'", c.y, c.X, c.Z});
  MatrixXd b2(2 * d.m(), 2);
  b2 << re.b, re.b;
  const double h = h_score_response(d, at(th, re, 0.3));
  CHECK(h_score_response(Dataset<double>(cs), at(th, RandomEffects<double>{b2}, 0.3)) == doctest::Approx(2 * h).epsilon(1e-14));

  MatrixXd rev = re.b.colwise().reverse();
  const double h2 = h_score_ranef(at(th, re, 0.2));
  CHECK(h_score_ranef(at(th, RandomEffects<double>{rev}, 0.2)) == doctest::Approx(h2).epsilon(1e-14));
}

TEST_CASE("choose_gamma") {
  const std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4};
  const std::vector<bool> all(5, true);
  SUBCASE("max of the two argmins") {
    const auto c = choose_gamma(grid, {5, 1, 2, 3, 4}, {5, 4, 3, 1, 2}, all);
    CHECK(c.gamma1 == 0.1);
    CHECK(c.gamma2 == 0.3);
    CHECK(c.gamma_opt == 0.3);
  }
  SUBCASE("ties go to the smaller gamma") {
    const auto c = choose_gamma(grid, {3, 1, 1, 1, 2}, {0, 0, 0, 0, 0}, all);
    CHECK(c.gamma1 == 0.1);
    CHECK(c.gamma2 == 0.0);
    CHECK(c.gamma_opt == 0.1);
  }
  SUBCASE("invalid points are skipped") {
    std::vector<bool> v = all;
    v[1] = false;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto c = choose_gamma(grid, {5, nan, 2, 3, 4}, {5, nan, 3, 1, 2}, v);
    CHECK(c.gamma1 == 0.2);
    CHECK_THROWS_AS(choose_gamma(grid, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, std::vector<bool>(5, false)),
                    ConvergenceError);
  }
}

TEST_CASE("gamma grid parsing") {
  const auto g = GammaGrid::standard();
  REQUIRE(g.values.size() == 11);
  CHECK(g.values.front() == 0.0);
  CHECK(g.values[3] == 0.15);
  CHECK(g.values.back() == 0.5);
  CHECK(GammaGrid::parse("0:0.2:0.01").values.size() == 21);
  CHECK(GammaGrid::parse("0.1, 0.3,0.5").values == std::vector<double>{0.1, 0.3, 0.5});
  CHECK(GammaGrid::parse(g.to_string()).values == g.values);
  CHECK_THROWS_AS(GammaGrid::parse("0.3,0.1"), ContractError);
  CHECK_THROWS_AS(GammaGrid::parse("0:1"), ContractError);
  CHECK_THROWS_AS(GammaGrid::parse("a,b"), ContractError);
  CHECK_THROWS_AS(GammaGrid({}), ContractError);
}

TEST_CASE("select_gamma on a contaminated toy") {
  auto d = toy::make(5, {20, 8, 3, 2});
  for (int i = 0; i < 20; i += 3) d = toy::with_shift(d, i, 1, 8.0);
  FitConfig<double> cfg;
  const auto grid = GammaGrid::parse("0:0.5:0.1");
  const auto cont = select_gamma(d, grid, cfg, TuningMode::continuation);
  const auto cold = select_gamma(d, grid, cfg, TuningMode::cold, 1);
  CHECK(cont.gamma_opt == std::max(cont.gamma1, cont.gamma2));
  CHECK(std::find(grid.values.begin(), grid.values.end(), cont.gamma_opt) != grid.values.end());
  CHECK(cont.gamma_opt > 0.0);
  CHECK(cont.best().gamma == cont.gamma_opt);
  // Both modes reach the same optima up to the fit tolerance.
  for (std::size_t k = 0; k < grid.values.size(); ++k) {
    if (!cont.valid[k] || !cold.valid[k]) continue;
    CHECK(cont.h1[k] == doctest::Approx(cold.h1[k]).epsilon(1e-5));
  }
}

}  // TEST_SUITE
