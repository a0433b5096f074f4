#include "hgdlmm/simulation.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "hgdlmm/error.hpp"
#include "hgdlmm/threads.hpp"

namespace hgd {

void ScenarioConfig::validate() const {
  if (m < 1) throw ContractError("scenario needs m >= 1");
  if (!(c1 >= 0 && c1 <= 0.5) || !(c2 >= 0 && c2 <= 0.5))
    throw ContractError("contamination levels must lie in [0, 0.5]");
  if (beta_true.size() != 4) throw ContractError("beta_true must have 4 entries");
  if (R_true.rows() != 2 || R_true.cols() != 2) throw ContractError("R_true must be 2 x 2");
  if (!(sigma_true > 0)) throw ContractError("sigma_true must be positive");
  if (!(covariate_corr > -0.5 && covariate_corr < 1))
    throw ContractError("covariate correlation must lie in (-0.5, 1)");
}

Contamination scenario(std::string_view code) {
  static constexpr double level[3] = {0.0, 0.05, 0.1};
  if (code.size() == 2 && (code[0] == 'S' || code[0] == 's') && code[1] >= '1' && code[1] <= '9') {
    const int k = code[1] - '1';
    return {level[k / 3], level[k % 3]};
  }
  throw ContractError("unknown scenario '" + std::string(code) +
                      "'; valid codes are S1, S2, S3, S4, S5, S6, S7, S8, S9");
}

ScenarioConfig scenario_config(std::string_view code, int m, std::uint64_t seed) {
  const Contamination c = scenario(code);
  ScenarioConfig cfg;
  cfg.code = std::string(code);
  cfg.code[0] = 'S';
  cfg.m = m;
  cfg.c1 = c.c1;
  cfg.c2 = c.c2;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

double contamination_prob_error(double x1, double c1) {
  if (!(c1 >= 0 && c1 <= 0.5)) throw ContractError("c1 must lie in [0, 0.5]");
  return 2 * c1 / (1 + std::exp(3 - x1));
}

std::vector<int> cluster_sizes(int m, std::string* warning) {
  if (m < 1) throw ContractError("m must be at least 1");
  static constexpr int pattern[5] = {10, 15, 20, 25, 30};
  const int block = (m + 4) / 5;
  std::vector<int> sizes;
  sizes.reserve(static_cast<std::size_t>(m));
  for (int s : pattern)
    for (int k = 0; k < block && static_cast<int>(sizes.size()) < m; ++k) sizes.push_back(s);
  if (warning) {
    warning->clear();
    if (m % 5 != 0)
      *warning = "m = " + std::to_string(m) +
                 " is not a multiple of 5; each cluster size is repeated " +
                 std::to_string(block) + " times and the list truncated";
  }
  return sizes;
}

SimulatedData simulate_dataset(const ScenarioConfig& cfg, CounterRng& rng) {
  cfg.validate();
  std::string warning;
  const std::vector<int> sizes = cluster_sizes(cfg.m, &warning);

  Eigen::Matrix3d C = Eigen::Matrix3d::Constant(cfg.covariate_corr);
  C.diagonal().setOnes();
  const Eigen::MatrixXd Lx = Eigen::LLT<Eigen::MatrixXd>(Eigen::MatrixXd(C)).matrixL();
  const Eigen::MatrixXd LR = Eigen::LLT<Eigen::MatrixXd>(cfg.R_true).matrixL();
  const Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::VectorXd zero3 = Eigen::VectorXd::Zero(3);
  const Eigen::VectorXd zero2 = Eigen::VectorXd::Zero(2);
  const Eigen::VectorXd shift = Eigen::VectorXd::Constant(2, cfg.a);
  const double sigma = cfg.sigma_true;

  std::vector<ClusterData<double>> clusters;
  clusters.reserve(sizes.size());
  Eigen::MatrixXd b(cfg.m, 2);
  std::vector<std::vector<char>> eflag(sizes.size());
  std::vector<char> bflag(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const Index n = sizes[i];
    const auto row = static_cast<Index>(i);
    bflag[i] = rng.bernoulli(cfg.c2);
    b.row(row) = (bflag[i] ? rng.mvnormal(shift, I2) : rng.mvnormal(zero2, LR)).transpose();

    ClusterData<double> c{std::to_string(i + 1), Eigen::VectorXd(n), Eigen::MatrixXd(n, 4),
                          Eigen::MatrixXd(n, 2)};
    eflag[i].resize(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) {
      const Eigen::VectorXd x = rng.mvnormal(zero3, Lx);
      c.X.row(j) << 1.0, x(0), x(1), x(2);
      c.Z.row(j) << 1.0, x(1);
      const bool out = rng.bernoulli(contamination_prob_error(x(0), cfg.c1));
      eflag[i][static_cast<std::size_t>(j)] = out;
      const double e = out ? cfg.a + rng.normal() : sigma * rng.normal();
      c.y(j) = c.X.row(j).dot(cfg.beta_true) + c.Z.row(j).dot(b.row(row)) + e;
    }
    clusters.push_back(std::move(c));
  }
  return {Dataset<double>(std::move(clusters)),
          ModelParams<double>(cfg.beta_true, sigma * sigma, cfg.R_true),
          RandomEffects<double>{std::move(b)},
          std::move(eflag),
          std::move(bflag),
          std::move(warning)};
}

double interval_score(double lower, double upper, double truth, double level) {
  if (lower > upper) throw ContractError("interval lower bound exceeds upper bound");
  if (!(level > 0 && level < 1)) throw ContractError("interval level must lie in (0, 1)");
  const double alpha = 1 - level;
  double s = upper - lower;
  if (truth < lower) s += 2 / alpha * (lower - truth);
  if (truth > upper) s += 2 / alpha * (truth - upper);
  return s;
}

Method Method::parse(std::string_view text) {
  if (text == "ml") return {Kind::ml, 0};
  if (text == "ahgd") return {Kind::ahgd, 0};
  if (text == "truth") return {Kind::truth, 0};
  if (text.substr(0, 4) == "hgd:") {
    const auto v = text.substr(4);
    double g = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), g);
    if (ec == std::errc() && ptr == v.data() + v.size() && std::isfinite(g) && g >= 0)
      return {Kind::hgd, g};
  }
  throw ContractError("unknown method '" + std::string(text) +
                      "'; use ml, hgd:<gamma>, ahgd or truth");
}

std::string Method::label() const {
  switch (kind) {
    case Kind::ml: return "ml";
    case Kind::ahgd: return "ahgd";
    case Kind::truth: return "truth";
    case Kind::hgd: {
      std::ostringstream os;
      os << "hgd:" << gamma;
      return os.str();
    }
  }
  return {};
}

std::vector<Method> parse_methods(std::string_view list) {
  std::vector<Method> out;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    const auto comma = list.find(',', pos);
    const auto end = comma == std::string_view::npos ? list.size() : comma;
    out.push_back(Method::parse(list.substr(pos, end - pos)));
    pos = end + 1;
  }
  return out;
}

const MethodSummary& ScenarioReport::summary(std::string_view label) const {
  for (const auto& s : methods)
    if (s.method == label) return s;
  throw ContractError("no method '" + std::string(label) + "' in the report");
}

namespace {

double mean_sq(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

ReplicateRecord score_method(const SimulatedData& sim, const Method& method,
                             const SimulationOptions& opts, std::uint64_t boot_seed, int r) {
  ReplicateRecord rec;
  rec.replicate = r;
  rec.method = method.label();
  try {
    std::optional<FitResult<double>> fit;
    if (method.kind == Method::Kind::truth) {
      fit = FitResult<double>{sim.truth, sim.ranef, {}, {}, 0, true, 0, 0};
    } else if (method.kind == Method::Kind::ahgd) {
      const TuningReport tr = select_gamma(sim.data, opts.grid, opts.fit);
      fit = tr.best();
    } else {
      FitConfig<double> c = opts.fit;
      c.gamma = method.kind == Method::Kind::hgd ? method.gamma : 0.0;
      fit = fit_hgd(sim.data, c);
    }
    if (!fit->converged) {
      rec.failure = "no convergence in " + std::to_string(fit->iterations) + " iterations";
      return rec;
    }
    rec.gamma = fit->gamma;
    rec.mse_beta = mean_sq(fit->params.beta(), sim.truth.beta());
    rec.mse_sigma2 = std::pow(fit->params.sigma2() - sim.truth.sigma2(), 2);
    rec.mse_R = mean_sq(vech(fit->params.R()), vech(sim.truth.R()));
    rec.mse_ranef = mean_sq(fit->ranef.b, sim.ranef.b);
    rec.ok = true;

    if (opts.bootstrap_replicates > 0 && method.kind != Method::Kind::truth) {
      BootstrapConfig bc;
      bc.replicates = opts.bootstrap_replicates;
      bc.level = opts.level;
      bc.seed = boot_seed;
      bc.threads = 1;
      try {
        const BootstrapResult br = run_bootstrap(sim.data, *fit, bc, opts.fit);
        rec.has_intervals = true;
        rec.bootstrap_dropped = br.dropped;
        rec.beta_ci = br.beta_ci;
        for (std::size_t j = 0; j < br.beta_ci.size(); ++j) {
          const double t = sim.truth.beta()(static_cast<Index>(j));
          const Interval& ci = br.beta_ci[j];
          rec.covered.push_back(ci.lower <= t && t <= ci.upper);
          rec.interval_score.push_back(interval_score(ci.lower, ci.upper, t, opts.level));
        }
      } catch (const Error& e) {
        rec.failure = std::string("bootstrap: ") + e.what();
      }
    }
  } catch (const Error& e) {
    rec.ok = false;
    rec.failure = e.what();
  }
  return rec;
}

}  // namespace

ScenarioReport run_scenario(const ScenarioConfig& cfg, const std::vector<Method>& methods,
                            const SimulationOptions& opts) {
  cfg.validate();
  if (opts.replicates < 1) throw ContractError("simulation needs at least 1 replicate");
  if (methods.empty()) throw ContractError("no estimation methods given");
  opts.fit.validate();

  const int R = opts.replicates;
  const std::size_t M = methods.size();
  std::vector<ReplicateRecord> records(static_cast<std::size_t>(R) * M);
  std::string size_warning;
  cluster_sizes(cfg.m, &size_warning);

  const int nt = resolve_threads(opts.threads);
  (void)nt;
#pragma omp parallel for schedule(dynamic) num_threads(nt)
  for (int r = 0; r < R; ++r) {
    CounterRng rng(cfg.seed, static_cast<std::uint64_t>(r));
    const SimulatedData sim = simulate_dataset(cfg, rng);
    const std::uint64_t boot_seed = rng.substream(1)();
    for (std::size_t k = 0; k < M; ++k)
      records[static_cast<std::size_t>(r) * M + k] = score_method(sim, methods[k], opts, boot_seed, r);
  }

  ScenarioReport rep;
  rep.config = cfg;
  rep.options = opts;
  if (!size_warning.empty()) rep.warnings.push_back(size_warning);
  for (std::size_t k = 0; k < M; ++k) {
    MethodSummary s;
    s.method = methods[k].label();
    const std::size_t p = static_cast<std::size_t>(cfg.beta_true.size());
    s.coverage.assign(p, 0.0);
    s.interval_score.assign(p, 0.0);
    int ok = 0;
    double gsum = 0;
    for (int r = 0; r < R; ++r) {
      const ReplicateRecord& rec = records[static_cast<std::size_t>(r) * M + k];
      ++s.attempted;
      if (!rec.ok) {
        ++s.failed;
        rep.warnings.push_back("replicate " + std::to_string(r) + ", " + s.method + ": " + rec.failure);
        continue;
      }
      if (!rec.failure.empty())
        rep.warnings.push_back("replicate " + std::to_string(r) + ", " + s.method + ": " + rec.failure);
      ++ok;
      s.mse_beta += rec.mse_beta;
      s.mse_sigma2 += rec.mse_sigma2;
      s.mse_R += rec.mse_R;
      s.mse_ranef += rec.mse_ranef;
      gsum += rec.gamma;
      if (methods[k].kind == Method::Kind::ahgd) s.gamma_selected.push_back(rec.gamma);
      if (rec.has_intervals) {
        ++s.interval_replicates;
        for (std::size_t j = 0; j < p; ++j) {
          s.coverage[j] += rec.covered[j] ? 1.0 : 0.0;
          s.interval_score[j] += rec.interval_score[j];
        }
      }
    }
    if (ok > 0) {
      s.mse_beta /= ok;
      s.mse_sigma2 /= ok;
      s.mse_R /= ok;
      s.mse_ranef /= ok;
      s.mean_gamma = gsum / ok;
    }
    if (s.interval_replicates > 0) {
      for (std::size_t j = 0; j < p; ++j) {
        s.coverage[j] /= s.interval_replicates;
        s.interval_score[j] /= s.interval_replicates;
      }
    } else {
      s.coverage.clear();
      s.interval_score.clear();
    }
    rep.methods.push_back(std::move(s));
  }
  rep.records = std::move(records);
  return rep;
}

}  // namespace hgd
