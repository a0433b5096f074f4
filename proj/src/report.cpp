#include "hgdlmm/report.hpp"

#include <ostream>

#include "hgdlmm/error.hpp"
#include "hgdlmm/io.hpp"

namespace hgd {

Json RunManifest::to_json() const {
  Json j;
  j["command"] = command;
  j["argv"] = argv;
  j["seed"] = seed ? Json(*seed) : Json(nullptr);
  j["gamma"] = gamma ? Json(*gamma) : Json(nullptr);
  j["grid"] = grid.empty() ? Json(nullptr) : Json(grid);
  j["tol"] = tol;
  j["max_iter"] = max_iter;
  j["input_digest"] = input_digest.empty() ? Json(nullptr) : Json(input_digest);
  j["version"] = version;
  return j;
}

RunManifest RunManifest::from_json(const Json& j) {
  try {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    if (j.contains("seed") && !j["seed"].is_null()) m.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("gamma") && !j["gamma"].is_null()) m.gamma = j["gamma"].get<double>();
    if (j.contains("grid") && !j["grid"].is_null()) m.grid = j["grid"].get<std::string>();
    m.tol = j.value("tol", 0.0);
    m.max_iter = j.value("max_iter", 0);
    if (j.contains("input_digest") && !j["input_digest"].is_null())
      m.input_digest = j["input_digest"].get<std::string>();
    m.version = j.value("version", std::string());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed run manifest: ") + e.what());
  }
}

Labels default_labels(const Dataset<double>& data) {
  Labels l;
  for (Index k = 0; k < data.p(); ++k) l.beta.push_back("beta" + std::to_string(k));
  for (Index k = 0; k < data.q(); ++k) l.ranef.push_back("b" + std::to_string(k));
  for (const auto& c : data) l.clusters.push_back(c.id);
  return l;
}

Json matrix_json(const Eigen::MatrixXd& A) {
  Json data = Json::array();
  for (Index r = 0; r < A.rows(); ++r)
    for (Index c = 0; c < A.cols(); ++c) data.push_back(A(r, c));
  return Json{{"rows", A.rows()}, {"cols", A.cols()}, {"data", std::move(data)}};
}

namespace {

Json vector_json(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (Index k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

Json interval_json(const Interval& ci) { return Json{{"lower", ci.lower}, {"upper", ci.upper}}; }

std::vector<std::string> vech_names(const std::vector<std::string>& names) {
  std::vector<std::string> out;
  for (std::size_t c = 0; c < names.size(); ++c)
    for (std::size_t r = c; r < names.size(); ++r) out.push_back(names[r] + ":" + names[c]);
  return out;
}

}  // namespace

Json fit_json(const FitResult<double>& fit, const Labels& labels) {
  Json j;
  j["gamma"] = fit.gamma;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["safeguarded_steps"] = fit.safeguarded_steps;
  j["beta"] = Json{{"names", labels.beta}, {"values", vector_json(fit.params.beta())}};
  j["sigma2"] = fit.params.sigma2();
  j["R"] = Json{{"names", labels.ranef},
                {"vech_names", vech_names(labels.ranef)},
                {"vech", vector_json(vech(fit.params.R()))},
                {"matrix", matrix_json(fit.params.R())}};
  j["ranef"] = Json{{"clusters", labels.clusters}, {"names", labels.ranef}, {"b", matrix_json(fit.ranef.b)}};
  if (!fit.weights.w.empty()) {
    Json wmin = Json::array(), wmax = Json::array();
    for (const auto& w : fit.weights.w) {
      wmin.push_back(w.minCoeff());
      wmax.push_back(w.maxCoeff());
    }
    j["weights"] = Json{{"u", vector_json(fit.weights.u)}, {"w_min", wmin}, {"w_max", wmax}};
  }
  j["objective_trace"] = fit.objective_trace;
  return j;
}

Json tuning_json(const TuningReport& rep) {
  Json j;
  j["grid"] = rep.grid;
  Json h1 = Json::array(), h2 = Json::array(), valid = Json::array();
  for (std::size_t k = 0; k < rep.grid.size(); ++k) {
    h1.push_back(rep.valid[k] ? Json(rep.h1[k]) : Json(nullptr));
    h2.push_back(rep.valid[k] ? Json(rep.h2[k]) : Json(nullptr));
    valid.push_back(static_cast<bool>(rep.valid[k]));
  }
  j["h1"] = h1;
  j["h2"] = h2;
  j["valid"] = valid;
  j["gamma1"] = rep.gamma1;
  j["gamma2"] = rep.gamma2;
  j["gamma_opt"] = rep.gamma_opt;
  j["warnings"] = rep.warnings;
  return j;
}

Json bootstrap_json(const BootstrapResult& res, const Labels& labels) {
  Json j;
  j["gamma"] = res.gamma;
  j["level"] = res.level;
  j["requested"] = res.requested;
  j["dropped"] = res.dropped;
  j["replicate_ids"] = res.replicate_ids;
  Json beta = Json::array();
  for (std::size_t k = 0; k < res.beta_ci.size(); ++k)
    beta.push_back(Json{{"name", labels.beta[k]}, {"lower", res.beta_ci[k].lower}, {"upper", res.beta_ci[k].upper}});
  j["intervals"]["beta"] = beta;
  j["intervals"]["sigma2"] = interval_json(res.sigma2_ci);
  Json R = Json::array();
  const auto vn = vech_names(labels.ranef);
  for (std::size_t k = 0; k < res.R_ci.size(); ++k)
    R.push_back(Json{{"name", vn[k]}, {"lower", res.R_ci[k].lower}, {"upper", res.R_ci[k].upper}});
  j["intervals"]["R_vech"] = R;
  Json b = Json::array();
  const std::size_t q = labels.ranef.size();
  for (std::size_t k = 0; k < res.ranef_ci.size(); ++k)
    b.push_back(Json{{"cluster", labels.clusters[k / q]},
                     {"name", labels.ranef[k % q]},
                     {"lower", res.ranef_ci[k].lower},
                     {"upper", res.ranef_ci[k].upper}});
  j["intervals"]["ranef"] = b;
  j["draws"] = Json{{"beta", matrix_json(res.beta_draws)},
                    {"sigma2", vector_json(res.sigma2_draws)},
                    {"R_vech", matrix_json(res.R_draws)}};
  return j;
}

Json scenario_json(const ScenarioReport& rep) {
  const ScenarioConfig& c = rep.config;
  Json j;
  j["config"] = Json{{"scenario", c.code.empty() ? Json(nullptr) : Json(c.code)},
                     {"m", c.m},
                     {"c1", c.c1},
                     {"c2", c.c2},
                     {"a", c.a},
                     {"beta_true", vector_json(c.beta_true)},
                     {"sigma_true", c.sigma_true},
                     {"R_true", matrix_json(c.R_true)},
                     {"covariate_corr", c.covariate_corr},
                     {"seed", c.seed}};
  const SimulationOptions& o = rep.options;
  j["options"] = Json{{"replicates", o.replicates},
                      {"bootstrap_replicates", o.bootstrap_replicates},
                      {"level", o.level},
                      {"tol", o.fit.tol},
                      {"max_iter", o.fit.max_iter},
                      {"grid", o.grid.to_string()}};
  Json methods = Json::array();
  for (const auto& s : rep.methods) {
    Json m{{"method", s.method},
           {"attempted", s.attempted},
           {"failed", s.failed},
           {"mse_beta", s.mse_beta},
           {"mse_sigma2", s.mse_sigma2},
           {"mse_R", s.mse_R},
           {"mse_ranef", s.mse_ranef},
           {"mean_gamma", s.mean_gamma}};
    m["interval_replicates"] = s.interval_replicates;
    m["coverage"] = s.coverage;
    m["interval_score"] = s.interval_score;
    if (!s.gamma_selected.empty()) m["gamma_selected"] = s.gamma_selected;
    methods.push_back(std::move(m));
  }
  j["methods"] = methods;
  j["warnings"] = rep.warnings;
  return j;
}

void write_draws_csv(std::ostream& out, const BootstrapResult& res, const Labels& labels) {
  out << "replicate,parameter,value\n";
  const auto vn = vech_names(labels.ranef);
  for (std::size_t r = 0; r < res.replicate_ids.size(); ++r) {
    const auto row = static_cast<Index>(r);
    const int id = res.replicate_ids[r];
    for (Index k = 0; k < res.beta_draws.cols(); ++k)
      out << id << ',' << labels.beta[static_cast<std::size_t>(k)] << ','
          << format_double(res.beta_draws(row, k)) << '\n';
    out << id << ",sigma2," << format_double(res.sigma2_draws(row)) << '\n';
    for (Index k = 0; k < res.R_draws.cols(); ++k)
      out << id << ",R[" << vn[static_cast<std::size_t>(k)] << "]," << format_double(res.R_draws(row, k)) << '\n';
    const Eigen::MatrixXd& b = res.ranef_draws[r];
    for (Index i = 0; i < b.rows(); ++i)
      for (Index k = 0; k < b.cols(); ++k)
        out << id << ",b[" << labels.clusters[static_cast<std::size_t>(i)] << "]["
            << labels.ranef[static_cast<std::size_t>(k)] << "]," << format_double(b(i, k)) << '\n';
  }
}

void write_scenario_csv(std::ostream& out, const ScenarioReport& rep) {
  out << "replicate,method,metric,value\n";
  for (const auto& r : rep.records) {
    auto row = [&](const std::string& metric, double v) {
      out << r.replicate << ',' << r.method << ',' << metric << ',' << format_double(v) << '\n';
    };
    if (!r.ok) continue;
    row("mse_beta", r.mse_beta);
    row("mse_sigma2", r.mse_sigma2);
    row("mse_R", r.mse_R);
    row("mse_ranef", r.mse_ranef);
    row("gamma", r.gamma);
    if (!r.has_intervals) continue;
    for (std::size_t k = 0; k < r.beta_ci.size(); ++k) {
      const std::string s = "beta" + std::to_string(k);
      row(s + "_lower", r.beta_ci[k].lower);
      row(s + "_upper", r.beta_ci[k].upper);
      row(s + "_covered", r.covered[k] ? 1.0 : 0.0);
      row(s + "_interval_score", r.interval_score[k]);
    }
  }
}

}  // namespace hgd
