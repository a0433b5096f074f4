#pragma once

// JSON and tidy-CSV renderings of results. Matrices are {"rows", "cols", "data"} with data
// row-major; numbers are written in shortest round-trip form.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hgdlmm/bootstrap.hpp"
#include "hgdlmm/estimator.hpp"
#include "hgdlmm/simulation.hpp"
#include "hgdlmm/tuning.hpp"

namespace hgd {

using Json = nlohmann::ordered_json;

inline constexpr const char* tool_version = "0.1.0";

/// Everything needed to repeat a command-line run.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  // arguments after the program name
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::string grid;
  double tol = 0;
  int max_iter = 0;
  std::string input_digest;  // FNV-1a 64 of the input CSV, empty if none
  std::string version = tool_version;

  Json to_json() const;
  static RunManifest from_json(const Json& j);
};

/// Parameter and cluster labels used in the output.
struct Labels {
  std::vector<std::string> beta;
  std::vector<std::string> ranef;
  std::vector<std::string> clusters;
};

Labels default_labels(const Dataset<double>& data);

Json matrix_json(const Eigen::MatrixXd& A);
Json fit_json(const FitResult<double>& fit, const Labels& labels);
Json tuning_json(const TuningReport& rep);
Json bootstrap_json(const BootstrapResult& res, const Labels& labels);
Json scenario_json(const ScenarioReport& rep);

/// replicate,parameter,value rows; ranef parameters are "b[<cluster>][<name>]".
void write_draws_csv(std::ostream& out, const BootstrapResult& res, const Labels& labels);
/// replicate,method,metric,value rows.
void write_scenario_csv(std::ostream& out, const ScenarioReport& rep);

}  // namespace hgd
