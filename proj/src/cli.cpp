#include "hgdlmm/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "hgdlmm/bootstrap.hpp"
#include "hgdlmm/error.hpp"
#include "hgdlmm/io.hpp"
#include "hgdlmm/report.hpp"
#include "hgdlmm/simulation.hpp"
#include "hgdlmm/tuning.hpp"

namespace hgd {

namespace {

constexpr int exit_usage = 2;
constexpr int exit_data = 3;
constexpr int exit_convergence = 4;

struct FitOptions {
  std::string data, cluster, y, out;
  std::vector<std::string> fixed, random;
  bool no_fixed_intercept = false;
  bool no_random_intercept = false;
  double tol = FitConfig<double>{}.tol;
  int max_iter = FitConfig<double>{}.max_iter;
  bool plain = false;
  int threads = 0;

  ModelSpec spec() const {
    return {cluster, y, fixed, random, !no_fixed_intercept, !no_random_intercept};
  }
  FitConfig<double> config() const {
    FitConfig<double> c;
    c.tol = tol;
    c.max_iter = max_iter;
    c.acceleration = plain ? Acceleration::none : Acceleration::squarem;
    return c;
  }
};

void add_model_options(CLI::App* sub, FitOptions& o) {
  sub->add_option("--data", o.data, "long-format CSV, one row per observation")->required();
  sub->add_option("--cluster", o.cluster, "cluster id column")->required();
  sub->add_option("--y", o.y, "response column")->required();
  sub->add_option("--fixed", o.fixed, "fixed-effect columns, comma separated")->delimiter(',');
  sub->add_option("--random", o.random, "random-effect columns, comma separated")->delimiter(',');
  sub->add_flag("--no-fixed-intercept", o.no_fixed_intercept);
  sub->add_flag("--no-random-intercept", o.no_random_intercept);
  sub->add_option("--tol", o.tol, "relative objective-change tolerance")->check(CLI::PositiveNumber);
  sub->add_option("--max-iter", o.max_iter)->check(CLI::PositiveNumber);
  sub->add_flag("--plain", o.plain, "plain MM iterations without extrapolation");
  sub->add_option("--out", o.out, "output JSON path (default: stdout)");
}

void emit(const Json& j, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << j.dump(2) << '\n';
}

Labels labels_for(const Dataset<double>& data, const ModelSpec& spec) {
  Labels l{spec.fixed_names(), spec.random_names(), {}};
  for (const auto& c : data) l.clusters.push_back(c.id);
  return l;
}

RunManifest manifest_for(const std::string& command, const std::vector<std::string>& args,
                         const FitConfig<double>& cfg) {
  RunManifest m;
  m.command = command;
  m.argv = args;
  m.tol = cfg.tol;
  m.max_iter = cfg.max_iter;
  return m;
}

/// Fit at a fixed gamma, or tune over the grid and return the selected fit.
struct Fitted {
  FitResult<double> fit;
  std::optional<TuningReport> tuning;
};

Fitted fit_or_tune(const Dataset<double>& data, const FitConfig<double>& cfg,
                   const std::optional<double>& gamma, const std::string& grid, TuningMode mode,
                   int threads) {
  if (!grid.empty()) {
    TuningReport rep = select_gamma(data, GammaGrid::parse(grid), cfg, mode, threads);
    FitResult<double> best = rep.best();
    return {std::move(best), std::move(rep)};
  }
  FitConfig<double> c = cfg;
  c.gamma = gamma.value_or(0.0);
  return {fit_hgd(data, c), std::nullopt};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust linear mixed models by the hierarchical gamma-divergence", "hgdlmm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version);

  FitOptions fo;
  std::optional<double> gamma;
  std::string grid;
  std::string mode_name = "continuation";

  auto* fit = app.add_subcommand("fit", "fit at one gamma (or at the gamma chosen over --grid)");
  add_model_options(fit, fo);
  auto* fit_gamma = fit->add_option("--gamma", gamma, "robustness parameter (default 0 = ML)")
                        ->check(CLI::NonNegativeNumber);
  fit->add_option("--grid", grid, "tune gamma over lo:hi:step or a list")->excludes(fit_gamma);

  auto* tune = app.add_subcommand("tune", "select gamma by the H-scores");
  add_model_options(tune, fo);
  tune->add_option("--grid", grid, "lo:hi:step or a comma list")->default_str("0:0.5:0.05");
  tune->add_option("--mode", mode_name, "continuation (warm starts) or cold (parallel)")
      ->check(CLI::IsMember({"continuation", "cold"}));
  tune->add_option("--threads", fo.threads)->check(CLI::NonNegativeNumber);

  BootstrapConfig bc;
  std::string draws_path;
  auto* boot = app.add_subcommand("bootstrap", "clustered bootstrap intervals");
  add_model_options(boot, fo);
  auto* boot_gamma = boot->add_option("--gamma", gamma)->check(CLI::NonNegativeNumber);
  boot->add_option("--grid", grid, "tune gamma first (once)")->excludes(boot_gamma);
  boot->add_option("--replicates", bc.replicates)->check(CLI::Range(2, 1000000));
  boot->add_option("--level", bc.level)->check(CLI::Range(0.0, 1.0));
  boot->add_option("--seed", bc.seed)->required();
  boot->add_option("--threads", bc.threads)->check(CLI::NonNegativeNumber);
  boot->add_option("--draws", draws_path, "tidy CSV of the draws (default: next to --out)");

  std::string scen_code, methods = "ml,hgd:0.5,ahgd", out_dir = ".";
  int sim_m = 50;
  SimulationOptions so;
  std::uint64_t sim_seed = 0;
  bool write_data = false;
  std::string sim_grid = "0:0.5:0.05";
  auto* sim = app.add_subcommand("simulate", "Monte-Carlo study on a contamination scenario");
  sim->add_option("--scenario", scen_code, "S1..S9")->required();
  sim->add_option("--m", sim_m, "number of clusters")->check(CLI::PositiveNumber);
  sim->add_option("--replicates", so.replicates)->check(CLI::PositiveNumber);
  sim->add_option("--methods", methods, "comma list of ml, hgd:<gamma>, ahgd");
  sim->add_option("--seed", sim_seed)->required();
  sim->add_option("--out", out_dir, "output directory");
  sim->add_option("--bootstrap-replicates", so.bootstrap_replicates)->check(CLI::NonNegativeNumber);
  sim->add_option("--level", so.level)->check(CLI::Range(0.0, 1.0));
  sim->add_option("--grid", sim_grid, "candidate set for ahgd");
  sim->add_option("--tol", fo.tol)->check(CLI::PositiveNumber);
  sim->add_option("--max-iter", fo.max_iter)->check(CLI::PositiveNumber);
  sim->add_option("--threads", so.threads)->check(CLI::NonNegativeNumber);
  sim->add_flag("--write-data", write_data, "also write each replicate's data as CSV");

  std::string manifest_path;
  auto* rerun = app.add_subcommand("rerun", "repeat the run recorded in an output JSON");
  rerun->add_option("--manifest", manifest_path, "JSON written by an earlier run")->required();

  std::vector<const char*> cargv{"hgdlmm"};
  for (const auto& a : args) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : exit_usage;
  }

  try {
    if (*rerun) {
      std::ifstream f(manifest_path, std::ios::binary);
      if (!f) throw DataError("cannot open '" + manifest_path + "'");
      Json j;
      try {
        j = Json::parse(f);
      } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + manifest_path + "' is not valid JSON: " + e.what());
      }
      const RunManifest m = RunManifest::from_json(j.contains("manifest") ? j["manifest"] : j);
      if (!m.input_digest.empty()) {
        for (std::size_t k = 0; k + 1 < m.argv.size(); ++k)
          if (m.argv[k] == "--data" && file_digest(m.argv[k + 1]) != m.input_digest)
            throw DataError("input '" + m.argv[k + 1] + "' has changed since the recorded run");
      }
      return run_cli(m.argv, out, err);
    }

    if (*sim) {
      const FitConfig<double> fc = fo.config();
      ScenarioConfig cfg = scenario_config(scen_code, sim_m, sim_seed);
      so.fit = fc;
      so.grid = GammaGrid::parse(sim_grid);
      const std::vector<Method> ms = parse_methods(methods);
      std::filesystem::create_directories(out_dir);
      const ScenarioReport rep = run_scenario(cfg, ms, so);
      RunManifest man = manifest_for("simulate", args, fc);
      man.seed = sim_seed;
      man.grid = sim_grid;
      Json j{{"manifest", man.to_json()}};
      j["report"] = scenario_json(rep);
      const std::filesystem::path dir(out_dir);
      emit(j, (dir / "scenario_report.json").string(), out);
      std::ofstream csv(dir / "scenario_records.csv", std::ios::binary);
      if (!csv) throw DataError("cannot write into '" + out_dir + "'");
      write_scenario_csv(csv, rep);
      if (write_data) {
        const ModelSpec spec{"cluster", "y", {"x1", "x2", "x3"}, {"x2"}, true, true};
        for (int r = 0; r < so.replicates; ++r) {
          CounterRng rng(sim_seed, static_cast<std::uint64_t>(r));
          const SimulatedData d = simulate_dataset(cfg, rng);
          write_csv((dir / ("data_" + std::to_string(r) + ".csv")).string(), d.data, spec);
        }
      }
      for (const auto& w : rep.warnings) err << "warning: " << w << '\n';
      return 0;
    }

    const ModelSpec spec = fo.spec();
    const Dataset<double> data = ingest_csv(fo.data, spec);
    const Labels labels = labels_for(data, spec);
    const FitConfig<double> fc = fo.config();
    const TuningMode mode = mode_name == "cold" ? TuningMode::cold : TuningMode::continuation;
    const std::string command = *fit ? "fit" : *tune ? "tune" : "bootstrap";
    if (*tune && grid.empty()) grid = "0:0.5:0.05";

    RunManifest man = manifest_for(command, args, fc);
    man.input_digest = file_digest(fo.data);
    man.grid = grid;
    if (grid.empty()) man.gamma = gamma.value_or(0.0);

    const Fitted f = fit_or_tune(data, fc, gamma, grid, mode, *boot ? bc.threads : fo.threads);
    Json j{{"manifest", man.to_json()}};
    if (f.tuning) {
      j["tuning"] = tuning_json(*f.tuning);
      for (const auto& w : f.tuning->warnings) err << "warning: " << w << '\n';
    }
    j["fit"] = fit_json(f.fit, labels);

    if (*boot) {
      man.seed = bc.seed;
      j["manifest"] = man.to_json();
      if (!f.fit.converged) {
        emit(j, fo.out, out);
        err << "error: the point fit did not converge in " << f.fit.iterations
            << " iterations; bootstrap not run\n";
        return exit_convergence;
      }
      const BootstrapResult res = run_bootstrap(data, f.fit, bc, fc);
      j["bootstrap"] = bootstrap_json(res, labels);
      if (draws_path.empty() && !fo.out.empty()) {
        std::filesystem::path p(fo.out);
        p.replace_extension();
        draws_path = p.string() + "_draws.csv";
      }
      if (!draws_path.empty()) {
        std::ofstream csv(draws_path, std::ios::binary);
        if (!csv) throw DataError("cannot write '" + draws_path + "'");
        write_draws_csv(csv, res, labels);
      }
    }
    emit(j, fo.out, out);
    if (!f.fit.converged) {
      err << "error: no convergence in " << f.fit.iterations << " iterations\n";
      return exit_convergence;
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::usage: return exit_usage;
      case ErrorKind::data: return exit_data;
      case ErrorKind::numerical:
      case ErrorKind::convergence: return exit_convergence;
    }
    return exit_data;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return exit_data;
  }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int k = 1; k < argc; ++k) args.emplace_back(argv[k]);
  return run_cli(args, out, err);
}

}  // namespace hgd
