#include "hgdlmm/tuning.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "hgdlmm/error.hpp"
#include "hgdlmm/threads.hpp"

namespace hgd {

namespace {

double parse_number(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ContractError("cannot parse gamma grid value '" + std::string(s) + "'");
  return v;
}

// Grid arithmetic leaves 0.15000000000000002 and the like; snap to 12 decimals.
double snap(double v) { return std::round(v * 1e12) / 1e12; }

}  // namespace

GammaGrid::GammaGrid(std::vector<double> v) : values(std::move(v)) {
  if (values.empty()) throw ContractError("gamma grid is empty");
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!std::isfinite(values[k]) || values[k] < 0)
      throw ContractError("gamma grid values must be finite and nonnegative");
    if (k > 0 && !(values[k] > values[k - 1]))
      throw ContractError("gamma grid must be strictly increasing");
  }
}

GammaGrid GammaGrid::standard() { return parse("0:0.5:0.05"); }

GammaGrid GammaGrid::parse(std::string_view text) {
  std::vector<double> v;
  if (text.find(':') != std::string_view::npos) {
    const auto c1 = text.find(':');
    const auto c2 = text.find(':', c1 + 1);
    if (c2 == std::string_view::npos)
      throw ContractError("gamma grid range must be lo:hi:step");
    const double lo = parse_number(text.substr(0, c1));
    const double hi = parse_number(text.substr(c1 + 1, c2 - c1 - 1));
    const double step = parse_number(text.substr(c2 + 1));
    if (!(step > 0) || hi < lo) throw ContractError("gamma grid range needs step > 0 and hi >= lo");
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    for (long k = 0; k <= n; ++k) v.push_back(snap(lo + static_cast<double>(k) * step));
  } else {
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto comma = text.find(',', pos);
      const auto end = comma == std::string_view::npos ? text.size() : comma;
      v.push_back(parse_number(text.substr(pos, end - pos)));
      pos = end + 1;
    }
  }
  return GammaGrid(std::move(v));
}

std::string GammaGrid::to_string() const {
  std::string out;
  char buf[32];
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (k) out += ',';
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, values[k]);
    out.append(buf, ptr);
  }
  return out;
}

const FitResult<double>& TuningReport::best() const {
  for (std::size_t k = 0; k < grid.size(); ++k)
    if (grid[k] == gamma_opt && fits[k]) return *fits[k];
  throw ContractError("tuning report has no fit at the selected gamma");
}

GammaChoice choose_gamma(const std::vector<double>& grid, const std::vector<double>& h1,
                         const std::vector<double>& h2, const std::vector<bool>& valid) {
  if (grid.size() != h1.size() || grid.size() != h2.size() || grid.size() != valid.size())
    throw ContractError("score vectors do not match the grid");
  auto argmin = [&](const std::vector<double>& h) {
    std::size_t best = grid.size();
    for (std::size_t k = 0; k < grid.size(); ++k) {
      if (!valid[k] || !std::isfinite(h[k])) continue;
      if (best == grid.size() || h[k] < h[best]) best = k;  // strict: ties keep the smaller gamma
    }
    if (best == grid.size())
      throw ConvergenceError("no grid value produced a converged fit; inspect the data or raise max_iter");
    return grid[best];
  };
  const double g1 = argmin(h1);
  const double g2 = argmin(h2);
  return {g1, g2, std::max(g1, g2)};
}

TuningReport select_gamma(const Dataset<double>& data, const GammaGrid& grid,
                          const FitConfig<double>& cfg, TuningMode mode, int threads) {
  const std::size_t L = grid.values.size();
  TuningReport rep;
  rep.grid = grid.values;
  rep.h1.assign(L, std::numeric_limits<double>::quiet_NaN());
  rep.h2.assign(L, std::numeric_limits<double>::quiet_NaN());
  rep.valid.assign(L, false);
  rep.fits.resize(L);
  std::vector<std::string> failure(L);
  std::vector<char> ok(L, 0);  // vector<bool> is not safe for concurrent writes

  auto fit_at = [&](std::size_t k, FitConfig<double> c) {
    c.gamma = grid.values[k];
    try {
      FitResult<double> f = fit_hgd(data, c);
      if (f.converged) {
        rep.h1[k] = h_score_response(data, f);
        rep.h2[k] = h_score_ranef(f);
        ok[k] = std::isfinite(rep.h1[k]) && std::isfinite(rep.h2[k]);
        if (!ok[k]) failure[k] = "non-finite H-score";
      } else {
        failure[k] = "no convergence in " + std::to_string(f.iterations) + " iterations";
      }
      rep.fits[k] = std::move(f);
    } catch (const Error& e) {
      failure[k] = e.what();
    }
  };

  if (mode == TuningMode::continuation) {
    FitConfig<double> c = cfg;
    for (std::size_t k = 0; k < L; ++k) {
      fit_at(k, c);
      if (ok[k]) c = warm_started(cfg, *rep.fits[k]);
    }
  } else {
    FitConfig<double> c = cfg;
    c.start.reset();
    const int nt = resolve_threads(threads);
    (void)nt;
#pragma omp parallel for schedule(dynamic) num_threads(nt)
    for (long k = 0; k < static_cast<long>(L); ++k) fit_at(static_cast<std::size_t>(k), c);
  }

  for (std::size_t k = 0; k < L; ++k) {
    rep.valid[k] = ok[k] != 0;
    if (rep.valid[k]) continue;
    std::ostringstream os;
    os << "gamma = " << grid.values[k] << " excluded: " << failure[k];
    rep.warnings.push_back(os.str());
  }
  const GammaChoice g = choose_gamma(rep.grid, rep.h1, rep.h2, rep.valid);
  rep.gamma1 = g.gamma1;
  rep.gamma2 = g.gamma2;
  rep.gamma_opt = g.gamma_opt;
  return rep;
}

}  // namespace hgd
