#include "hgdlmm/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "hgdlmm/error.hpp"

namespace hgd {

void ModelSpec::validate() const {
  if (cluster_column.empty()) throw ContractError("no cluster column given");
  if (response_column.empty()) throw ContractError("no response column given");
  if (cluster_column == response_column)
    throw ContractError("cluster and response columns must differ");
  auto check = [&](const std::vector<std::string>& cols, const char* what) {
    std::set<std::string> seen;
    for (const auto& c : cols) {
      if (c.empty()) throw ContractError(std::string("empty ") + what + " column name");
      if (c == cluster_column || c == response_column)
        throw ContractError("column '" + c + "' cannot be both a " + what +
                            " covariate and the cluster or response column");
      if (!seen.insert(c).second) throw ContractError("column '" + c + "' listed twice");
    }
  };
  check(fixed_columns, "fixed");
  check(random_columns, "random");
  if (!fixed_intercept && fixed_columns.empty())
    throw ContractError("the model needs at least one fixed effect");
  if (!random_intercept && random_columns.empty())
    throw ContractError("the model needs at least one random effect");
}

std::vector<std::string> ModelSpec::fixed_names() const {
  std::vector<std::string> v;
  if (fixed_intercept) v.emplace_back("(Intercept)");
  v.insert(v.end(), fixed_columns.begin(), fixed_columns.end());
  return v;
}

std::vector<std::string> ModelSpec::random_names() const {
  std::vector<std::string> v;
  if (random_intercept) v.emplace_back("(Intercept)");
  v.insert(v.end(), random_columns.begin(), random_columns.end());
  return v;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.emplace_back(trim(cur));
  return out;
}


}  // namespace

Dataset<double> ingest_csv(std::istream& in, const ModelSpec& spec) {
  spec.validate();
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV input is empty; a header row is required");
  const std::vector<std::string> header = split_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t k = 0; k < header.size(); ++k) col.emplace(header[k], k);
  auto find = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw DataError("column '" + name + "' not found in the CSV header");
    return it->second;
  };
  const std::size_t ccol = find(spec.cluster_column);
  const std::size_t ycol = find(spec.response_column);
  std::vector<std::size_t> xcols, zcols;
  for (const auto& c : spec.fixed_columns) xcols.push_back(find(c));
  for (const auto& c : spec.random_columns) zcols.push_back(find(c));

  const Index p = static_cast<Index>(xcols.size()) + (spec.fixed_intercept ? 1 : 0);
  const Index q = static_cast<Index>(zcols.size()) + (spec.random_intercept ? 1 : 0);
  struct Acc {
    std::vector<double> y, x, z;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> acc;

  std::size_t data_row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++data_row;
    const std::vector<std::string> f = split_line(line);
    auto where = [&](std::size_t k) {
      return "data row " + std::to_string(data_row) + " (line " + std::to_string(data_row + 1) +
             "), column '" + header[k] + "'";
    };
    if (f.size() != header.size())
      throw DataError("data row " + std::to_string(data_row) + " (line " +
                      std::to_string(data_row + 1) + ") has " + std::to_string(f.size()) +
                      " fields but the header has " + std::to_string(header.size()));
    auto num = [&](std::size_t k) {
      std::string_view s = f[k];
      if (!s.empty() && s.front() == '+') s.remove_prefix(1);
      double v = 0;
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
        throw DataError(where(k) + ": cannot parse '" + f[k] + "' as a finite number");
      return v;
    };
    const std::string& id = f[ccol];
    if (id.empty()) throw DataError(where(ccol) + ": empty cluster id");
    auto [it, fresh] = acc.try_emplace(id);
    if (fresh) order.push_back(id);
    Acc& a = it->second;
    a.y.push_back(num(ycol));
    if (spec.fixed_intercept) a.x.push_back(1.0);
    for (std::size_t k : xcols) a.x.push_back(num(k));
    if (spec.random_intercept) a.z.push_back(1.0);
    for (std::size_t k : zcols) a.z.push_back(num(k));
  }
  if (order.empty()) throw DataError("CSV input has a header but no data rows");

  std::vector<ClusterData<double>> clusters;
  clusters.reserve(order.size());
  for (const auto& id : order) {
    const Acc& a = acc.at(id);
    const auto n = static_cast<Index>(a.y.size());
    ClusterData<double> c{id, Eigen::Map<const Eigen::VectorXd>(a.y.data(), n),
                          Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                         Eigen::RowMajor>>(a.x.data(), n, p),
                          Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                         Eigen::RowMajor>>(a.z.data(), n, q)};
    clusters.push_back(std::move(c));
  }
  return Dataset<double>(std::move(clusters));
}

Dataset<double> ingest_csv(const std::string& path, const ModelSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return ingest_csv(in, spec);
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_csv(std::ostream& out, const Dataset<double>& data, const ModelSpec& spec) {
  spec.validate();
  const Index xoff = spec.fixed_intercept ? 1 : 0;
  const Index zoff = spec.random_intercept ? 1 : 0;
  if (data.p() != static_cast<Index>(spec.fixed_columns.size()) + xoff ||
      data.q() != static_cast<Index>(spec.random_columns.size()) + zoff)
    throw ContractError("model spec does not match the dataset's design dimensions");
  std::vector<std::string> extra;  // random columns not among the fixed ones
  std::vector<Index> extra_z;
  for (std::size_t k = 0; k < spec.random_columns.size(); ++k) {
    const auto& c = spec.random_columns[k];
    if (std::find(spec.fixed_columns.begin(), spec.fixed_columns.end(), c) == spec.fixed_columns.end()) {
      extra.push_back(c);
      extra_z.push_back(static_cast<Index>(k) + zoff);
    }
  }
  out << spec.cluster_column << ',' << spec.response_column;
  for (const auto& c : spec.fixed_columns) out << ',' << c;
  for (const auto& c : extra) out << ',' << c;
  out << '\n';
  for (const auto& c : data) {
    const bool needs_quotes = c.id.find_first_of(",\"") != std::string::npos;
    if (c.id.find('"') != std::string::npos)
      throw ContractError("cluster id '" + c.id + "' contains a double quote");
    for (Index j = 0; j < c.size(); ++j) {
      if (needs_quotes) out << '"' << c.id << '"';
      else out << c.id;
      out << ',' << format_double(c.y(j));
      for (Index k = xoff; k < c.X.cols(); ++k) out << ',' << format_double(c.X(j, k));
      for (Index k : extra_z) out << ',' << format_double(c.Z(j, k));
      out << '\n';
    }
  }
}

void write_csv(const std::string& path, const Dataset<double>& data, const ModelSpec& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, data, spec);
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize k = 0; k < in.gcount(); ++k) {
      h ^= static_cast<unsigned char>(buf[k]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace hgd
