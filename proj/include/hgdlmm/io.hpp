#pragma once

// Long-format CSV in and out, plus a content digest for run manifests.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "hgdlmm/core.hpp"

namespace hgd {

/// Which columns make up y, X and Z. A random column may also be a fixed column.
struct ModelSpec {
  std::string cluster_column;
  std::string response_column;
  std::vector<std::string> fixed_columns;
  std::vector<std::string> random_columns;
  bool fixed_intercept = true;
  bool random_intercept = true;

  void validate() const;
  /// Names of the X and Z columns, "(Intercept)" first when flagged.
  std::vector<std::string> fixed_names() const;
  std::vector<std::string> random_names() const;
};

/// Clusters appear in order of first occurrence; rows keep file order within a cluster.
Dataset<double> ingest_csv(const std::string& path, const ModelSpec& spec);
Dataset<double> ingest_csv(std::istream& in, const ModelSpec& spec);

/// Columns: cluster, response, fixed columns, then random columns not already written.
void write_csv(std::ostream& out, const Dataset<double>& data, const ModelSpec& spec);
void write_csv(const std::string& path, const Dataset<double>& data, const ModelSpec& spec);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// FNV-1a 64-bit hash of a file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

}  // namespace hgd
