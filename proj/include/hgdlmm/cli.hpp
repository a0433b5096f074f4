#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hgd {

/// Exit codes: 0 success, 2 usage, 3 data, 4 convergence or numerical failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hgd
