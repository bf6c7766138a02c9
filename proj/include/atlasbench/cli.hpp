#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace atlasbench::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// git-describe-style version recorded in manifests.
std::string version();

/// Runs one subcommand. `args` excludes the program name. Usage errors go to
/// `err` with the usage text and return 1; runtime errors return 2.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace atlasbench::cli
