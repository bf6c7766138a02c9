// Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//
// Criteria 1-7 always run. Criteria 8-12 need the datasets under
// $ATLASBENCH_DATA and ATLASBENCH_SLOW=1 (they take minutes to hours).
// ATLASBENCH_PROFILE=full runs the full-scale variants where they differ.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "checks.hpp"

namespace fs = std::filesystem;
using namespace atlasbench;
using acceptance::Outcome;

int main(int argc, char** argv) {
  CLI::App app{"atlasbench acceptance suite"};
  std::vector<int> only;
  std::string out = "acceptance-out";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--out", out, "directory for run records and images");
  CLI11_PARSE(app, argc, argv);

  acceptance::Context ctx;
  ctx.out = out;
  if (const char* d = std::getenv("ATLASBENCH_DATA")) ctx.data_root = d;
  if (const char* s = std::getenv("ATLASBENCH_SLOW")) ctx.slow = std::string(s) == "1";
  if (const char* p = std::getenv("ATLASBENCH_PROFILE")) ctx.full = std::string(p) == "full";
  fs::create_directories(ctx.out);

  int failed = 0;
  for (const auto& c : acceptance::criteria()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.number) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = Outcome::fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.status == Outcome::kPass ? "PASS" : o.status == Outcome::kFail ? "FAIL" : "SKIP";
    std::printf("criterion %2d %s  %s: %s (%.1f s)\n", c.number, tag, c.name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    if (o.status == Outcome::kFail) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
