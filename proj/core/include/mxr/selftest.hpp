#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mxr::selftest {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  int id = 0;
  std::string title;
  std::vector<Check> checks;
  double seconds = 0;
  std::string error;  // set when the suite threw before finishing

  bool passed() const;
  std::size_t failures() const;
};

struct Options {
  int threads = 1;             // latency suite
  std::ostream* log = nullptr; // one line per check as it completes
};

inline constexpr int kSuiteCount = 9;

/// 1 gradients, 2 schedule, 3 layer invariants, 4 model contract, 5 parameter
/// counts, 6 latency, 7 loss identities, 8 overfit smoke, 9 metrics.
std::string suite_title(int id);
SuiteResult run_suite(int id, const Options& opts = {});

/// "PASS|FAIL suite N title (k checks, t s)" plus one indented line per failed check.
std::string summary(const SuiteResult& r);

}  // namespace mxr::selftest
