#pragma once

// Finite-difference verification of every loss term and layer class, run in
// float64. Shared by the `gradcheck` command and the test suite.

#include <cstdint>
#include <string>
#include <vector>

namespace semiuf {

struct GradcheckOptions {
  double tolerance = 1e-3;
  double step = 1e-3;
  // Entries probed per input tensor; larger tensors are subsampled.
  int samples_per_tensor = 24;
  std::uint64_t seed = 7;
  // Negates the analytic gradient of the named item (mutation testing).
  std::string inject_fault;
  // Only run items whose name contains this substring, when non-empty.
  std::string filter;
};

struct GradcheckItem {
  std::string name;
  double max_rel_error = 0.0;  // worst input tensor
  std::string worst_input;
  int probes = 0;
  bool passed = false;
};

std::vector<std::string> gradcheck_item_names();

std::vector<GradcheckItem> run_gradcheck(const GradcheckOptions& opt = {});

// ||a - n|| / max(||a||, ||n||), 0 when both vanish.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

}  // namespace semiuf
