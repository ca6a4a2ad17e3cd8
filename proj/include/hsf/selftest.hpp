#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hsf {

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  bool uses_conv2d = false;  // the graph under test runs conv2d's backward
};

struct SelftestReport {
  std::vector<CheckResult> checks;

  bool passed() const;
  std::string format() const;  // one "PASS|FAIL name max_error tolerance" line per check
};

struct SelftestOptions {
  bool gradchecks_only = false;
  std::uint64_t seed = 0;
};

/// Gradient checks of every op and layer, the full one-stage network,
/// adjoint identities, the frozen data module against the matrix-form
/// gradient step, the classical solver against its normal equations, and
/// metric identities.
SelftestReport run_selftest(const SelftestOptions& opts = {});

}  // namespace hsf
