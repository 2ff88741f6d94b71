#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rino {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      ///< measured error (or fraction)
  double tolerance = 0.0;
  std::string detail;
};

struct SelfCheckOptions {
  std::uint64_t seed = 1;
  /// Test fixture: runs the network with the gradient-layer sign flip, which
  /// must make the invariance checks fail.
  bool inject_sign_flip = false;
};

/// Equivariance, invariance, gradient and solver-oracle checks on built-in
/// synthetic meshes. Takes a few seconds.
std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& options = {});

}  // namespace rino
