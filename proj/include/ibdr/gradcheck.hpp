#pragma once

// Registered comparisons of tape gradients against central finite
// differences (h = 1e-5) on small seeded inputs.

#include <cstdint>
#include <string>
#include <vector>

namespace ibdr {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t inputs = 0;  // number of differentiated coordinates
};

/// Names of every registered check, in report order.
std::vector<std::string> grad_check_names();

/// Runs every registered check on inputs drawn from `seed`.
std::vector<GradCheckResult> run_grad_checks(std::uint64_t seed);

}  // namespace ibdr
