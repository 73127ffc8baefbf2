#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "msa/tensor.hpp"

namespace msa {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t evaluated = 0;  // probes compared against the analytic gradient
  std::size_t skipped = 0;    // probes discarded for landing near a kink
};

// f maps a parameter vector to a scalar tensor. It must route every parameter
// through tape-aware ops so the analytic gradient exists when the inputs are
// tracked, and it must be deterministic.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central finite differences at `probes` random coordinates vs the analytic
// gradient. Probes whose evaluations come within 10*eps of a non-smooth point
// (hinge kink, hardest-negative tie) are skipped, not compared.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& params,
                           double eps, std::size_t probes, std::uint64_t seed);

}  // namespace msa
