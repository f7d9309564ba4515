#pragma once

// Central finite-difference verification of analytic gradients.

#include <functional>
#include <string>
#include <vector>

#include "cpseg/tensor.hpp"

namespace cpseg {

struct GradCheckOptions {
  double eps = 1e-4;
  double tolerance = 1e-6;
};

// Suite defaults: eps 1e-4 throughout; tolerance 1e-6 in f64 and 1e-3 in f32.
// 32-bit gradients are compared against differences of the same function
// evaluated in 64-bit at the same (rounded) point, since f32 round-off would
// swamp a 1e-4 step.
GradCheckOptions default_gradcheck_options(DType dtype);

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the inputs listed
// in `check` (all inputs when empty). Inputs are made into fresh leaves.
double gradient_relative_error(const ScalarFn& fn, const std::vector<Tensor>& inputs, double eps,
                               const std::vector<std::size_t>& check = {});

// As above, but the numeric side differentiates `reference` at `reference_inputs`.
double gradient_relative_error(const ScalarFn& fn, const std::vector<Tensor>& inputs, const ScalarFn& reference,
                               const std::vector<Tensor>& reference_inputs, double eps,
                               const std::vector<std::size_t>& check = {});

struct GradCheckResult {
  std::string name;
  int instances = 0;
  double max_error = 0;
  double tolerance = 0;
  bool passed = false;
};

// Runs every registered check `instances` times with seeded random shapes.
std::vector<GradCheckResult> run_gradient_suite(DType dtype, int instances, std::uint64_t seed,
                                                const GradCheckOptions& options);

}  // namespace cpseg
