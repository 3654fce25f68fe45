#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "donut/ad/tensor.hpp"

namespace donut::ad {

struct GradcheckOptions {
  double h = 1e-6;
  double tol = 1e-4;
  /// Entries where both gradients are below this are not compared.
  double min_magnitude = 1e-8;
  /// Re-evaluates suspicious entries with h/2; when the two central
  /// differences disagree the entry straddles a kink (relu, maxpool, mae
  /// ties) and is skipped instead of reported.
  bool skip_kinks = true;
  /// Caps the entries checked per input (evenly strided); 0 checks all.
  std::size_t max_per_input = 0;
};

struct GradcheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_small = 0;
  std::size_t skipped_kinks = 0;
};

/// Compares reverse-mode gradients of the scalar `fn` with respect to each
/// input against central differences. `fn` must be deterministic; it is
/// called once under a tape and then repeatedly without one.
GradcheckReport gradcheck(const std::function<Tensor<double>()>& fn,
                          std::vector<Tensor<double>> inputs, const GradcheckOptions& options = {});

}  // namespace donut::ad
