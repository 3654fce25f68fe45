#include "donut/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "donut/error.hpp"

namespace donut::ad {

namespace {

double central_difference(const std::function<Tensor<double>()>& fn, double& slot, double h) {
  const double saved = slot;
  slot = saved + h;
  const double up = fn().item();
  slot = saved - h;
  const double down = fn().item();
  slot = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace

GradcheckReport gradcheck(const std::function<Tensor<double>()>& fn,
                          std::vector<Tensor<double>> inputs, const GradcheckOptions& options) {
  if (!(options.h > 0.0)) fail(ErrorKind::config, "gradcheck: step must be > 0");
  for (auto& in : inputs) {
    in.zero_grad();
    in.set_requires_grad(true);
  }
  {
    TapeScope<double> scope;
    const Tensor<double> loss = fn();
    if (loss.numel() != 1) fail(ErrorKind::shape_mismatch, "gradcheck: fn must return a scalar");
    scope.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) {
    if (in.has_grad())
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    else
      analytic.emplace_back(in.numel(), 0.0);
  }

  GradcheckReport report;
  NoGradScope<double> no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double>& in = inputs[k];
    const std::size_t n = in.numel();
    const std::size_t stride =
        (options.max_per_input == 0 || n <= options.max_per_input) ? 1 : n / options.max_per_input;
    for (std::size_t i = 0; i < n; i += stride) {
      double& slot = in.data()[i];
      const double ad = analytic[k][i];
      const double fd = central_difference(fn, slot, options.h);
      const double scale = std::max(std::abs(ad), std::abs(fd));
      if (scale <= options.min_magnitude) {
        ++report.skipped_small;
        continue;
      }
      double rel = std::abs(ad - fd) / scale;
      if (rel > options.tol && options.skip_kinks) {
        const double fd_half = central_difference(fn, slot, 0.5 * options.h);
        const double spread = std::abs(fd - fd_half);
        if (spread > options.tol * std::max({std::abs(fd), std::abs(fd_half), options.min_magnitude})) {
          ++report.skipped_kinks;
          continue;
        }
      }
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = ad;
        report.worst_numeric = fd;
      }
    }
  }
  report.passed = report.max_rel_error <= options.tol;
  for (auto& in : inputs) in.zero_grad();
  return report;
}

}  // namespace donut::ad
