#pragma once

#include <functional>
#include <vector>

#include "neft/tensor.hpp"

namespace neft {

struct GradCheckOptions {
  double step = 1e-5;       // central-difference step h, must lie in [1e-7, 1e-3]
  double tolerance = 1e-4;  // pass threshold on the maximum relative error
  double floor = 1e-6;      // lower bound on the relative-error denominator
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  Index checked = 0;
  Index worst_tensor = -1;  // position in `wrt` of the worst element
  Index worst_element = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` must recompute its value from the current contents of `wrt` (the
/// tensors are perturbed in place and restored). Element relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor). Throws
/// NumericError if `f` produces a non-finite value.
GradCheckReport grad_check(const std::function<TensorD()>& f, std::vector<TensorD> wrt,
                           const GradCheckOptions& options = {});

/// Single-input convenience form.
GradCheckReport grad_check(const std::function<TensorD(const TensorD&)>& f, TensorD x,
                           double step = 1e-5, double tolerance = 1e-4);

}  // namespace neft
