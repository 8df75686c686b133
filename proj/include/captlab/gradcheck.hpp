#pragma once

#include <functional>

#include "captlab/tensor.hpp"

namespace captlab {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the tape gradient of a scalar f at x against central differences
/// with step h. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
/// h must lie in [1e-6, 1e-4].
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace captlab
