#include "captlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "captlab/errors.hpp"

namespace captlab {

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw ContractError("finite_diff_check step outside [1e-6, 1e-4]");

  Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()),
                              /*requires_grad=*/true);
  Tensor y = f(probe);
  if (y.numel() != 1 || y.rank() > 1) throw ContractError("finite_diff_check needs a scalar function");
  y.backward();
  std::vector<double> analytic(probe.numel(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    Tensor point = probe.detach();
    const double original = point[i];
    point.mutable_values()[i] = original + h;
    const double up = f(point).item();
    point.mutable_values()[i] = original - h;
    const double down = f(point).item();
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace captlab
