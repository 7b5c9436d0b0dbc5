// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "adaptkit/tensor.hpp"

namespace adaptkit::ad {

namespace {

double evaluate(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const double v = f(x).item();
  if (!std::isfinite(v)) throw std::domain_error("finite_difference_check: f returned a non-finite value");
  return v;
}

}  // namespace

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                               double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon must be positive");

  Tensor x = point.clone();
  x.set_requires_grad(true);
  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = f(x);
    if (!std::isfinite(out.item()))
      throw std::domain_error("finite_difference_check: f returned a non-finite value");
    tape.backward(out);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }

  NoGradScope no_grad;
  Tensor probe = point.clone();
  probe.set_requires_grad(false);
  auto values = probe.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + epsilon;
    const double up = evaluate(f, probe);
    values[i] = saved - epsilon;
    const double down = evaluate(f, probe);
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace adaptkit::ad
