#include "m2fn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "m2fn/errors.hpp"

namespace m2fn {

double grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double eps) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.mutable_grad();
    t.zero_grad();
  }
  Tape tape;
  Tensor out;
  {
    Tape::Recording rec(tape);
    out = fn();
  }
  if (out.size() != 1) {
    throw ContractError("grad_check: function output must be scalar, got " +
                        shape_string(out.shape()));
  }
  tape.backward(out);

  double worst = 0.0;
  for (Tensor& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double up = original + eps;
      const double down = original - eps;
      values[i] = up;
      const double plus = fn().item();
      values[i] = down;
      const double minus = fn().item();
      values[i] = original;
      // Divide by the step actually taken, not the nominal 2 * eps.
      const double numeric = (plus - minus) / (up - down);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace m2fn
