#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "flatmatch/error.hpp"
#include "flatmatch/param_vector.hpp"

namespace flatmatch {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of `f` at theta against central differences,
/// coordinate by coordinate. The error at one coordinate is
/// |analytic - numeric| / max(1, |analytic|).
template <class F>
GradCheckResult finite_diff_report(F&& f, const ParamVector& theta, double step) {
  if (!(step > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  auto eval = [&](const ParamVector& p) {
    const double v = f(p.to_tensor(false)).item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: objective is not finite");
    return v;
  };

  auto [value, analytic] = value_and_grad(theta, f);
  if (!std::isfinite(value)) throw NumericError("finite_diff_check: objective is not finite");

  GradCheckResult res;
  ParamVector probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + step;
    const double up = eval(probe);
    probe[i] = theta[i] - step;
    const double down = eval(probe);
    probe[i] = theta[i];
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > res.max_rel_error || i == 0) {
      res = {err, i, analytic[i], numeric};
    }
  }
  return res;
}

template <class F>
double finite_diff_check(F&& f, const ParamVector& theta, double step) {
  return finite_diff_report(std::forward<F>(f), theta, step).max_rel_error;
}

}  // namespace flatmatch
