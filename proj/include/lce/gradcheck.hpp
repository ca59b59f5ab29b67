#pragma once

#include <cmath>
#include <cstdint>
#include <functional>

#include "lce/tensor.hpp"

namespace lce {

struct FiniteDiffResult {
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  bool non_finite = false;      // f produced a non-finite value
  int64_t non_finite_index = -1;  // element being probed when it happened
};

// Central-difference check of d f / d x against the tape's analytic gradient.
// f is invoked as f(x, tape) and must return a scalar tensor; it must be
// deterministic, and x is expected to be 64-bit. Relative error uses
// |a - n| / max(|a|, |n|, 1e-12) per element.
template <typename F>
FiniteDiffResult finite_diff_check(F&& f, Tensor<double>& x, double eps) {
  FiniteDiffResult res;

  x.set_requires_grad(true);
  x.clear_grad();
  std::vector<double> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f(x, &tape);
    if (!std::isfinite(loss.item())) {
      res.non_finite = true;
      return res;
    }
    tape.backward(loss);
    analytic = x.grad();  // copy; grad buffer zero-filled if untouched
  }

  auto& xv = x.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    const double orig = xv[size_t(i)];
    xv[size_t(i)] = orig + eps;
    double f_plus = f(x, static_cast<Tape<double>*>(nullptr)).item();
    xv[size_t(i)] = orig - eps;
    double f_minus = f(x, static_cast<Tape<double>*>(nullptr)).item();
    xv[size_t(i)] = orig;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
      res.non_finite = true;
      res.non_finite_index = i;
      return res;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double a = analytic[size_t(i)];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace lce
