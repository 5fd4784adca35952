#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "ambokd/errors.hpp"
#include "ambokd/tape.hpp"

namespace ambokd {

/// Builds a scalar on the given tape from the parameter set. Parameters that
/// should be checked must enter through `tape.param(params, name)`.
using ScalarFn = std::function<Var(Tape&, const ParamSet&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements = 0;
};

/// Tape gradient of `fn` at `params`, as a parameter set of gradients.
inline ParamSet tape_gradient(const ScalarFn& fn, const ParamSet& params) {
  ParamSet out = params;
  out.zero_grads();
  Tape tape;
  Var root = fn(tape, params);
  tape.backward(root);
  tape.accumulate_grads(out);
  return out;
}

inline double evaluate_scalar(const ScalarFn& fn, const ParamSet& params) {
  Tape tape;
  Var root = fn(tape, params);
  if (root.value().size() != 1)
    throw dimension_error("grad_check: function must return a scalar");
  return root.value()[0];
}

/// Central-difference check of the tape gradient. The error for one element
/// is |a - n| / max(|a|, |n|, 1e-8); the report carries the worst element.
inline GradCheckReport grad_check_report(const ScalarFn& fn, const ParamSet& params,
                                         double eps) {
  if (!(eps > 0.0) || eps > 1e-2)
    throw parameter_error("grad_check: eps must lie in (0, 1e-2], got " +
                          std::to_string(eps));
  const ParamSet analytic = tape_gradient(fn, params);
  GradCheckReport report;
  ParamSet probe = params;
  for (const std::string& name : params.names()) {
    Tensor& slot = probe.get(name);
    const Tensor& g = analytic.grad(name);
    for (std::size_t i = 0; i < slot.size(); ++i) {
      const double orig = slot[i];
      slot[i] = orig + eps;
      const double up = evaluate_scalar(fn, probe);
      slot[i] = orig - eps;
      const double down = evaluate_scalar(fn, probe);
      slot[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw numerical_error("grad_check: non-finite function value when perturbing '" +
                              name + "'[" + std::to_string(i) + "]");
      const double num = (up - down) / (2.0 * eps);
      const double a = g[i];
      const double err =
          std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      ++report.elements;
      if (err > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_param = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = num;
      }
    }
  }
  return report;
}

inline double grad_check(const ScalarFn& fn, const ParamSet& params, double eps) {
  return grad_check_report(fn, params, eps).max_rel_error;
}

}  // namespace ambokd
