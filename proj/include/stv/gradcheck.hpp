#pragma once

// Central finite-difference gradient verification.

#include <cmath>
#include <functional>
#include <vector>

#include "stv/tensor.hpp"

namespace stv::ad {

/// A deterministic scalar function of a parameter set.  When `grads` is
/// non-null the function must also fill one gradient tensor per parameter
/// (same shapes), computed analytically.
using CheckedFn =
    std::function<double(const std::vector<Tensor>& params, std::vector<Tensor>* grads)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares analytic gradients against central differences:
/// err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult finite_difference_check_full(const CheckedFn& f,
                                                    std::vector<Tensor> params,
                                                    double eps) {
  if (!(eps > 0.0) || eps > 1e-2)
    throw DomainError("finite_difference_check: eps must lie in (0, 1e-2]");

  const double base = f(params, nullptr);
  const double repeat = f(params, nullptr);
  if (base != repeat)
    throw DomainError("finite_difference_check: function is not deterministic (" +
                      std::to_string(base) + " vs " + std::to_string(repeat) + ")");

  std::vector<Tensor> grads;
  f(params, &grads);
  if (grads.size() != params.size())
    throw ShapeError("finite_difference_check: gradient count " +
                     std::to_string(grads.size()) + " != parameter count " +
                     std::to_string(params.size()));

  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].shape != params[p].shape)
      throw ShapeError("finite_difference_check: gradient shape mismatch for parameter " +
                       std::to_string(p));
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double saved = params[p].data[i];
      params[p].data[i] = saved + eps;
      const double fp = f(params, nullptr);
      params[p].data[i] = saved - eps;
      const double fm = f(params, nullptr);
      params[p].data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = grads[p].data[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic - numeric) / denom;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p;
        res.worst_entry = i;
        res.analytic_at_worst = analytic;
        res.numeric_at_worst = numeric;
      }
    }
  }
  return res;
}

inline double finite_difference_check(const CheckedFn& f, std::vector<Tensor> params,
                                      double eps = 1e-5) {
  return finite_difference_check_full(f, std::move(params), eps).max_rel_error;
}

}  // namespace stv::ad
