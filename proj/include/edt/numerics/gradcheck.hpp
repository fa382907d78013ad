#pragma once

#include <functional>
#include <string>
#include <vector>

#include "edt/numerics/autodiff.hpp"

namespace edt {

/// A scalar loss built on the given tape; parameters are reached through tape.param(name).
template <class T>
using LossGraph = std::function<ad::Var<T>(ad::Tape<T>&)>;

template <class T>
struct GradientResult {
  T loss{};
  Gradients<T> grads;
};

/// Evaluates `graph` against `params` and returns exact reverse-mode gradients,
/// one per parameter (zeros for parameters the graph never touches).
template <class T>
GradientResult<T> reverse_gradient(const LossGraph<T>& graph, const ParamStore<T>& params);

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tol = 0.0;
  bool pass = false;

  double max_rel_error() const;
};

struct GradCheckOptions {
  double h = 1e-4;
  double tol = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor),
  /// so coordinates whose true gradient is ~0 are judged absolutely.
  double floor = 1e-3;
};

/// Compares `analytic` against central differences of `graph` coordinate by coordinate.
GradCheckReport compare_with_finite_differences(const LossGraph<double>& graph, const ParamStore<double>& params,
                                                 const Gradients<double>& analytic, const GradCheckOptions& opts);

/// reverse_gradient followed by compare_with_finite_differences. 64-bit only.
GradCheckReport finite_diff_check(const LossGraph<double>& graph, const ParamStore<double>& params,
                                  const GradCheckOptions& opts = {});

}  // namespace edt
