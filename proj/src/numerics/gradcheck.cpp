#include "edt/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace edt {

template <class T>
GradientResult<T> reverse_gradient(const LossGraph<T>& graph, const ParamStore<T>& params) {
  ad::Tape<T> tape(&params);
  ad::Var<T> loss = graph(tape);
  tape.backward(loss);
  return {loss.value().item(), tape.param_grads()};
}

template GradientResult<float> reverse_gradient(const LossGraph<float>&, const ParamStore<float>&);
template GradientResult<double> reverse_gradient(const LossGraph<double>&, const ParamStore<double>&);

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

namespace {

double evaluate(const LossGraph<double>& graph, const ParamStore<double>& params) {
  ad::Tape<double> tape(&params, /*record=*/false);
  return graph(tape).value().item();
}

}  // namespace

GradCheckReport compare_with_finite_differences(const LossGraph<double>& graph, const ParamStore<double>& params,
                                                 const Gradients<double>& analytic, const GradCheckOptions& opts) {
  if (analytic.size() != params.size()) {
    throw ContractViolation("compare_with_finite_differences: gradients not aligned with parameters");
  }
  GradCheckReport report;
  report.tol = opts.tol;
  report.pass = true;
  ParamStore<double> probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    auto& value = probe.entries()[p].value;
    const auto& grad = analytic[p].value;
    if (grad.shape() != value.shape()) {
      throw ContractViolation("compare_with_finite_differences: gradient shape mismatch for '" +
                              analytic[p].name + "'");
    }
    ParamCheck check{probe.entries()[p].name};
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double saved = value[k];
      value[k] = saved + opts.h;
      const double up = evaluate(graph, probe);
      value[k] = saved - opts.h;
      const double down = evaluate(graph, probe);
      value[k] = saved;
      const double numeric = (up - down) / (2.0 * opts.h);
      const double abs_err = std::abs(grad[k] - numeric);
      const double denom = std::max({std::abs(grad[k]), std::abs(numeric), opts.floor});
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      check.max_rel_error = std::max(check.max_rel_error, abs_err / denom);
    }
    check.pass = check.max_rel_error <= opts.tol;
    report.pass = report.pass && check.pass;
    report.params.push_back(std::move(check));
  }
  return report;
}

GradCheckReport finite_diff_check(const LossGraph<double>& graph, const ParamStore<double>& params,
                                  const GradCheckOptions& opts) {
  auto analytic = reverse_gradient(graph, params);
  return compare_with_finite_differences(graph, params, analytic.grads, opts);
}

}  // namespace edt
