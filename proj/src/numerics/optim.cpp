#include "edt/numerics/optim.hpp"

#include <cmath>
#include <string>

namespace edt {

template <class T>
void adamw_update(ParamStore<T>& params, const Gradients<T>& grads, const AdamWConfig& cfg) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) {
    throw ContractViolation("adamw_update: " + std::to_string(grads.size()) + " gradients for " +
                            std::to_string(entries.size()) + " parameters");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].name != entries[i].name || grads[i].value.shape() != entries[i].value.shape()) {
      throw ContractViolation("adamw_update: gradient '" + grads[i].name + "' " +
                              shape_string(grads[i].value.shape()) + " does not match parameter '" +
                              entries[i].name + "' " + shape_string(entries[i].value.shape()));
    }
  }

  const std::int64_t step = params.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T lr = T(cfg.lr), decay = T(cfg.lr * cfg.weight_decay), eps = T(cfg.eps);
  const T c1 = T(1.0 / bc1), c2 = T(1.0 / bc2);

  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    const auto& g = grads[i].value;
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      T& m = e.first_moment[k];
      T& v = e.second_moment[k];
      m = b1 * m + (T(1) - b1) * g[k];
      v = b2 * v + (T(1) - b2) * g[k] * g[k];
      const T m_hat = m * c1;
      const T v_hat = v * c2;
      T& theta = e.value[k];
      theta -= decay * theta;
      theta -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  params.set_step(step);
}

template <class T>
double global_norm(const Gradients<T>& grads) {
  double total = 0.0;
  for (const auto& g : grads) {
    for (T v : g.value.values()) total += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(total);
}

template <class T>
double clip_global_norm(Gradients<T>& grads, double max_norm) {
  if (!(max_norm > 0.0)) {
    throw ContractViolation("clip_global_norm: max_norm must be positive");
  }
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) {
    throw NumericFault("clip_global_norm");
  }
  if (norm <= max_norm * (1.0 + 1e-6)) {
    return norm;
  }
  const T factor = T(max_norm / norm);
  for (auto& g : grads) {
    for (auto& v : g.value.values()) v *= factor;
  }
  return norm;
}

template void adamw_update(ParamStore<float>&, const Gradients<float>&, const AdamWConfig&);
template void adamw_update(ParamStore<double>&, const Gradients<double>&, const AdamWConfig&);
template double global_norm(const Gradients<float>&);
template double global_norm(const Gradients<double>&);
template double clip_global_norm(Gradients<float>&, double);
template double clip_global_norm(Gradients<double>&, double);

}  // namespace edt
