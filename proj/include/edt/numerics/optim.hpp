#pragma once

#include "edt/numerics/param_store.hpp"

namespace edt {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW step with decoupled weight decay and bias correction.
/// Throws ContractViolation when `grads` is not aligned with `params`.
template <class T>
void adamw_update(ParamStore<T>& params, const Gradients<T>& grads, const AdamWConfig& cfg);

/// L2 norm over every gradient entry, accumulated in double.
template <class T>
double global_norm(const Gradients<T>& grads);

/// Rescales all gradients by max_norm / norm when norm exceeds max_norm.
/// Norms within a relative 1e-6 of max_norm count as already clipped, which
/// makes the operation idempotent under rounding. Returns the pre-clip norm.
template <class T>
double clip_global_norm(Gradients<T>& grads, double max_norm);

}  // namespace edt
