#include "edt/training/loss.hpp"

#include <algorithm>
#include <cmath>

#include "edt/errors.hpp"
#include "edt/numerics/ops.hpp"

namespace edt::training {

std::string to_string(ActionLossKind kind) {
  switch (kind) {
    case ActionLossKind::kAuto:
      return "auto";
    case ActionLossKind::kMse:
      return "mse";
    case ActionLossKind::kCrossEntropy:
      return "ce";
  }
  return "auto";
}

ActionLossKind action_loss_from_string(const std::string& s) {
  if (s == "auto") return ActionLossKind::kAuto;
  if (s == "mse") return ActionLossKind::kMse;
  if (s == "ce") return ActionLossKind::kCrossEntropy;
  throw ConfigError("train.action_loss: expected 'auto', 'mse' or 'ce', got '" + s + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("train." + field + ": " + why); };
  if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha", "must lie in (0, 1)");
  if (!(c_r >= 0.0)) fail("c_r", "must be >= 0");
  if (!(max_coeff >= 0.0)) fail("max_coeff", "must be >= 0");
  if (!(lr >= 0.0)) fail("lr", "must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps", "must be > 0");
  if (batch_size == 0) fail("batch_size", "must be >= 1");
  if (!(grad_clip > 0.0)) fail("grad_clip", "must be > 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"c_r", c_r},
          {"max_coeff", max_coeff},
          {"action_loss", to_string(action_loss)},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"batch_size", batch_size},
          {"n_steps", n_steps},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"eval_every", eval_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train: expected an object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    auto real = [&]() {
      if (!value.is_number()) throw ConfigError("train." + key + ": expected a number");
      return value.get<double>();
    };
    auto count = [&]() {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw ConfigError("train." + key + ": expected a non-negative integer");
      }
      return value.get<std::uint64_t>();
    };
    if (key == "alpha") c.alpha = real();
    else if (key == "c_r") c.c_r = real();
    else if (key == "max_coeff") c.max_coeff = real();
    else if (key == "lr") c.lr = real();
    else if (key == "weight_decay") c.weight_decay = real();
    else if (key == "beta1") c.beta1 = real();
    else if (key == "beta2") c.beta2 = real();
    else if (key == "eps") c.eps = real();
    else if (key == "grad_clip") c.grad_clip = real();
    else if (key == "batch_size") c.batch_size = count();
    else if (key == "n_steps") c.n_steps = count();
    else if (key == "seed") c.seed = count();
    else if (key == "eval_every") c.eval_every = count();
    else if (key == "action_loss") {
      if (!value.is_string()) throw ConfigError("train.action_loss: expected a string");
      c.action_loss = action_loss_from_string(value.get<std::string>());
    } else {
      throw ConfigError("train." + key + ": unknown key");
    }
  }
  return c;
}

double action_weight(ActionLossKind resolved, double c_r) {
  return resolved == ActionLossKind::kCrossEntropy ? 10.0 * c_r : 1.0;
}

ActionLossKind resolve_action_loss(ActionLossKind requested, const data::ActionSpec& action) {
  const ActionLossKind natural =
      action.kind == data::ActionKind::kDiscrete ? ActionLossKind::kCrossEntropy : ActionLossKind::kMse;
  if (requested == ActionLossKind::kAuto) return natural;
  if (requested != natural) {
    throw ConfigError("train.action_loss: '" + to_string(requested) + "' does not match " +
                      data::to_string(action.kind) + " actions");
  }
  return requested;
}

double combine(const LossBreakdown& parts, const TrainConfig& cfg, ActionLossKind resolved) {
  return cfg.c_r * parts.l_return + parts.l_observation + action_weight(resolved, cfg.c_r) * parts.l_action +
         cfg.max_coeff * parts.l_max;
}

double expectile_loss(std::span<const double> pred, std::span<const double> target, double alpha) {
  if (pred.size() != target.size()) throw ContractViolation("expectile_loss: pred and target sizes differ");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ContractViolation("expectile_loss: alpha must lie in (0, 1)");
  if (pred.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double u = target[i] - pred[i];
    total += (u < 0.0 ? 1.0 - alpha : alpha) * u * u;
  }
  return total / static_cast<double>(pred.size());
}

double scalar_expectile(std::span<const double> sample, double alpha) {
  if (sample.empty()) throw ContractViolation("scalar_expectile: empty sample");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ContractViolation("scalar_expectile: alpha must lie in (0, 1)");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  long double suffix = 0.0L;
  for (double v : x) suffix += v;
  long double prefix = 0.0L;
  // With the k smallest samples below m (weight 1 - alpha) and the rest at or
  // above it (weight alpha), the stationary point is a weighted mean. Exactly
  // one segment contains its own stationary point because the loss is convex.
  for (std::size_t k = 0; k <= n; ++k) {
    const long double wl = (1.0L - alpha) * static_cast<long double>(k);
    const long double wh = static_cast<long double>(alpha) * static_cast<long double>(n - k);
    const long double m = ((1.0L - alpha) * prefix + static_cast<long double>(alpha) * suffix) / (wl + wh);
    const bool above_lower = k == 0 || m > x[k - 1];
    const bool below_upper = k == n || m <= x[k];
    if (above_lower && below_upper) return static_cast<double>(m);
    if (k < n) {
      prefix += x[k];
      suffix -= x[k];
    }
  }
  // Rounding can make adjacent segments both miss; fall back to the closest knot.
  double best = x.front();
  double best_loss = expectile_loss(std::vector<double>(n, best), x, alpha);
  for (double v : x) {
    const double l = expectile_loss(std::vector<double>(n, v), x, alpha);
    if (l < best_loss) {
      best = v;
      best_loss = l;
    }
  }
  return best;
}

template <class T>
LossResult<T> edt_loss(const model::BatchOutputs<T>& out, std::span<const data::TokenWindow> windows,
                       const data::ReturnTokenizer& tok, const TrainConfig& cfg, const data::ActionSpec& action) {
  const ActionLossKind kind = resolve_action_loss(cfg.action_loss, action);
  const auto& pk = out.packing;
  if (pk.step_offset.size() != windows.size()) throw ContractViolation("edt_loss: outputs and windows differ");
  const std::size_t S = pk.total_steps;
  const std::size_t obs_dim = out.next_obs.value().cols();
  const std::size_t aw = action.stored_width();

  std::vector<std::size_t> return_bins(S);
  std::vector<T> scaled_returns(S);
  Tensor<T> next_obs = Tensor<T>::matrix(S, obs_dim);
  std::vector<T> has_next(S);
  Tensor<T> act_target = Tensor<T>::matrix(S, aw);
  std::vector<std::size_t> act_index(S);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    for (std::size_t pos = pk.first_valid[wi]; pos < w.length; ++pos) {
      const std::size_t i = pk.packed(wi, pos);
      return_bins[i] = tok.tokenize(w.returns[pos]);
      scaled_returns[i] = static_cast<T>(w.returns[pos]);
      has_next[i] = w.has_next[pos] ? T(1) : T(0);
      for (std::size_t k = 0; k < obs_dim; ++k) next_obs(i, k) = static_cast<T>(w.next_observations[pos * obs_dim + k]);
      const float* a = w.action_at(pos);
      if (kind == ActionLossKind::kCrossEntropy) {
        act_index[i] = static_cast<std::size_t>(a[0]);
      } else {
        for (std::size_t k = 0; k < aw; ++k) act_target(i, k) = static_cast<T>(a[k]);
      }
    }
  }
  const std::vector<T> ones(S, T(1));

  const ad::Var<T> l_return = ad::cross_entropy(out.return_logits, return_bins, ones);
  const ad::Var<T> l_obs = ad::squared_error(out.next_obs, std::move(next_obs), has_next);
  const ad::Var<T> l_act = kind == ActionLossKind::kCrossEntropy
                               ? ad::cross_entropy(out.action, act_index, ones)
                               : ad::squared_error(out.action, std::move(act_target), ones);
  const ad::Var<T> l_max = ad::expectile(out.rtilde, scaled_returns, static_cast<T>(cfg.alpha), ones);

  ad::Var<T> total = ad::add(ad::scale(l_return, static_cast<T>(cfg.c_r)), l_obs);
  total = ad::add(total, ad::scale(l_act, static_cast<T>(action_weight(kind, cfg.c_r))));
  total = ad::add(total, ad::scale(l_max, static_cast<T>(cfg.max_coeff)));

  LossResult<T> r{total, {}};
  r.parts.l_return = static_cast<double>(l_return.value().item());
  r.parts.l_observation = static_cast<double>(l_obs.value().item());
  r.parts.l_action = static_cast<double>(l_act.value().item());
  r.parts.l_max = static_cast<double>(l_max.value().item());
  r.parts.total = static_cast<double>(total.value().item());
  return r;
}

template LossResult<float> edt_loss(const model::BatchOutputs<float>&, std::span<const data::TokenWindow>,
                                    const data::ReturnTokenizer&, const TrainConfig&, const data::ActionSpec&);
template LossResult<double> edt_loss(const model::BatchOutputs<double>&, std::span<const data::TokenWindow>,
                                     const data::ReturnTokenizer&, const TrainConfig&, const data::ActionSpec&);

}  // namespace edt::training
