#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "edt/data/tokenizer.hpp"
#include "edt/data/window.hpp"
#include "edt/model/model.hpp"
#include "edt/numerics/autodiff.hpp"

namespace edt::training {

enum class ActionLossKind { kAuto, kMse, kCrossEntropy };

std::string to_string(ActionLossKind kind);
ActionLossKind action_loss_from_string(const std::string& s);

struct TrainConfig {
  double alpha = 0.99;
  double c_r = 0.001;
  double max_coeff = 0.5;
  /// kAuto picks MSE for continuous and cross-entropy for discrete actions.
  ActionLossKind action_loss = ActionLossKind::kAuto;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t n_steps = 2000;
  double grad_clip = 0.25;
  std::uint64_t seed = 0;
  /// Steps between eval summaries; 0 disables them.
  std::size_t eval_every = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct LossBreakdown {
  double total = 0.0;
  double l_return = 0.0;
  double l_observation = 0.0;
  double l_action = 0.0;
  double l_max = 0.0;
};

/// Weight of the action term: 1 for MSE, 10 * c_r for cross-entropy.
double action_weight(ActionLossKind resolved, double c_r);

/// Resolves kAuto against the model's action space; an explicit kind that
/// disagrees with the action space is a ConfigError.
ActionLossKind resolve_action_loss(ActionLossKind requested, const data::ActionSpec& action);

/// c_r * l_return + l_observation + w_a * l_action + max_coeff * l_max.
double combine(const LossBreakdown& parts, const TrainConfig& cfg, ActionLossKind resolved);

/// Mean of |alpha - 1(u < 0)| * u^2 with u = target - pred.
double expectile_loss(std::span<const double> pred, std::span<const double> target, double alpha);

/// The scalar m minimizing sum_i |alpha - 1(x_i < m)| (x_i - m)^2, solved
/// exactly over the piecewise-quadratic segments between sorted samples.
double scalar_expectile(std::span<const double> sample, double alpha);

template <class T>
struct LossResult {
  ad::Var<T> total;
  LossBreakdown parts;
};

/// The full objective over a packed batch from model::forward_batch. All terms
/// average over valid steps; the observation term skips steps without a
/// next observation inside the window.
template <class T>
LossResult<T> edt_loss(const model::BatchOutputs<T>& out, std::span<const data::TokenWindow> windows,
                       const data::ReturnTokenizer& tok, const TrainConfig& cfg, const data::ActionSpec& action);

}  // namespace edt::training
