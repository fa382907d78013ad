#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "edt/data/dataset.hpp"

namespace edt::envs {

using data::ActionKind;
using data::ActionSpec;

/// Actions as stored in datasets: continuous values, or {index} for discrete spaces.
using Action = std::vector<float>;

struct StepResult {
  std::size_t next_state = 0;
  double reward = 0.0;
  bool terminal = false;
};

/// Finite deterministic MDP. Actions are grouped into finitely many classes
/// that determine the transition; for discrete spaces a class is the action
/// index, for continuous spaces a class is a region of the action interval.
class Env {
 public:
  struct Definition {
    std::string name;
    nlohmann::json spec;  ///< reproduces the env through make_env
    std::vector<std::string> state_names;
    std::size_t obs_dim = 0;
    std::vector<std::vector<float>> observations;  ///< per state
    ActionSpec action;
    std::size_t n_classes = 0;
    /// transitions[state][class]
    std::vector<std::vector<StepResult>> transitions;
    std::vector<std::uint8_t> terminal;
    std::vector<std::size_t> start_states;
    std::size_t horizon = 0;
    /// Probability of each class under a uniform random action.
    std::vector<double> random_class_probs;
    /// Maps a continuous action to its class (unused for discrete spaces).
    std::size_t (*continuous_class)(std::span<const float>) = nullptr;
    std::vector<Action> class_representatives;
    /// Behavior-policy classes per state: the goal-directed one and the poor one.
    std::vector<std::size_t> good_class;
    std::vector<std::size_t> bad_class;
  };

  /// Validates the definition (ContractViolation on inconsistency).
  explicit Env(Definition def);

  const std::string& name() const { return def_.name; }
  const nlohmann::json& spec() const { return def_.spec; }
  std::size_t n_states() const { return def_.state_names.size(); }
  const std::string& state_name(std::size_t s) const { return def_.state_names.at(s); }
  std::size_t state_index(const std::string& name) const;
  std::size_t obs_dim() const { return def_.obs_dim; }
  const std::vector<float>& observation(std::size_t s) const { return def_.observations.at(s); }
  const ActionSpec& action_spec() const { return def_.action; }
  std::size_t horizon() const { return def_.horizon; }
  const std::vector<std::size_t>& start_states() const { return def_.start_states; }
  bool is_terminal(std::size_t s) const { return def_.terminal.at(s) != 0; }
  std::size_t n_classes() const { return def_.n_classes; }
  const std::vector<double>& random_class_probs() const { return def_.random_class_probs; }
  const Action& representative(std::size_t cls) const { return def_.class_representatives.at(cls); }
  std::size_t good_class(std::size_t s) const { return def_.good_class.at(s); }
  std::size_t bad_class(std::size_t s) const { return def_.bad_class.at(s); }

  /// Class of an action. Throws ContractViolation for malformed actions.
  std::size_t action_class(const Action& a) const;

  /// Transition from `state`. Throws ContractViolation from a terminal state.
  StepResult step(std::size_t state, const Action& a) const;
  const StepResult& transition(std::size_t state, std::size_t cls) const;

  /// The state whose observation equals `obs` exactly, if any.
  std::optional<std::size_t> state_of(std::span<const float> obs) const;

 private:
  Definition def_;
};

/// Two starts that both lead to a shared middle state, where the sign of a
/// 1-dim continuous action decides between a rewarding and a zero-reward end.
Env make_fork_env();

/// Corridor with discrete {left, right}, starting at the center; reaching either
/// end terminates with that end's reward. Throws ConfigError for invalid parameters.
Env make_chain_env(std::size_t length, std::size_t horizon, double left_reward, double right_reward);

/// Builds an env from {"name": "fork"} or {"name": "chain", "length", "horizon",
/// "left_reward", "right_reward"}. Throws ConfigError naming the bad field.
Env make_env(const nlohmann::json& spec);

/// Exact optimal undiscounted return from `start_state` within the horizon.
double optimal_return_oracle(const Env& env, std::size_t start_state);

/// Optimal return averaged over the start-state distribution (uniform over starts).
double optimal_return_oracle(const Env& env);

}  // namespace edt::envs
