#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <json.hpp>

#include "edt/data/dataset.hpp"
#include "edt/envs/env.hpp"

namespace edt::envs {

enum class PolicyKind {
  kScriptedGood,
  kScriptedBad,
  /// Random action with probability epsilon, otherwise the poor-goal action.
  kEpsilonMediocre,
  kRandom,
  /// One component policy drawn per episode according to the weights.
  kMixture,
  /// Alternates episodes: even ones start at the first start state and act
  /// well, odd ones start at the second start state and act poorly.
  kTwoPolicy,
};

struct PolicySpec {
  PolicyKind kind = PolicyKind::kRandom;
  double epsilon = 0.3;
  /// Mixture components; nested mixtures and two_policy components are rejected.
  std::vector<std::pair<PolicyKind, double>> mixture;

  /// Throws ConfigError when epsilon is outside [0, 1] or mixture weights do not sum to 1.
  void validate() const;

  nlohmann::json to_json() const;
  static PolicySpec from_json(const nlohmann::json& j);
};

PolicyKind policy_kind_from_string(const std::string& s);
std::string to_string(PolicyKind kind);

/// Per-episode generator derived from (seed, episode index).
std::mt19937_64 episode_rng(std::uint64_t seed, std::uint64_t episode);

/// One action of a non-mixture policy in `state`.
Action policy_action(const Env& env, PolicyKind kind, double epsilon, std::size_t state, std::mt19937_64& rng);

/// Rolls out one episode of `spec` from `start_state`. A mixture picks its component first.
data::Trajectory run_episode(const Env& env, const PolicySpec& spec, std::size_t start_state, std::mt19937_64& rng);

/// Episode `index` of the dataset generated with `spec` and `seed`.
data::Trajectory generate_episode(const Env& env, const PolicySpec& spec, std::uint64_t seed, std::size_t index);

/// Rolls out n_episodes with independent per-episode streams and fits dataset
/// statistics. Throws ConfigError if n_episodes == 0 or the spec is invalid.
data::Dataset generate_dataset(const Env& env, const PolicySpec& spec, std::size_t n_episodes, std::uint64_t seed);

/// Checks that a trajectory is reproduced exactly by the env's transition function.
bool replays_exactly(const Env& env, const data::Trajectory& traj);

/// Mean return of the uniform-random policy over n_episodes seeded episodes.
double random_policy_baseline(const Env& env, std::size_t n_episodes, std::uint64_t seed);

}  // namespace edt::envs
