#include "edt/envs/policy.hpp"

#include <cmath>
#include <string>

#include "edt/errors.hpp"

namespace edt::envs {

namespace {

const std::vector<std::pair<PolicyKind, const char*>> kKindNames = {
    {PolicyKind::kScriptedGood, "scripted_good"},   {PolicyKind::kScriptedBad, "scripted_bad"},
    {PolicyKind::kEpsilonMediocre, "epsilon_mediocre"}, {PolicyKind::kRandom, "random"},
    {PolicyKind::kMixture, "mixture"},              {PolicyKind::kTwoPolicy, "two_policy"},
};

Action random_action(const Env& env, std::mt19937_64& rng) {
  const auto& spec = env.action_spec();
  if (spec.kind == ActionKind::kDiscrete) {
    std::uniform_int_distribution<std::size_t> pick(0, spec.dim - 1);
    return {static_cast<float>(pick(rng))};
  }
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Action a(spec.dim);
  for (auto& v : a) v = u(rng);
  return a;
}

PolicyKind draw_component(const PolicySpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  for (const auto& [kind, weight] : spec.mixture) {
    if (x < weight) return kind;
    x -= weight;
  }
  return spec.mixture.back().first;
}

}  // namespace

std::string to_string(PolicyKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

PolicyKind policy_kind_from_string(const std::string& s) {
  for (const auto& [k, name] : kKindNames) {
    if (s == name) return k;
  }
  throw ConfigError("policy.kind: unknown policy kind '" + s + "'");
}

void PolicySpec::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
    throw ConfigError("policy.epsilon: must lie in [0, 1], got " + std::to_string(epsilon));
  }
  if (kind != PolicyKind::kMixture) return;
  if (mixture.empty()) throw ConfigError("policy.mixture: needs at least one component");
  double total = 0.0;
  for (const auto& [k, w] : mixture) {
    if (k == PolicyKind::kMixture || k == PolicyKind::kTwoPolicy) {
      throw ConfigError("policy.mixture: component kind '" + to_string(k) + "' is not allowed");
    }
    if (!(w >= 0.0)) throw ConfigError("policy.mixture: weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("policy.mixture: weights must sum to 1, got " + std::to_string(total));
  }
}

nlohmann::json PolicySpec::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)}, {"epsilon", epsilon}};
  if (kind == PolicyKind::kMixture) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& [k, w] : mixture) comps.push_back({{"kind", to_string(k)}, {"weight", w}});
    j["mixture"] = comps;
  }
  return j;
}

PolicySpec PolicySpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("policy: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "kind" && key != "epsilon" && key != "mixture") throw ConfigError("policy." + key + ": unknown key");
  }
  PolicySpec spec;
  if (!j.contains("kind") || !j.at("kind").is_string()) throw ConfigError("policy.kind: missing or not a string");
  spec.kind = policy_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("epsilon")) {
    if (!j.at("epsilon").is_number()) throw ConfigError("policy.epsilon: expected a number");
    spec.epsilon = j.at("epsilon").get<double>();
  }
  if (j.contains("mixture")) {
    if (!j.at("mixture").is_array()) throw ConfigError("policy.mixture: expected an array");
    for (const auto& c : j.at("mixture")) {
      if (!c.is_object() || !c.contains("kind") || !c.contains("weight") || !c.at("kind").is_string() ||
          !c.at("weight").is_number()) {
        throw ConfigError("policy.mixture: each component needs a string 'kind' and a numeric 'weight'");
      }
      spec.mixture.emplace_back(policy_kind_from_string(c.at("kind").get<std::string>()),
                                c.at("weight").get<double>());
    }
  }
  spec.validate();
  return spec;
}

std::mt19937_64 episode_rng(std::uint64_t seed, std::uint64_t episode) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(episode), static_cast<std::uint32_t>(episode >> 32)};
  return std::mt19937_64(seq);
}

Action policy_action(const Env& env, PolicyKind kind, double epsilon, std::size_t state, std::mt19937_64& rng) {
  switch (kind) {
    case PolicyKind::kScriptedGood:
      return env.representative(env.good_class(state));
    case PolicyKind::kScriptedBad:
      return env.representative(env.bad_class(state));
    case PolicyKind::kRandom:
      return random_action(env, rng);
    case PolicyKind::kEpsilonMediocre: {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      if (u(rng) < epsilon) return random_action(env, rng);
      return env.representative(env.bad_class(state));
    }
    case PolicyKind::kMixture:
    case PolicyKind::kTwoPolicy:
      break;
  }
  throw ContractViolation("policy_action needs a single-policy kind, got '" + to_string(kind) + "'");
}

data::Trajectory run_episode(const Env& env, const PolicySpec& spec, std::size_t start_state, std::mt19937_64& rng) {
  PolicyKind kind = spec.kind;
  if (kind == PolicyKind::kMixture) kind = draw_component(spec, rng);
  if (kind == PolicyKind::kTwoPolicy) {
    throw ContractViolation("two_policy episodes are produced by generate_episode");
  }
  std::vector<std::vector<float>> obs{env.observation(start_state)};
  std::vector<std::vector<float>> acts;
  std::vector<float> rews;
  std::size_t state = start_state;
  for (std::size_t t = 0; t < env.horizon() && !env.is_terminal(state); ++t) {
    Action a = policy_action(env, kind, spec.epsilon, state, rng);
    const StepResult r = env.step(state, a);
    acts.push_back(std::move(a));
    rews.push_back(static_cast<float>(r.reward));
    state = r.next_state;
    obs.push_back(env.observation(state));
  }
  return data::make_trajectory(std::move(obs), std::move(acts), std::move(rews));
}

data::Trajectory generate_episode(const Env& env, const PolicySpec& spec, std::uint64_t seed, std::size_t index) {
  auto rng = episode_rng(seed, index);
  if (spec.kind == PolicyKind::kTwoPolicy) {
    if (env.start_states().size() < 2) throw ConfigError("policy.kind: two_policy needs an env with two start states");
    const bool first = index % 2 == 0;
    PolicySpec half{first ? PolicyKind::kScriptedGood : PolicyKind::kScriptedBad, spec.epsilon, {}};
    return run_episode(env, half, env.start_states()[first ? 0 : 1], rng);
  }
  const auto& starts = env.start_states();
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  const std::size_t start = starts[pick(rng)];
  return run_episode(env, spec, start, rng);
}

data::Dataset generate_dataset(const Env& env, const PolicySpec& spec, std::size_t n_episodes, std::uint64_t seed) {
  if (n_episodes == 0) throw ConfigError("n_episodes must be >= 1");
  spec.validate();
  data::Dataset ds;
  ds.action = env.action_spec();
  ds.trajectories.reserve(n_episodes);
  for (std::size_t i = 0; i < n_episodes; ++i) ds.trajectories.push_back(generate_episode(env, spec, seed, i));
  ds.meta = {{"env", env.spec()}, {"seed", seed}, {"policy", spec.to_json()}};
  data::fit_statistics(ds);
  return ds;
}

bool replays_exactly(const Env& env, const data::Trajectory& traj) {
  if (traj.observations.empty()) return false;
  const auto start = env.state_of(traj.observations.front());
  if (!start) return false;
  std::size_t state = *start;
  for (std::size_t t = 0; t < traj.steps(); ++t) {
    if (env.is_terminal(state)) return false;
    StepResult r;
    try {
      r = env.step(state, traj.actions[t]);
    } catch (const ContractViolation&) {
      return false;
    }
    if (static_cast<float>(r.reward) != traj.rewards[t]) return false;
    state = r.next_state;
    if (traj.observations[t + 1] != env.observation(state)) return false;
  }
  return env.is_terminal(state) || traj.steps() == env.horizon();
}

double random_policy_baseline(const Env& env, std::size_t n_episodes, std::uint64_t seed) {
  if (n_episodes == 0) throw ContractViolation("random_policy_baseline needs at least one episode");
  const PolicySpec spec{PolicyKind::kRandom, 0.0, {}};
  double total = 0.0;
  for (std::size_t i = 0; i < n_episodes; ++i) total += generate_episode(env, spec, seed, i).episode_return();
  return total / static_cast<double>(n_episodes);
}

}  // namespace edt::envs
