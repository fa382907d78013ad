#include "edt/envs/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "edt/errors.hpp"

namespace edt::envs {

namespace {

std::vector<float> one_hot(std::size_t n, std::size_t i) {
  std::vector<float> v(n, 0.0f);
  v[i] = 1.0f;
  return v;
}

std::size_t sign_class(std::span<const float> a) { return a[0] >= 0.0f ? 1 : 0; }

}  // namespace

Env::Env(Definition def) : def_(std::move(def)) {
  const std::size_t n = def_.state_names.size();
  auto fail = [&](const std::string& what) { throw ContractViolation("env '" + def_.name + "': " + what); };
  if (n == 0) fail("no states");
  if (def_.observations.size() != n || def_.transitions.size() != n || def_.terminal.size() != n ||
      def_.good_class.size() != n || def_.bad_class.size() != n) {
    fail("per-state tables have inconsistent sizes");
  }
  for (const auto& o : def_.observations) {
    if (o.size() != def_.obs_dim) fail("observation width differs from obs_dim");
  }
  if (def_.n_classes == 0 || def_.class_representatives.size() != def_.n_classes ||
      def_.random_class_probs.size() != def_.n_classes) {
    fail("action class tables have inconsistent sizes");
  }
  if (def_.action.kind == ActionKind::kDiscrete && def_.action.dim != def_.n_classes) {
    fail("discrete arity must equal the class count");
  }
  if (def_.action.kind == ActionKind::kContinuous && def_.continuous_class == nullptr) {
    fail("continuous env needs an action classifier");
  }
  for (std::size_t s = 0; s < n; ++s) {
    if (def_.transitions[s].size() != def_.n_classes) fail("transition row has wrong class count");
    for (const auto& t : def_.transitions[s]) {
      if (t.next_state >= n) fail("transition leaves the state space");
      if (!std::isfinite(t.reward)) fail("non-finite reward");
    }
    if (def_.good_class[s] >= def_.n_classes || def_.bad_class[s] >= def_.n_classes) fail("bad scripted class");
  }
  if (def_.start_states.empty()) fail("no start states");
  for (std::size_t s : def_.start_states) {
    if (s >= n) fail("start state out of range");
  }
  if (def_.horizon == 0) fail("horizon must be >= 1");
}

std::size_t Env::state_index(const std::string& name) const {
  for (std::size_t s = 0; s < def_.state_names.size(); ++s) {
    if (def_.state_names[s] == name) return s;
  }
  throw ConfigError("env '" + def_.name + "' has no state named '" + name + "'");
}

std::size_t Env::action_class(const Action& a) const {
  const auto& spec = def_.action;
  if (spec.kind == ActionKind::kDiscrete) {
    if (a.size() != 1) throw ContractViolation("discrete action must hold exactly one index");
    const float v = a[0];
    if (!(v >= 0.0f) || v >= static_cast<float>(spec.dim) || v != std::floor(v)) {
      throw ContractViolation("discrete action " + std::to_string(v) + " outside [0, " + std::to_string(spec.dim) +
                              ")");
    }
    return static_cast<std::size_t>(v);
  }
  if (a.size() != spec.dim) {
    throw ContractViolation("continuous action has " + std::to_string(a.size()) + " dims, expected " +
                            std::to_string(spec.dim));
  }
  for (float v : a) {
    if (!std::isfinite(v)) throw ContractViolation("non-finite action");
  }
  return def_.continuous_class(a);
}

const StepResult& Env::transition(std::size_t state, std::size_t cls) const {
  if (state >= n_states()) throw ContractViolation("state out of range");
  if (is_terminal(state)) throw ContractViolation("cannot step from terminal state '" + state_name(state) + "'");
  return def_.transitions[state].at(cls);
}

StepResult Env::step(std::size_t state, const Action& a) const { return transition(state, action_class(a)); }

std::optional<std::size_t> Env::state_of(std::span<const float> obs) const {
  for (std::size_t s = 0; s < n_states(); ++s) {
    if (std::equal(obs.begin(), obs.end(), def_.observations[s].begin(), def_.observations[s].end())) return s;
  }
  return std::nullopt;
}

Env make_fork_env() {
  enum : std::size_t { kStartA, kStartB, kMid, kGood, kBad };
  Env::Definition d;
  d.name = "fork";
  d.spec = {{"name", "fork"}};
  d.state_names = {"start_a", "start_b", "mid", "end_good", "end_bad"};
  d.obs_dim = 5;
  for (std::size_t s = 0; s < 5; ++s) d.observations.push_back(one_hot(5, s));
  d.action = {ActionKind::kContinuous, 1};
  d.n_classes = 2;  // 0: a < 0, 1: a >= 0
  d.continuous_class = &sign_class;
  d.class_representatives = {{-1.0f}, {1.0f}};
  d.random_class_probs = {0.5, 0.5};
  d.transitions.assign(5, std::vector<StepResult>(2));
  for (std::size_t start : {kStartA, kStartB}) {
    d.transitions[start] = {{kMid, 0.0, false}, {kMid, 0.0, false}};
  }
  d.transitions[kMid] = {{kBad, 0.0, true}, {kGood, 1.0, true}};
  d.terminal = {0, 0, 0, 1, 1};
  d.start_states = {kStartA, kStartB};
  d.horizon = 2;
  d.good_class.assign(5, 1);
  d.bad_class.assign(5, 0);
  return Env(std::move(d));
}

Env make_chain_env(std::size_t length, std::size_t horizon, double left_reward, double right_reward) {
  if (length < 5 || length % 2 == 0) {
    throw ConfigError("chain length must be an odd integer >= 5, got " + std::to_string(length));
  }
  if (horizon == 0) throw ConfigError("chain horizon must be >= 1");
  if (!(left_reward > 0.0) || !(right_reward > left_reward) || !std::isfinite(right_reward)) {
    throw ConfigError("chain rewards must satisfy right_reward > left_reward > 0");
  }
  Env::Definition d;
  d.name = "chain";
  d.spec = {{"name", "chain"},
            {"length", length},
            {"horizon", horizon},
            {"left_reward", left_reward},
            {"right_reward", right_reward}};
  d.obs_dim = length;
  d.action = {ActionKind::kDiscrete, 2};
  d.n_classes = 2;  // 0: left, 1: right
  d.class_representatives = {{0.0f}, {1.0f}};
  d.random_class_probs = {0.5, 0.5};
  for (std::size_t s = 0; s < length; ++s) {
    d.state_names.push_back("cell_" + std::to_string(s));
    d.observations.push_back(one_hot(length, s));
    const bool end = s == 0 || s == length - 1;
    d.terminal.push_back(end ? 1 : 0);
    std::vector<StepResult> row(2);
    if (!end) {
      const std::size_t l = s - 1, r = s + 1;
      row[0] = {l, l == 0 ? left_reward : 0.0, l == 0};
      row[1] = {r, r == length - 1 ? right_reward : 0.0, r == length - 1};
    } else {
      row[0] = row[1] = {s, 0.0, true};
    }
    d.transitions.push_back(row);
  }
  d.start_states = {length / 2};
  d.horizon = horizon;
  d.good_class.assign(length, 1);
  d.bad_class.assign(length, 0);
  return Env(std::move(d));
}

Env make_env(const nlohmann::json& spec) {
  if (!spec.is_object() || !spec.contains("name") || !spec.at("name").is_string()) {
    throw ConfigError("env.name: missing or not a string");
  }
  const std::string name = spec.at("name").get<std::string>();
  auto reject_unknown = [&](std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : spec.items()) {
      if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
        throw ConfigError("env." + key + ": unknown key for env '" + name + "'");
      }
    }
  };
  if (name == "fork") {
    reject_unknown({"name"});
    return make_fork_env();
  }
  if (name == "chain") {
    reject_unknown({"name", "length", "horizon", "left_reward", "right_reward"});
    auto integer = [&](const char* key, std::size_t fallback) {
      if (!spec.contains(key)) return fallback;
      const auto& v = spec.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError(std::string("env.") + key + ": expected a non-negative integer");
      }
      return v.get<std::size_t>();
    };
    auto real = [&](const char* key, double fallback) {
      if (!spec.contains(key)) return fallback;
      if (!spec.at(key).is_number()) throw ConfigError(std::string("env.") + key + ": expected a number");
      return spec.at(key).get<double>();
    };
    return make_chain_env(integer("length", 9), integer("horizon", 12), real("left_reward", 0.3),
                          real("right_reward", 1.0));
  }
  throw ConfigError("env.name: unknown env '" + name + "' (expected 'fork' or 'chain')");
}

double optimal_return_oracle(const Env& env, std::size_t start_state) {
  if (start_state >= env.n_states()) throw ContractViolation("start state out of range");
  // value[s] holds the best return with k steps remaining; iterate k = 1..horizon.
  std::vector<double> value(env.n_states(), 0.0), next(env.n_states(), 0.0);
  for (std::size_t k = 1; k <= env.horizon(); ++k) {
    for (std::size_t s = 0; s < env.n_states(); ++s) {
      if (env.is_terminal(s)) {
        next[s] = 0.0;
        continue;
      }
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < env.n_classes(); ++c) {
        const auto& t = env.transition(s, c);
        best = std::max(best, t.reward + (t.terminal ? 0.0 : value[t.next_state]));
      }
      next[s] = best;
    }
    std::swap(value, next);
  }
  return value[start_state];
}

double optimal_return_oracle(const Env& env) {
  double total = 0.0;
  for (std::size_t s : env.start_states()) total += optimal_return_oracle(env, s);
  return total / static_cast<double>(env.start_states().size());
}

}  // namespace edt::envs
