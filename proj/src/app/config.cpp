#include "edt/app/config.hpp"

#include <fstream>

#include "edt/errors.hpp"

namespace edt::app {

namespace {

std::size_t count_field(const std::string& name, const nlohmann::json& v) {
  if (!v.is_number_unsigned()) throw ConfigError(name + ": expected a non-negative integer");
  return v.get<std::size_t>();
}

std::string string_field(const std::string& name, const nlohmann::json& v) {
  if (!v.is_string()) throw ConfigError(name + ": expected a string");
  return v.get<std::string>();
}

void require_object(const std::string& name, const nlohmann::json& v) {
  if (!v.is_object()) throw ConfigError(name + ": expected an object");
}

DatasetSpec dataset_from_json(const nlohmann::json& j) {
  require_object("dataset", j);
  DatasetSpec d;
  for (const auto& [key, v] : j.items()) {
    if (key == "path") {
      d.path = string_field("dataset.path", v);
    } else if (key == "policy") {
      if (v.is_null()) {
        d.policy.reset();
      } else {
        try {
          d.policy = envs::PolicySpec::from_json(v);
        } catch (const ConfigError& e) {
          throw ConfigError(std::string("dataset.policy: ") + e.what());
        }
      }
    } else if (key == "n_episodes") {
      d.n_episodes = count_field("dataset.n_episodes", v);
    } else if (key == "seed") {
      d.seed = count_field("dataset.seed", v);
    } else {
      throw ConfigError("dataset." + key + ": unknown key");
    }
  }
  if (d.n_episodes == 0) throw ConfigError("dataset.n_episodes: must be >= 1");
  return d;
}

EvalSpec eval_from_json(const nlohmann::json& j) {
  require_object("eval", j);
  EvalSpec e;
  for (const auto& [key, v] : j.items()) {
    if (key == "n_episodes") {
      e.n_episodes = count_field("eval.n_episodes", v);
    } else if (key == "seed") {
      e.seed = count_field("eval.seed", v);
    } else if (key == "start_state") {
      if (v.is_null()) {
        e.start_state.reset();
      } else {
        e.start_state = string_field("eval.start_state", v);
      }
    } else {
      throw ConfigError("eval." + key + ": unknown key");
    }
  }
  if (e.n_episodes == 0) throw ConfigError("eval.n_episodes: must be >= 1");
  return e;
}

SweepSpec sweep_from_json(const nlohmann::json& j) {
  require_object("sweep", j);
  SweepSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "param") {
      s.param = string_field("sweep.param", v);
    } else if (key == "values") {
      if (!v.is_array()) throw ConfigError("sweep.values: expected an array of numbers");
      s.values.clear();
      for (const auto& x : v) {
        if (!x.is_number()) throw ConfigError("sweep.values: expected an array of numbers");
        s.values.push_back(x.get<double>());
      }
    } else {
      throw ConfigError("sweep." + key + ": unknown key");
    }
  }
  return s;
}

}  // namespace

std::filesystem::path RunConfig::dataset_path() const {
  return dataset.path.empty() ? std::filesystem::path(out) / "dataset.jsonl" : std::filesystem::path(dataset.path);
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? std::filesystem::path(out) / "checkpoint.edt" : std::filesystem::path(checkpoint);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json ds{{"path", dataset.path},
                    {"policy", nullptr},
                    {"n_episodes", dataset.n_episodes},
                    {"seed", dataset.seed}};
  if (dataset.policy) ds["policy"] = dataset.policy->to_json();
  nlohmann::json ev{{"n_episodes", eval.n_episodes}, {"seed", eval.seed}, {"start_state", nullptr}};
  if (eval.start_state) ev["start_state"] = *eval.start_state;
  return {{"env", env},
          {"dataset", ds},
          {"model", model},
          {"train", train.to_json()},
          {"inference", inference.to_json()},
          {"eval", ev},
          {"out", out},
          {"checkpoint", checkpoint},
          {"resume", resume},
          {"seeds", seeds},
          {"sweep", {{"param", sweep.param}, {"values", sweep.values}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  require_object("config", j);
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "env") {
      require_object("env", v);
      c.env = v;
    } else if (key == "dataset") {
      c.dataset = dataset_from_json(v);
    } else if (key == "model") {
      model::ModelConfig::from_json(v);  // rejects unknown keys and bad types now
      c.model = v;
    } else if (key == "train") {
      c.train = training::TrainConfig::from_json(v);
    } else if (key == "inference") {
      c.inference = inference::InferenceConfig::from_json(v);
    } else if (key == "eval") {
      c.eval = eval_from_json(v);
    } else if (key == "out") {
      c.out = string_field("out", v);
    } else if (key == "checkpoint") {
      c.checkpoint = string_field("checkpoint", v);
    } else if (key == "resume") {
      c.resume = string_field("resume", v);
    } else if (key == "seeds") {
      if (!v.is_array() || v.empty()) throw ConfigError("seeds: expected a non-empty array of integers");
      c.seeds.clear();
      for (const auto& s : v) c.seeds.push_back(count_field("seeds", s));
    } else if (key == "sweep") {
      c.sweep = sweep_from_json(v);
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  envs::make_env(c.env);
  c.train.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

envs::PolicySpec default_policy(const envs::Env& env) {
  if (env.name() == "fork") return envs::PolicySpec{envs::PolicyKind::kTwoPolicy};
  return envs::PolicySpec{envs::PolicyKind::kMixture,
                          0.3,
                          {{envs::PolicyKind::kRandom, 0.5}, {envs::PolicyKind::kEpsilonMediocre, 0.5}}};
}

model::ModelConfig resolve_model(const RunConfig& cfg, const data::Dataset& ds) {
  auto m = model::ModelConfig::from_json(cfg.model);
  if (!cfg.model.contains("obs_dim")) m.obs_dim = ds.obs_dim();
  if (!cfg.model.contains("action_kind")) m.action.kind = ds.action.kind;
  if (!cfg.model.contains("action_dim")) m.action.dim = ds.action.dim;
  std::size_t longest = 0;
  for (const auto& t : ds.trajectories) longest = std::max(longest, t.steps());
  if (longest > m.max_timestep) {
    throw ConfigError("model.max_timestep: " + std::to_string(m.max_timestep) + " is shorter than the longest episode (" +
                      std::to_string(longest) + " steps)");
  }
  m.validate();
  return m;
}

}  // namespace edt::app
