#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "edt/data/dataset.hpp"
#include "edt/envs/env.hpp"
#include "edt/envs/policy.hpp"
#include "edt/inference/inference.hpp"
#include "edt/model/model.hpp"
#include "edt/training/loss.hpp"

namespace edt::app {

struct DatasetSpec {
  std::string path;  ///< empty: <out>/dataset.jsonl
  std::optional<envs::PolicySpec> policy;  ///< empty: the env's canonical behavior policy
  std::size_t n_episodes = 100;
  std::uint64_t seed = 0;
};

struct EvalSpec {
  std::size_t n_episodes = 100;
  std::uint64_t seed = 0;
  std::optional<std::string> start_state;  ///< state name; empty: env start distribution
};

struct SweepSpec {
  std::string param;  ///< alpha | delta | fixed_w | elastic
  std::vector<double> values;
};

/// Everything a command needs. Every field has a default; unknown keys are rejected.
struct RunConfig {
  nlohmann::json env = {{"name", "fork"}};
  DatasetSpec dataset;
  /// Model section as given; obs/action fields missing here come from the dataset.
  nlohmann::json model = nlohmann::json::object();
  training::TrainConfig train;
  inference::InferenceConfig inference;
  EvalSpec eval;
  std::string out = "out";
  std::string checkpoint;  ///< empty: <out>/checkpoint.edt
  std::string resume;      ///< train: continue from this checkpoint
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  ///< ablation seeds
  SweepSpec sweep{"elastic", {}};

  std::filesystem::path dataset_path() const;
  std::filesystem::path checkpoint_path() const;
  nlohmann::json to_json() const;
  /// Throws ConfigError naming the offending field.
  static RunConfig from_json(const nlohmann::json& j);
};

/// Reads a JSON config file: IoError if unreadable, ConfigError if invalid.
RunConfig load_run_config(const std::filesystem::path& path);

/// Behavior policy used when the config names none: two_policy on fork,
/// mixture(random 0.5, epsilon_mediocre 0.5) elsewhere.
envs::PolicySpec default_policy(const envs::Env& env);

/// Model config for `ds`: the config's model section with obs/action fields
/// filled from the dataset when absent.
model::ModelConfig resolve_model(const RunConfig& cfg, const data::Dataset& ds);

}  // namespace edt::app
