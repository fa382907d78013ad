#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "edt/app/config.hpp"
#include "edt/inference/inference.hpp"
#include "edt/training/checkpoint.hpp"

namespace edt::app {

enum ExitCode : int { kOk = 0, kConfigError = 1, kIoError = 2, kNumericFault = 3 };

struct GenDataSummary {
  std::filesystem::path path;
  std::size_t episodes = 0;
  double return_min = 0.0;
  double return_max = 0.0;
  double return_mean = 0.0;
};

/// Generates the dataset described by cfg.env/cfg.dataset and writes it as JSONL.
GenDataSummary cmd_gen_data(const RunConfig& cfg, std::ostream& log);

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::size_t steps = 0;
  std::optional<training::LossBreakdown> final_loss;
};

/// Trains on the dataset file (or resumes cfg.resume) and writes the checkpoint
/// and a metrics CSV, one row per optimizer step.
TrainSummary cmd_train(const RunConfig& cfg, std::ostream& log);

struct EvalSummary {
  nlohmann::json results;
  std::filesystem::path results_path;
  std::filesystem::path lengths_path;
  std::filesystem::path histogram_path;
};

/// Rolls out the checkpoint and writes results.json, chosen_lengths.csv and length_histogram.csv.
EvalSummary cmd_eval(const RunConfig& cfg, std::ostream& log);

struct AblationRow {
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string mode;  ///< elastic | fixed
  std::optional<std::size_t> w;
  double mean = 0.0;
  double std = 0.0;
  std::string checkpoint_hash;
};

/// Trains/evaluates one row per (sweep value, seed) and writes ablation.csv.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& log);

/// Rollouts for cfg.eval on an already loaded checkpoint; ConfigError when
/// the env does not match the checkpoint.
inference::RolloutResult evaluate(const envs::Env& env, const training::Checkpoint& ck,
                                  const inference::InferenceConfig& icfg, const EvalSpec& eval);

/// Uniform-random policy mean over 1000 episodes, cached as random_baseline.json in `dir`.
double cached_random_baseline(const envs::Env& env, const std::filesystem::path& dir);

/// (mean - random) / (oracle - random); empty when oracle == random.
std::optional<double> normalized_score(double mean, double random_baseline, double oracle);

/// Checkpoint fingerprint used in ablation tables.
std::string checkpoint_hash(const training::Checkpoint& ck);

/// Parses argv (gen-data | train | eval | ablate) and runs the command; returns the exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace edt::app
