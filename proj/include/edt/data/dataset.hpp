#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace edt::data {

enum class ActionKind { kContinuous, kDiscrete };

/// Continuous actions: `dim` values in [-1, 1]. Discrete actions: one index in [0, dim).
struct ActionSpec {
  ActionKind kind = ActionKind::kContinuous;
  std::size_t dim = 1;

  /// Width of one stored action vector (discrete actions store their index as a float).
  std::size_t stored_width() const { return kind == ActionKind::kContinuous ? dim : 1; }

  friend bool operator==(const ActionSpec&, const ActionSpec&) = default;
};

std::string to_string(ActionKind kind);
ActionKind action_kind_from_string(const std::string& s);

/// One episode. observations has steps + 1 entries (the final one is the
/// observation reached after the last action); returns_to_go has steps + 1
/// entries with the trailing one equal to 0.
struct Trajectory {
  std::vector<std::vector<float>> observations;
  std::vector<std::vector<float>> actions;
  std::vector<float> rewards;
  std::vector<float> returns_to_go;

  std::size_t steps() const { return rewards.size(); }
  float episode_return() const { return returns_to_go.empty() ? 0.0f : returns_to_go.front(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Inclusive return-to-go: rtg[t] = rewards[t] + rtg[t+1], same length as `rewards`.
std::vector<float> compute_rtg(std::span<const float> rewards);

/// Builds a trajectory and fills returns_to_go (steps + 1 entries).
/// Throws ContractViolation when the lengths are inconsistent.
Trajectory make_trajectory(std::vector<std::vector<float>> observations, std::vector<std::vector<float>> actions,
                           std::vector<float> rewards);

struct Dataset {
  std::vector<Trajectory> trajectories;
  ActionSpec action;
  std::vector<float> obs_mean;
  std::vector<float> obs_std;
  float return_min = 0.0f;
  float return_max = 1.0f;
  /// {"env": ..., "seed": ..., "policy": ..., "action_kind": ...}
  nlohmann::json meta = nlohmann::json::object();

  std::size_t obs_dim() const;
  std::size_t total_steps() const;
};

constexpr float kStdFloor = 1e-6f;

/// Per-dimension population mean/std over every stored observation; std is floored at kStdFloor.
void fit_normalization(Dataset& ds);

/// return_min/return_max over all per-step returns-to-go, which includes every episode return.
void fit_return_bounds(Dataset& ds);

/// Both of the above. Throws ConfigError on an empty dataset.
void fit_statistics(Dataset& ds);

std::vector<float> normalize_observation(std::span<const float> obs, const Dataset& ds);
std::vector<float> denormalize_observation(std::span<const float> obs, const Dataset& ds);

/// Normalization and return-scaling statistics needed at inference time.
struct DataStats {
  std::vector<float> obs_mean;
  std::vector<float> obs_std;
  float return_min = 0.0f;
  float return_max = 1.0f;

  static DataStats from(const Dataset& ds) { return {ds.obs_mean, ds.obs_std, ds.return_min, ds.return_max}; }

  std::vector<float> normalize(std::span<const float> obs) const;
  /// (raw - return_min) / (return_max - return_min); a degenerate range scales by 1.
  float scale_return(float raw) const;
  float unscale_return(float scaled) const;

  nlohmann::json to_json() const;
  static DataStats from_json(const nlohmann::json& j);

  friend bool operator==(const DataStats&, const DataStats&) = default;
};

/// Clips every reward to [-1, 1] and recomputes returns-to-go.
void clip_rewards(Dataset& ds);

}  // namespace edt::data
