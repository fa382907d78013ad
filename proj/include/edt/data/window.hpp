#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "edt/data/dataset.hpp"

namespace edt::data {

/// Fixed-length, left-padded model input. Valid positions are a contiguous
/// suffix [T - valid_count(), T). Padded positions hold zeros.
struct TokenWindow {
  std::size_t length = 0;      ///< T
  std::size_t obs_dim = 0;
  std::size_t action_width = 0;  ///< stored action width (1 for discrete)
  std::vector<float> observations;  ///< length * obs_dim, normalized
  std::vector<float> returns;       ///< length, scaled returns-to-go
  std::vector<float> actions;       ///< length * action_width
  std::vector<std::int64_t> timesteps;  ///< global environment step per position
  std::vector<std::uint8_t> valid;
  /// Normalized observation following each position's action (zeros where absent).
  std::vector<float> next_observations;
  std::vector<std::uint8_t> has_next;
  std::size_t trajectory = 0;
  std::size_t start = 0;

  std::size_t valid_count() const;
  std::size_t first_valid() const { return length - valid_count(); }

  const float* obs_at(std::size_t pos) const { return observations.data() + pos * obs_dim; }
  const float* action_at(std::size_t pos) const { return actions.data() + pos * action_width; }

  /// Empty window of the given shape, every position padded.
  static TokenWindow padded(std::size_t length, std::size_t obs_dim, std::size_t action_width);
};

/// Window over steps [start, start + min(T, steps - start)) of one trajectory.
TokenWindow make_window(const Dataset& ds, std::size_t trajectory, std::size_t start, std::size_t T);

/// Picks a trajectory with probability proportional to its step count, then a
/// uniform start step. Throws ConfigError on an empty dataset or T == 0.
TokenWindow sample_training_window(const Dataset& ds, std::size_t T, std::mt19937_64& rng);

}  // namespace edt::data
