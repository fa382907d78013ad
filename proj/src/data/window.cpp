#include "edt/data/window.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "edt/errors.hpp"

namespace edt::data {

std::size_t TokenWindow::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

TokenWindow TokenWindow::padded(std::size_t length, std::size_t obs_dim, std::size_t action_width) {
  TokenWindow w;
  w.length = length;
  w.obs_dim = obs_dim;
  w.action_width = action_width;
  w.observations.assign(length * obs_dim, 0.0f);
  w.returns.assign(length, 0.0f);
  w.actions.assign(length * action_width, 0.0f);
  w.timesteps.assign(length, 0);
  w.valid.assign(length, 0);
  w.next_observations.assign(length * obs_dim, 0.0f);
  w.has_next.assign(length, 0);
  return w;
}

TokenWindow make_window(const Dataset& ds, std::size_t trajectory, std::size_t start, std::size_t T) {
  if (T == 0) throw ConfigError("window length T must be >= 1");
  if (trajectory >= ds.trajectories.size()) {
    throw ContractViolation("trajectory index " + std::to_string(trajectory) + " out of range");
  }
  const Trajectory& traj = ds.trajectories[trajectory];
  if (start >= traj.steps()) {
    throw ContractViolation("window start " + std::to_string(start) + " beyond trajectory of " +
                            std::to_string(traj.steps()) + " steps");
  }
  const DataStats stats = DataStats::from(ds);
  const std::size_t dim = ds.obs_dim();
  const std::size_t aw = ds.action.stored_width();
  TokenWindow w = TokenWindow::padded(T, dim, aw);
  w.trajectory = trajectory;
  w.start = start;
  const std::size_t n = std::min(T, traj.steps() - start);
  const std::size_t pad = T - n;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = pad + i;
    const std::size_t step = start + i;
    const auto obs = stats.normalize(traj.observations[step]);
    std::copy(obs.begin(), obs.end(), w.observations.begin() + static_cast<std::ptrdiff_t>(pos * dim));
    const auto& act = traj.actions[step];
    if (act.size() != aw) {
      throw ContractViolation("stored action width " + std::to_string(act.size()) + " != " + std::to_string(aw));
    }
    std::copy(act.begin(), act.end(), w.actions.begin() + static_cast<std::ptrdiff_t>(pos * aw));
    w.returns[pos] = stats.scale_return(traj.returns_to_go[step]);
    w.timesteps[pos] = static_cast<std::int64_t>(step);
    w.valid[pos] = 1;
    // The observation after the final action exists, but the window only
    // carries next-observation targets for steps that are followed by another
    // step inside this window.
    if (i + 1 < n) {
      const auto next = stats.normalize(traj.observations[step + 1]);
      std::copy(next.begin(), next.end(), w.next_observations.begin() + static_cast<std::ptrdiff_t>(pos * dim));
      w.has_next[pos] = 1;
    }
  }
  return w;
}

TokenWindow sample_training_window(const Dataset& ds, std::size_t T, std::mt19937_64& rng) {
  if (T == 0) throw ConfigError("window length T must be >= 1");
  const std::size_t total = ds.total_steps();
  if (total == 0) throw ConfigError("cannot sample training windows from an empty dataset");
  // A uniform draw over all transitions is the same as choosing a trajectory
  // proportionally to its length and then a uniform offset inside it.
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::size_t k = pick(rng);
  std::size_t traj = 0;
  while (k >= ds.trajectories[traj].steps()) {
    k -= ds.trajectories[traj].steps();
    ++traj;
  }
  return make_window(ds, traj, k, T);
}

}  // namespace edt::data
