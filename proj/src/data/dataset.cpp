#include "edt/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "edt/errors.hpp"

namespace edt::data {

std::string to_string(ActionKind kind) { return kind == ActionKind::kContinuous ? "continuous" : "discrete"; }

ActionKind action_kind_from_string(const std::string& s) {
  if (s == "continuous") return ActionKind::kContinuous;
  if (s == "discrete") return ActionKind::kDiscrete;
  throw ConfigError("action_kind: expected 'continuous' or 'discrete', got '" + s + "'");
}

std::vector<float> compute_rtg(std::span<const float> rewards) {
  std::vector<float> rtg(rewards.size());
  float running = 0.0f;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    running = rewards[t] + running;
    rtg[t] = running;
  }
  return rtg;
}

Trajectory make_trajectory(std::vector<std::vector<float>> observations, std::vector<std::vector<float>> actions,
                           std::vector<float> rewards) {
  if (observations.size() != rewards.size() + 1 || actions.size() != rewards.size()) {
    throw ContractViolation("trajectory needs steps+1 observations and steps actions; got " +
                            std::to_string(observations.size()) + " observations, " +
                            std::to_string(actions.size()) + " actions, " + std::to_string(rewards.size()) +
                            " rewards");
  }
  Trajectory t;
  t.returns_to_go = compute_rtg(rewards);
  t.returns_to_go.push_back(0.0f);
  t.observations = std::move(observations);
  t.actions = std::move(actions);
  t.rewards = std::move(rewards);
  return t;
}

std::size_t Dataset::obs_dim() const {
  for (const auto& t : trajectories) {
    if (!t.observations.empty()) return t.observations.front().size();
  }
  return 0;
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.steps();
  return n;
}

void fit_normalization(Dataset& ds) {
  const std::size_t dim = ds.obs_dim();
  if (ds.trajectories.empty() || dim == 0) {
    throw ConfigError("cannot fit normalization on an empty dataset");
  }
  std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
  std::size_t count = 0;
  for (const auto& t : ds.trajectories) {
    for (const auto& o : t.observations) {
      for (std::size_t d = 0; d < dim; ++d) mean[d] += o[d];
      ++count;
    }
  }
  for (auto& m : mean) m /= static_cast<double>(count);
  for (const auto& t : ds.trajectories) {
    for (const auto& o : t.observations) {
      for (std::size_t d = 0; d < dim; ++d) sq[d] += (o[d] - mean[d]) * (o[d] - mean[d]);
    }
  }
  ds.obs_mean.assign(dim, 0.0f);
  ds.obs_std.assign(dim, 0.0f);
  for (std::size_t d = 0; d < dim; ++d) {
    ds.obs_mean[d] = static_cast<float>(mean[d]);
    ds.obs_std[d] = std::max(static_cast<float>(std::sqrt(sq[d] / static_cast<double>(count))), kStdFloor);
  }
}

void fit_return_bounds(Dataset& ds) {
  if (ds.trajectories.empty()) {
    throw ConfigError("cannot fit return bounds on an empty dataset");
  }
  float lo = std::numeric_limits<float>::infinity();
  float hi = -lo;
  for (const auto& t : ds.trajectories) {
    for (std::size_t s = 0; s < t.steps(); ++s) {
      lo = std::min(lo, t.returns_to_go[s]);
      hi = std::max(hi, t.returns_to_go[s]);
    }
  }
  if (lo > hi) lo = hi = 0.0f;  // only zero-step episodes
  ds.return_min = lo;
  ds.return_max = hi;
}

void fit_statistics(Dataset& ds) {
  fit_normalization(ds);
  fit_return_bounds(ds);
}

std::vector<float> DataStats::normalize(std::span<const float> obs) const {
  if (obs.size() != obs_mean.size()) {
    throw ContractViolation("observation has " + std::to_string(obs.size()) + " dims, statistics have " +
                            std::to_string(obs_mean.size()));
  }
  std::vector<float> out(obs.size());
  for (std::size_t d = 0; d < obs.size(); ++d) out[d] = (obs[d] - obs_mean[d]) / obs_std[d];
  return out;
}

float DataStats::scale_return(float raw) const {
  const float range = return_max - return_min;
  return (raw - return_min) / (range > 0.0f ? range : 1.0f);
}

float DataStats::unscale_return(float scaled) const {
  const float range = return_max - return_min;
  return scaled * (range > 0.0f ? range : 1.0f) + return_min;
}

nlohmann::json DataStats::to_json() const {
  auto widen = [](const std::vector<float>& v) { return std::vector<double>(v.begin(), v.end()); };
  return {{"obs_mean", widen(obs_mean)},
          {"obs_std", widen(obs_std)},
          {"return_min", static_cast<double>(return_min)},
          {"return_max", static_cast<double>(return_max)}};
}

DataStats DataStats::from_json(const nlohmann::json& j) {
  auto narrow = [](const nlohmann::json& a) {
    std::vector<float> v;
    for (const auto& x : a) v.push_back(static_cast<float>(x.get<double>()));
    return v;
  };
  return {narrow(j.at("obs_mean")), narrow(j.at("obs_std")), static_cast<float>(j.at("return_min").get<double>()),
          static_cast<float>(j.at("return_max").get<double>())};
}

std::vector<float> normalize_observation(std::span<const float> obs, const Dataset& ds) {
  return DataStats::from(ds).normalize(obs);
}

std::vector<float> denormalize_observation(std::span<const float> obs, const Dataset& ds) {
  std::vector<float> out(obs.size());
  for (std::size_t d = 0; d < obs.size(); ++d) out[d] = obs[d] * ds.obs_std[d] + ds.obs_mean[d];
  return out;
}

void clip_rewards(Dataset& ds) {
  for (auto& t : ds.trajectories) {
    for (auto& r : t.rewards) r = std::clamp(r, -1.0f, 1.0f);
    t.returns_to_go = compute_rtg(t.rewards);
    t.returns_to_go.push_back(0.0f);
  }
}

}  // namespace edt::data
