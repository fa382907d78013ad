#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "edt/data/tokenizer.hpp"
#include "edt/data/window.hpp"
#include "edt/envs/env.hpp"
#include "edt/model/model.hpp"
#include "edt/training/checkpoint.hpp"

namespace edt::inference {

struct InferenceConfig {
  std::size_t T = 20;      ///< longest history considered; at most the model's T
  std::size_t delta = 2;   ///< search stride
  double kappa = 10.0;     ///< inverse temperature of the expert-return tilt
  double pct = 0.85;       ///< percentile kept when sampling return bins and discrete actions
  std::optional<std::size_t> fixed_w;  ///< baseline mode: always use this length
  bool heuristic = false;  ///< search around the previous step's length only
  std::size_t local_delta = 0;  ///< heuristic half-width; 0 means 2 * delta

  std::size_t heuristic_span() const { return local_delta == 0 ? 2 * delta : local_delta; }
  /// Throws ConfigError naming "inference.<field>".
  void validate() const;
  nlohmann::json to_json() const;
  static InferenceConfig from_json(const nlohmann::json& j);
  friend bool operator==(const InferenceConfig&, const InferenceConfig&) = default;
};

/// One past step as the model sees it.
struct BufferStep {
  std::vector<float> observation;  ///< normalized
  std::vector<float> action;       ///< stored width (class index for discrete)
  float return_token = 0.0f;       ///< sampled scaled return (bin center)
  std::int64_t timestep = 0;
};

/// The most recent `capacity` steps of the current episode.
class TraversedBuffer {
 public:
  explicit TraversedBuffer(std::size_t capacity);
  /// Drops the oldest step when full. Timesteps must be contiguous (ContractViolation).
  void push(BufferStep step);
  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }
  std::size_t capacity() const { return capacity_; }
  const BufferStep& operator[](std::size_t i) const { return steps_[i]; }

 private:
  std::size_t capacity_;
  std::deque<BufferStep> steps_;
};

/// The step being decided: normalized observation and its global timestep.
struct CurrentStep {
  std::vector<float> observation;
  std::int64_t timestep = 0;
};

/// Window of exactly `w` valid steps: the last w-1 buffered steps then the
/// current one, whose return token is `current_return` and action zero.
data::TokenWindow history_window(const model::ModelConfig& cfg, const TraversedBuffer& buffer,
                                 const CurrentStep& current, std::size_t w, float current_return = 0.0f);

/// Descending {T, T-delta, ...} restricted to [1, available]; {available} if that is empty.
std::vector<std::size_t> build_search_space(std::size_t T, std::size_t delta, std::size_t available);

/// [prev_w - span, prev_w + span] restricted to [1, min(T, available)].
std::vector<std::size_t> local_search_step(std::size_t prev_w, std::size_t span, std::size_t T,
                                           std::size_t available);

struct SearchResult {
  std::vector<std::size_t> lengths;
  std::vector<float> rtilde;  ///< per candidate, scaled units
  std::size_t chosen = 0;     ///< index into lengths
  std::vector<float> return_logits;  ///< of the chosen length's pass
  std::uint64_t forward_passes = 0;

  std::size_t chosen_w() const { return lengths[chosen]; }
  float rtilde_max() const { return rtilde[chosen]; }
};

/// Index of the largest value; ties go to the longest length.
std::size_t pick_length(std::span<const std::size_t> lengths, std::span<const float> rtilde);

/// One return-masked pass per candidate (batched), read at the current obs token.
SearchResult estimate_max_returns(const ParamStore<float>& params, const model::ModelConfig& cfg,
                                  const TraversedBuffer& buffer, const CurrentStep& current,
                                  std::span<const std::size_t> lengths);

/// softmax(logits) tilted by exp(kappa * bin center), normalized in log space.
std::vector<double> expert_return_distribution(std::span<const float> return_logits,
                                               const data::ReturnTokenizer& tok, double kappa);

/// Zeroes entries below the pct-quantile (linear interpolation over the values)
/// and renormalizes; the largest entry always survives.
std::vector<double> top_percentile_filter(std::span<const double> probs, double pct);

/// Draws an index from a probability vector.
std::size_t sample_index(std::span<const double> probs, std::mt19937_64& rng);

struct ActionChoice {
  envs::Action action;  ///< env action; class index for discrete spaces
  SearchResult search;
  std::size_t return_bin = 0;
  float return_token = 0.0f;
};

/// Candidate lengths for this step under the config's mode.
std::vector<std::size_t> candidate_lengths(const InferenceConfig& icfg, std::size_t available,
                                           std::optional<std::size_t> prev_w);

/// Length search, expert-return sampling, then one action pass with the sampled return token.
ActionChoice select_action(const ParamStore<float>& params, const model::ModelConfig& cfg,
                           const data::ReturnTokenizer& tok, const InferenceConfig& icfg,
                           const TraversedBuffer& buffer, const CurrentStep& current, std::mt19937_64& rng,
                           std::optional<std::size_t> prev_w = std::nullopt);

struct StepLog {
  std::size_t episode = 0;
  std::size_t step = 0;
  std::int64_t timestep = 0;
  std::size_t state = 0;
  std::size_t chosen_w = 0;
  float rtilde_max = 0.0f;
  std::size_t sampled_return_bin = 0;
  std::uint64_t search_passes = 0;
};

struct RolloutResult {
  std::vector<double> returns;
  std::vector<std::size_t> lengths;  ///< env steps per episode
  std::vector<StepLog> log;

  double mean() const;
  double stddev() const;  ///< population
};

/// Episodes seeded by (seed, episode index); start state uniform over the
/// env's starts unless given. ConfigError on env/model mismatch.
RolloutResult rollout(const envs::Env& env, const training::Checkpoint& ck, const InferenceConfig& icfg,
                      std::size_t n_episodes, std::uint64_t seed, std::optional<std::size_t> start_state = {});

/// CSV with columns episode,step,timestep,chosen_w,rtilde_max,sampled_return_bin.
void write_length_log(std::ostream& out, const std::vector<StepLog>& log);
/// Count of chosen lengths for w = 1..T (index w-1).
std::vector<std::size_t> length_histogram(const std::vector<StepLog>& log, std::size_t T);

}  // namespace edt::inference
