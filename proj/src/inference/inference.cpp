#include "edt/inference/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "edt/envs/policy.hpp"
#include "edt/errors.hpp"

namespace edt::inference {

void InferenceConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("inference." + field + ": " + why);
  };
  if (T == 0) fail("T", "must be >= 1");
  if (delta == 0) fail("delta", "must be >= 1");
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) fail("kappa", "must be finite and >= 0");
  if (!(pct > 0.0 && pct < 1.0)) fail("pct", "must lie in (0, 1)");
  if (fixed_w && *fixed_w == 0) fail("fixed_w", "must be >= 1");
  if (fixed_w && *fixed_w > T) fail("fixed_w", "must not exceed T");
  if (fixed_w && heuristic) fail("heuristic", "cannot be combined with fixed_w");
}

nlohmann::json InferenceConfig::to_json() const {
  nlohmann::json j{{"T", T},
                   {"delta", delta},
                   {"kappa", kappa},
                   {"pct", pct},
                   {"fixed_w", nullptr},
                   {"heuristic", heuristic},
                   {"local_delta", local_delta}};
  if (fixed_w) j["fixed_w"] = *fixed_w;
  return j;
}

InferenceConfig InferenceConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("inference: expected an object");
  InferenceConfig c;
  auto count = [](const std::string& key, const nlohmann::json& v) {
    if (!v.is_number_unsigned()) throw ConfigError("inference." + key + ": expected a non-negative integer");
    return v.get<std::size_t>();
  };
  auto real = [](const std::string& key, const nlohmann::json& v) {
    if (!v.is_number()) throw ConfigError("inference." + key + ": expected a number");
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "T") {
      c.T = count(key, v);
    } else if (key == "delta") {
      c.delta = count(key, v);
    } else if (key == "kappa") {
      c.kappa = real(key, v);
    } else if (key == "pct") {
      c.pct = real(key, v);
    } else if (key == "fixed_w") {
      if (v.is_null()) {
        c.fixed_w.reset();
      } else {
        c.fixed_w = count(key, v);
      }
    } else if (key == "heuristic") {
      if (!v.is_boolean()) throw ConfigError("inference.heuristic: expected a boolean");
      c.heuristic = v.get<bool>();
    } else if (key == "local_delta") {
      c.local_delta = count(key, v);
    } else {
      throw ConfigError("inference." + key + ": unknown key");
    }
  }
  c.validate();
  return c;
}

TraversedBuffer::TraversedBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ContractViolation("buffer capacity must be >= 1");
}

void TraversedBuffer::push(BufferStep step) {
  if (!steps_.empty() && step.timestep != steps_.back().timestep + 1) {
    throw ContractViolation("buffer timesteps must be contiguous");
  }
  if (steps_.size() == capacity_) steps_.pop_front();
  steps_.push_back(std::move(step));
}

data::TokenWindow history_window(const model::ModelConfig& cfg, const TraversedBuffer& buffer,
                                 const CurrentStep& current, std::size_t w, float current_return) {
  if (w == 0 || w > buffer.size() + 1) throw ContractViolation("history length exceeds the available steps");
  if (current.observation.size() != cfg.obs_dim) throw ContractViolation("current observation has the wrong width");
  const std::size_t aw = cfg.action.stored_width();
  auto win = data::TokenWindow::padded(w, cfg.obs_dim, aw);
  const std::size_t first = buffer.size() - (w - 1);
  for (std::size_t pos = 0; pos + 1 < w; ++pos) {
    const auto& s = buffer[first + pos];
    std::copy(s.observation.begin(), s.observation.end(), win.observations.begin() + pos * cfg.obs_dim);
    std::copy(s.action.begin(), s.action.end(), win.actions.begin() + pos * aw);
    win.returns[pos] = s.return_token;
    win.timesteps[pos] = s.timestep;
    win.valid[pos] = 1;
  }
  const std::size_t last = w - 1;
  std::copy(current.observation.begin(), current.observation.end(), win.observations.begin() + last * cfg.obs_dim);
  win.returns[last] = current_return;
  win.timesteps[last] = current.timestep;
  win.valid[last] = 1;
  return win;
}

std::vector<std::size_t> build_search_space(std::size_t T, std::size_t delta, std::size_t available) {
  if (delta == 0 || available == 0) throw ContractViolation("search space needs delta >= 1 and available >= 1");
  std::vector<std::size_t> out;
  for (std::size_t w = T; w >= 1; w = w > delta ? w - delta : 0) {
    if (w <= available) out.push_back(w);
  }
  if (out.empty()) out.push_back(available);
  return out;
}

std::vector<std::size_t> local_search_step(std::size_t prev_w, std::size_t span, std::size_t T,
                                           std::size_t available) {
  const std::size_t hi = std::min(T, available);
  const std::size_t lo = prev_w > span ? prev_w - span : 1;
  std::vector<std::size_t> out;
  for (std::size_t w = std::max<std::size_t>(lo, 1); w <= std::min(prev_w + span, hi); ++w) out.push_back(w);
  if (out.empty()) out.push_back(hi);
  return out;
}

std::size_t pick_length(std::span<const std::size_t> lengths, std::span<const float> rtilde) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (rtilde[i] > rtilde[best] || (rtilde[i] == rtilde[best] && lengths[i] > lengths[best])) best = i;
  }
  return best;
}

SearchResult estimate_max_returns(const ParamStore<float>& params, const model::ModelConfig& cfg,
                                  const TraversedBuffer& buffer, const CurrentStep& current,
                                  std::span<const std::size_t> lengths) {
  if (lengths.empty()) throw ContractViolation("no candidate lengths");
  std::vector<data::TokenWindow> windows;
  windows.reserve(lengths.size());
  for (std::size_t w : lengths) windows.push_back(history_window(cfg, buffer, current, w));
  const std::uint64_t before = model::forward_window_count();
  const auto outs = model::forward_many(params, cfg, windows, model::MaskMode::kReturnMasked);
  SearchResult r;
  r.forward_passes = model::forward_window_count() - before;
  r.lengths.assign(lengths.begin(), lengths.end());
  for (const auto& o : outs) {
    const float v = o.rtilde[o.length - 1];
    if (!std::isfinite(v)) throw NumericFault("estimate_max_returns");
    r.rtilde.push_back(v);
  }
  r.chosen = pick_length(r.lengths, r.rtilde);
  const auto& o = outs[r.chosen];
  r.return_logits.resize(cfg.n_return_bins);
  for (std::size_t k = 0; k < cfg.n_return_bins; ++k) r.return_logits[k] = o.return_logits(o.length - 1, k);
  return r;
}

namespace {

double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) throw NumericFault("log_sum_exp");
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

std::vector<double> expert_return_distribution(std::span<const float> return_logits,
                                               const data::ReturnTokenizer& tok, double kappa) {
  if (return_logits.size() != tok.n_bins()) throw ContractViolation("logit count differs from tokenizer bins");
  std::vector<double> logp(return_logits.begin(), return_logits.end());
  const double z = log_sum_exp(logp);
  for (std::size_t b = 0; b < logp.size(); ++b) logp[b] = (logp[b] - z) + kappa * tok.detokenize(b);
  const double z2 = log_sum_exp(logp);
  for (auto& v : logp) v = std::exp(v - z2);
  return logp;
}

std::vector<double> top_percentile_filter(std::span<const double> probs, double pct) {
  if (probs.empty()) throw ContractViolation("empty probability vector");
  std::vector<double> sorted(probs.begin(), probs.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = pct * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double threshold = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  const auto top = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  std::vector<double> out(probs.size(), 0.0);
  double total = 0.0;
  bool dropped = false;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] >= threshold || i == top) {
      out[i] = probs[i];
      total += probs[i];
    } else {
      dropped = dropped || probs[i] > 0.0;
    }
  }
  if (!dropped) return out;
  if (!(total > 0.0)) {
    out.assign(probs.size(), 0.0);
    out[top] = 1.0;
    return out;
  }
  for (auto& v : out) v /= total;
  return out;
}

std::size_t sample_index(std::span<const double> probs, std::mt19937_64& rng) {
  std::discrete_distribution<std::size_t> dist(probs.begin(), probs.end());
  return dist(rng);
}

std::vector<std::size_t> candidate_lengths(const InferenceConfig& icfg, std::size_t available,
                                           std::optional<std::size_t> prev_w) {
  if (icfg.fixed_w) return {std::min(*icfg.fixed_w, available)};
  if (icfg.heuristic && prev_w) return local_search_step(*prev_w, icfg.heuristic_span(), icfg.T, available);
  return build_search_space(icfg.T, icfg.delta, available);
}

ActionChoice select_action(const ParamStore<float>& params, const model::ModelConfig& cfg,
                           const data::ReturnTokenizer& tok, const InferenceConfig& icfg,
                           const TraversedBuffer& buffer, const CurrentStep& current, std::mt19937_64& rng,
                           std::optional<std::size_t> prev_w) {
  const auto lengths = candidate_lengths(icfg, buffer.size() + 1, prev_w);
  ActionChoice choice;
  choice.search = estimate_max_returns(params, cfg, buffer, current, lengths);
  const auto expert = expert_return_distribution(choice.search.return_logits, tok, icfg.kappa);
  choice.return_bin = sample_index(top_percentile_filter(expert, icfg.pct), rng);
  choice.return_token = static_cast<float>(tok.detokenize(choice.return_bin));

  const auto window = history_window(cfg, buffer, current, choice.search.chosen_w(), choice.return_token);
  const auto out = model::forward(params, cfg, window, model::MaskMode::kReturnMasked);
  const std::size_t last = out.length - 1;
  if (cfg.action.kind == data::ActionKind::kContinuous) {
    for (std::size_t k = 0; k < cfg.action.dim; ++k) choice.action.push_back(out.action(last, k));
    for (float v : choice.action) {
      if (!std::isfinite(v)) throw NumericFault("select_action");
    }
  } else {
    std::vector<double> logits(cfg.action.dim);
    for (std::size_t k = 0; k < cfg.action.dim; ++k) logits[k] = out.action(last, k);
    const double z = log_sum_exp(logits);
    for (auto& v : logits) v = std::exp(v - z);
    choice.action = {static_cast<float>(sample_index(top_percentile_filter(logits, icfg.pct), rng))};
  }
  return choice;
}

double RolloutResult::mean() const {
  if (returns.empty()) return 0.0;
  double s = 0.0;
  for (double r : returns) s += r;
  return s / static_cast<double>(returns.size());
}

double RolloutResult::stddev() const {
  if (returns.empty()) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (double r : returns) s += (r - m) * (r - m);
  return std::sqrt(s / static_cast<double>(returns.size()));
}

RolloutResult rollout(const envs::Env& env, const training::Checkpoint& ck, const InferenceConfig& icfg,
                      std::size_t n_episodes, std::uint64_t seed, std::optional<std::size_t> start_state) {
  icfg.validate();
  const auto& cfg = ck.model;
  if (icfg.T > cfg.T) {
    throw ConfigError("inference.T: " + std::to_string(icfg.T) + " exceeds the model's T " + std::to_string(cfg.T));
  }
  if (env.obs_dim() != cfg.obs_dim || !(env.action_spec() == cfg.action)) {
    throw ConfigError("env: '" + env.name() + "' does not match the checkpoint's observation/action spaces");
  }
  if (env.horizon() > cfg.max_timestep) {
    throw ConfigError("env: horizon " + std::to_string(env.horizon()) + " exceeds model.max_timestep " +
                      std::to_string(cfg.max_timestep));
  }
  if (start_state && *start_state >= env.n_states()) throw ConfigError("start state out of range");

  RolloutResult result;
  for (std::size_t ep = 0; ep < n_episodes; ++ep) {
    auto rng = envs::episode_rng(seed, ep);
    std::size_t state = start_state.value_or(0);
    if (!start_state) {
      const auto& starts = env.start_states();
      state = starts[std::uniform_int_distribution<std::size_t>(0, starts.size() - 1)(rng)];
    }
    TraversedBuffer buffer(icfg.T);
    std::optional<std::size_t> prev_w;
    double ret = 0.0;
    std::size_t t = 0;
    for (; t < env.horizon() && !env.is_terminal(state); ++t) {
      const CurrentStep current{ck.stats.normalize(env.observation(state)), static_cast<std::int64_t>(t)};
      auto choice = select_action(ck.params, cfg, ck.tokenizer, icfg, buffer, current, rng, prev_w);
      result.log.push_back({ep, t, current.timestep, state, choice.search.chosen_w(), choice.search.rtilde_max(),
                            choice.return_bin, choice.search.forward_passes});
      prev_w = choice.search.chosen_w();
      const auto step = env.step(state, choice.action);
      ret += step.reward;
      buffer.push({current.observation, choice.action, choice.return_token, current.timestep});
      state = step.next_state;
      if (step.terminal) {
        ++t;
        break;
      }
    }
    result.returns.push_back(ret);
    result.lengths.push_back(t);
  }
  return result;
}

void write_length_log(std::ostream& out, const std::vector<StepLog>& log) {
  out << "episode,step,timestep,chosen_w,rtilde_max,sampled_return_bin\n";
  char buf[32];
  for (const auto& s : log) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(s.rtilde_max));
    out << s.episode << ',' << s.step << ',' << s.timestep << ',' << s.chosen_w << ',' << buf << ','
        << s.sampled_return_bin << '\n';
  }
}

std::vector<std::size_t> length_histogram(const std::vector<StepLog>& log, std::size_t T) {
  std::vector<std::size_t> h(T, 0);
  for (const auto& s : log) {
    if (s.chosen_w >= 1 && s.chosen_w <= T) ++h[s.chosen_w - 1];
  }
  return h;
}

}  // namespace edt::inference
