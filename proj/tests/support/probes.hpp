#pragma once

// Shared helpers for masking probes (model tests and the acceptance run).

#include <cmath>
#include <random>

#include "edt/model/model.hpp"

namespace edt::probes {

using data::TokenWindow;
using model::forward;
using model::MaskMode;
using model::ModelConfig;
using model::ModelOutputs;
using model::kActionToken;
using model::kObsToken;
using model::kReturnToken;

inline ModelConfig small_config(data::ActionKind kind, std::size_t T) {
  ModelConfig c;
  c.embed_dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_timestep = 40;
  c.obs_dim = 3;
  c.action = {kind, kind == data::ActionKind::kDiscrete ? std::size_t{3} : std::size_t{2}};
  c.n_return_bins = 7;
  c.T = T;
  return c;
}

// Larger-than-default weights so that perturbations propagate visibly.
inline ParamStore<float> probe_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore<float> p = model::init_model(cfg, seed);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (auto& e : p.entries()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] = n(rng);
  }
  return p;
}

inline TokenWindow random_window(const ModelConfig& cfg, std::size_t length, std::size_t n_valid, std::int64_t t0,
                          std::mt19937_64& rng) {
  TokenWindow w = TokenWindow::padded(length, cfg.obs_dim, cfg.action.stored_width());
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t pos = length - n_valid; pos < length; ++pos) {
    w.valid[pos] = 1;
    w.timesteps[pos] = t0 + static_cast<std::int64_t>(pos - (length - n_valid));
    for (std::size_t k = 0; k < cfg.obs_dim; ++k) w.observations[pos * cfg.obs_dim + k] = n(rng);
    w.returns[pos] = u(rng);
    if (cfg.action.kind == data::ActionKind::kDiscrete) {
      w.actions[pos] = static_cast<float>(rng() % cfg.action.dim);
    } else {
      for (std::size_t k = 0; k < cfg.action.dim; ++k) w.actions[pos * cfg.action.dim + k] = std::tanh(n(rng));
    }
  }
  return w;
}

// Changes the given token's input (obs, return, or action) at window position pos.
inline void perturb(TokenWindow& w, const ModelConfig& cfg, std::size_t pos, std::size_t kind) {
  if (kind == kObsToken) {
    w.observations[pos * cfg.obs_dim] += 1.5f;
  } else if (kind == kReturnToken) {
    w.returns[pos] += 0.37f;
  } else if (cfg.action.kind == data::ActionKind::kDiscrete) {
    w.actions[pos] = static_cast<float>((static_cast<std::size_t>(w.actions[pos]) + 1) % cfg.action.dim);
  } else {
    w.actions[pos * cfg.action.dim] = -w.actions[pos * cfg.action.dim] + 0.25f;
  }
}

inline bool row_equal(const Tensor<float>& a, const Tensor<float>& b, std::size_t r) {
  for (std::size_t c = 0; c < a.cols(); ++c) {
    if (a(r, c) != b(r, c)) return false;
  }
  return true;
}

struct StepDiff {
  bool logits, rtilde, action, next_obs;
};

inline StepDiff compare_step(const ModelOutputs& a, const ModelOutputs& b, std::size_t pos) {
  return {!row_equal(a.return_logits, b.return_logits, pos), a.rtilde[pos] != b.rtilde[pos],
          !row_equal(a.action, b.action, pos), !row_equal(a.next_obs, b.next_obs, pos)};
}

// Token index each head reads at step s: logits/rtilde at the obs token, the
// action at the return token, next-obs from the obs and action tokens.
// Returns the number of (perturbation, output) pairs that break causality or return masking.
inline std::size_t probe_violations(const ParamStore<float>& params, const ModelConfig& cfg, const TokenWindow& base,
                                    MaskMode mode) {
  const ModelOutputs ref = forward(params, cfg, base, mode);
  const std::size_t first = base.first_valid();
  std::size_t bad = 0;
  for (std::size_t pos = first; pos < base.length; ++pos) {
    for (std::size_t kind = 0; kind < 3; ++kind) {
      TokenWindow w = base;
      perturb(w, cfg, pos, kind);
      const ModelOutputs out = forward(params, cfg, w, mode);
      const std::size_t changed_token = 3 * (pos - first) + kind;
      const bool masked_return = mode == MaskMode::kReturnMasked && kind == kReturnToken && pos != first;
      for (std::size_t q = first; q < base.length; ++q) {
        const std::size_t s = q - first;
        const StepDiff diff = compare_step(ref, out, q);
        bool ok = true;
        // Causality: nothing read before the perturbed token may change.
        if (3 * s + kObsToken < changed_token) ok = ok && !diff.logits && !diff.rtilde;
        if (3 * s + kReturnToken < changed_token) ok = ok && !diff.action;
        if (3 * s + kActionToken < changed_token) ok = ok && !diff.next_obs;
        // A masked return token only reaches the action head of its own step.
        if (masked_return && q != pos) ok = ok && !diff.logits && !diff.rtilde && !diff.action && !diff.next_obs;
        if (masked_return && q == pos) ok = ok && !diff.logits && !diff.rtilde && diff.action;
        bad += ok ? 0 : 1;
      }
    }
  }
  return bad;
}

}  // namespace edt::probes
