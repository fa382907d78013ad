#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "edt/data/dataset.hpp"
#include "edt/data/window.hpp"
#include "edt/numerics/autodiff.hpp"
#include "edt/numerics/param_store.hpp"

namespace edt::model {

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t max_timestep = 64;
  std::size_t obs_dim = 1;
  data::ActionSpec action;
  std::size_t n_return_bins = 60;
  std::size_t T = 20;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Width of the action head: continuous dims, or discrete arity (logits).
  std::size_t action_out() const { return action.dim; }

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class MaskMode { kStandardCausal, kReturnMasked };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& s);

/// Kinds of tokens inside one timestep, in sequence order.
enum TokenKind : std::size_t { kObsToken = 0, kReturnToken = 1, kActionToken = 2 };

/// Row-major (query, key) allow-matrix over 3T tokens, token 3t+k for step t, kind k.
/// Padded steps neither attend nor are attended. In return-masked mode a return
/// token other than the first valid one is visible only to itself, so it can
/// steer the action read at its own position but nothing else; with more than
/// one layer, letting the same step's action token see it would leak it to
/// every later token through that action token.
std::vector<std::uint8_t> build_attention_mask(std::size_t T, std::span<const std::uint8_t> valid, MaskMode mode);

/// build_attention_mask for n steps that are all valid.
std::vector<std::uint8_t> build_attention_mask(std::size_t n, MaskMode mode);

/// Deterministic initialization: weights N(0, 0.02), biases 0, layer-norm gains 1.
ParamStore<float> init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Closed-form scalar parameter count.
std::size_t parameter_count(const ModelConfig& cfg);

/// Where each window's valid steps sit inside the packed step dimension.
struct Packing {
  std::vector<std::size_t> step_offset;  ///< first packed step of each window
  std::vector<std::size_t> step_count;   ///< valid steps of each window
  std::vector<std::size_t> first_valid;  ///< window position of the first valid step
  std::size_t total_steps = 0;

  /// Packed step index of window w, window position pos (pos must be valid).
  std::size_t packed(std::size_t w, std::size_t pos) const { return step_offset[w] + pos - first_valid[w]; }
};

/// Head outputs over the packed valid steps of a batch: one row per valid step.
template <class T>
struct BatchOutputs {
  ad::Var<T> return_logits;  ///< [S, n_bins], read at obs tokens
  ad::Var<T> rtilde;         ///< [S, 1], read at obs tokens
  ad::Var<T> action;         ///< [S, A], read at return tokens (tanh for continuous)
  ad::Var<T> next_obs;       ///< [S, obs_dim], from concat(obs token, action token)
  Packing packing;
};

/// Runs the transformer over the valid steps of each window. Padding is never
/// materialized, so outputs do not depend on how much left-padding a window has.
/// The tape must be bound to a store produced by init_model for `cfg`.
template <class T>
BatchOutputs<T> forward_batch(ad::Tape<T>& tape, const ModelConfig& cfg, std::span<const data::TokenWindow> windows,
                              MaskMode mode);

/// Per-position outputs of a single window, zeros at padded positions.
struct ModelOutputs {
  std::size_t length = 0;
  Tensor<float> return_logits;  ///< [T, n_bins]
  std::vector<float> rtilde;    ///< [T]
  Tensor<float> action;         ///< [T, A]
  Tensor<float> next_obs;       ///< [T, obs_dim]
  std::vector<std::uint8_t> valid;
};

ModelOutputs forward(const ParamStore<float>& params, const ModelConfig& cfg, const data::TokenWindow& window,
                     MaskMode mode);

/// forward() over several windows in one packed pass.
std::vector<ModelOutputs> forward_many(const ParamStore<float>& params, const ModelConfig& cfg,
                                       std::span<const data::TokenWindow> windows, MaskMode mode);

/// Windows evaluated by forward_batch since process start (all threads).
std::uint64_t forward_window_count();

}  // namespace edt::model
