#include "edt/model/model.hpp"

#include <atomic>
#include <map>
#include <random>

#include "edt/errors.hpp"
#include "edt/numerics/ops.hpp"

namespace edt::model {

namespace {

std::atomic<std::uint64_t> g_forward_windows{0};

constexpr double kInitStd = 0.02;

std::string block(std::size_t i, const char* rest) { return "block" + std::to_string(i) + "." + rest; }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError("model." + field + ": " + why); };
  if (embed_dim == 0) fail("embed_dim", "must be >= 1");
  if (n_heads == 0) fail("n_heads", "must be >= 1");
  if (embed_dim % n_heads != 0) {
    fail("embed_dim", std::to_string(embed_dim) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (n_layers == 0) fail("n_layers", "must be >= 1");
  if (max_timestep == 0) fail("max_timestep", "must be >= 1");
  if (obs_dim == 0) fail("obs_dim", "must be >= 1");
  if (action.dim == 0) fail("action_dim", "must be >= 1");
  if (action.kind == data::ActionKind::kDiscrete && action.dim < 2) fail("action_dim", "discrete arity must be >= 2");
  if (n_return_bins < 2) fail("n_return_bins", "must be >= 2");
  if (T == 0) fail("T", "must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"embed_dim", embed_dim},         {"n_layers", n_layers},
          {"n_heads", n_heads},             {"max_timestep", max_timestep},
          {"obs_dim", obs_dim},             {"action_kind", data::to_string(action.kind)},
          {"action_dim", action.dim},       {"n_return_bins", n_return_bins},
          {"T", T}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    auto count = [&]() {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw ConfigError("model." + key + ": expected a non-negative integer");
      }
      return value.get<std::size_t>();
    };
    if (key == "embed_dim") c.embed_dim = count();
    else if (key == "n_layers") c.n_layers = count();
    else if (key == "n_heads") c.n_heads = count();
    else if (key == "max_timestep") c.max_timestep = count();
    else if (key == "obs_dim") c.obs_dim = count();
    else if (key == "action_dim") c.action.dim = count();
    else if (key == "n_return_bins") c.n_return_bins = count();
    else if (key == "T") c.T = count();
    else if (key == "action_kind") {
      if (!value.is_string()) throw ConfigError("model.action_kind: expected a string");
      c.action.kind = data::action_kind_from_string(value.get<std::string>());
    } else {
      throw ConfigError("model." + key + ": unknown key");
    }
  }
  return c;
}

std::string to_string(MaskMode mode) { return mode == MaskMode::kStandardCausal ? "standard" : "return_masked"; }

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "standard") return MaskMode::kStandardCausal;
  if (s == "return_masked") return MaskMode::kReturnMasked;
  throw ConfigError("mask mode: expected 'standard' or 'return_masked', got '" + s + "'");
}

std::vector<std::uint8_t> build_attention_mask(std::size_t T, std::span<const std::uint8_t> valid, MaskMode mode) {
  if (valid.size() != T) throw ContractViolation("padding mask length differs from T");
  std::size_t first = T;
  for (std::size_t t = 0; t < T; ++t) {
    if (valid[t]) {
      first = t;
      break;
    }
  }
  const std::size_t n = 3 * T;
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t q = 0; q < n; ++q) {
    if (!valid[q / 3]) continue;
    for (std::size_t k = 0; k <= q; ++k) {
      const std::size_t ks = k / 3;
      if (!valid[ks]) continue;
      if (mode == MaskMode::kReturnMasked && k % 3 == kReturnToken && ks != first && k != q) continue;
      mask[q * n + k] = 1;
    }
  }
  return mask;
}

std::vector<std::uint8_t> build_attention_mask(std::size_t n, MaskMode mode) {
  const std::vector<std::uint8_t> valid(n, 1);
  return build_attention_mask(n, valid, mode);
}

ParamStore<float> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  ParamStore<float> p;
  const std::size_t d = cfg.embed_dim;
  auto weight = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    Tensor<float> t = Tensor<float>::matrix(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(normal(rng));
    p.add(name, std::move(t));
  };
  auto bias = [&](const std::string& name, std::size_t n) { p.add(name, Tensor<float>(Shape{n}, 0.0f)); };
  auto norm = [&](const std::string& prefix) {
    p.add(prefix + ".g", Tensor<float>(Shape{d}, 1.0f));
    bias(prefix + ".b", d);
  };

  weight("embed.timestep", cfg.max_timestep, d);
  weight("embed.obs.w", cfg.obs_dim, d);
  bias("embed.obs.b", d);
  weight("embed.return.w", 1, d);
  bias("embed.return.b", d);
  if (cfg.action.kind == data::ActionKind::kContinuous) {
    weight("embed.action.w", cfg.action.dim, d);
    bias("embed.action.b", d);
  } else {
    weight("embed.action.table", cfg.action.dim, d);
  }
  norm("embed.ln");
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    norm(block(i, "ln1"));
    weight(block(i, "attn.qkv.w"), d, 3 * d);
    bias(block(i, "attn.qkv.b"), 3 * d);
    weight(block(i, "attn.proj.w"), d, d);
    bias(block(i, "attn.proj.b"), d);
    norm(block(i, "ln2"));
    weight(block(i, "mlp.fc.w"), d, 4 * d);
    bias(block(i, "mlp.fc.b"), 4 * d);
    weight(block(i, "mlp.out.w"), 4 * d, d);
    bias(block(i, "mlp.out.b"), d);
  }
  norm("ln_f");
  weight("head.return.w", d, cfg.n_return_bins);
  bias("head.return.b", cfg.n_return_bins);
  weight("head.rtilde.w", d, 1);
  bias("head.rtilde.b", 1);
  weight("head.action.w", d, cfg.action_out());
  bias("head.action.b", cfg.action_out());
  weight("head.next_obs.w", 2 * d, cfg.obs_dim);
  bias("head.next_obs.b", cfg.obs_dim);
  return p;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t a = cfg.action.dim;
  const std::size_t action_embed = cfg.action.kind == data::ActionKind::kContinuous ? a * d + d : a * d;
  const std::size_t embeddings = cfg.max_timestep * d + (cfg.obs_dim + 1) * d + 2 * d + action_embed + 2 * d;
  const std::size_t per_layer = 12 * d * d + 13 * d;
  const std::size_t heads = (d + 1) * cfg.n_return_bins + (d + 1) + (d + 1) * a + (2 * d + 1) * cfg.obs_dim;
  return embeddings + cfg.n_layers * per_layer + 2 * d + heads;
}

template <class T>
BatchOutputs<T> forward_batch(ad::Tape<T>& tape, const ModelConfig& cfg, std::span<const data::TokenWindow> windows,
                              MaskMode mode) {
  using ad::Var;
  if (windows.empty()) throw ContractViolation("forward_batch needs at least one window");
  const std::size_t aw = cfg.action.stored_width();
  const bool discrete = cfg.action.kind == data::ActionKind::kDiscrete;

  BatchOutputs<T> out;
  Packing& pk = out.packing;
  for (const auto& w : windows) {
    if (w.obs_dim != cfg.obs_dim || w.action_width != aw) {
      throw ContractViolation("window dims (obs " + std::to_string(w.obs_dim) + ", action " +
                              std::to_string(w.action_width) + ") do not match the model config");
    }
    const std::size_t n = w.valid_count();
    if (n == 0) throw ContractViolation("window has no valid steps");
    if (n > cfg.T) throw ContractViolation("window has more valid steps than T");
    const std::size_t first = w.first_valid();
    for (std::size_t pos = first; pos < w.length; ++pos) {
      if (!w.valid[pos]) throw ContractViolation("valid steps must form a contiguous suffix");
    }
    pk.step_offset.push_back(pk.total_steps);
    pk.step_count.push_back(n);
    pk.first_valid.push_back(first);
    pk.total_steps += n;
  }
  const std::size_t S = pk.total_steps;

  Tensor<T> obs_in = Tensor<T>::matrix(S, cfg.obs_dim);
  Tensor<T> ret_in = Tensor<T>::matrix(S, 1);
  Tensor<T> act_in = Tensor<T>::matrix(S, aw);
  std::vector<std::size_t> act_index(discrete ? S : 0);
  std::vector<std::size_t> ts(S);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    for (std::size_t pos = pk.first_valid[wi]; pos < w.length; ++pos) {
      const std::size_t i = pk.packed(wi, pos);
      for (std::size_t k = 0; k < cfg.obs_dim; ++k) obs_in(i, k) = static_cast<T>(w.obs_at(pos)[k]);
      ret_in(i, 0) = static_cast<T>(w.returns[pos]);
      const float* a = w.action_at(pos);
      if (discrete) {
        if (!(a[0] >= 0.0f) || a[0] >= static_cast<float>(cfg.action.dim)) {
          throw ContractViolation("discrete action index out of range");
        }
        act_index[i] = static_cast<std::size_t>(a[0]);
      } else {
        for (std::size_t k = 0; k < aw; ++k) act_in(i, k) = static_cast<T>(a[k]);
      }
      if (w.timesteps[pos] < 0 || static_cast<std::size_t>(w.timesteps[pos]) >= cfg.max_timestep) {
        throw ContractViolation("timestep " + std::to_string(w.timesteps[pos]) + " outside [0, max_timestep)");
      }
      ts[i] = static_cast<std::size_t>(w.timesteps[pos]);
    }
  }
  g_forward_windows.fetch_add(windows.size(), std::memory_order_relaxed);

  auto P = [&](const std::string& name) { return tape.param(name); };
  const Var<T> time = ad::gather_rows(P("embed.timestep"), ts);
  const Var<T> e_obs = ad::add(ad::linear(tape.constant(std::move(obs_in)), P("embed.obs.w"), P("embed.obs.b")), time);
  const Var<T> e_ret =
      ad::add(ad::linear(tape.constant(std::move(ret_in)), P("embed.return.w"), P("embed.return.b")), time);
  const Var<T> e_act =
      discrete ? ad::add(ad::gather_rows(P("embed.action.table"), act_index), time)
               : ad::add(ad::linear(tape.constant(std::move(act_in)), P("embed.action.w"), P("embed.action.b")), time);

  // Interleave into step-major (o, R, a) order; each window's tokens are contiguous.
  std::vector<std::size_t> order(3 * S);
  for (std::size_t i = 0; i < S; ++i) {
    for (std::size_t k = 0; k < 3; ++k) order[3 * i + k] = k * S + i;
  }
  const std::vector<Var<T>> parts{e_obs, e_ret, e_act};
  Var<T> x = ad::gather_rows(ad::concat_rows<T>(parts), std::move(order));
  x = ad::layer_norm(x, P("embed.ln.g"), P("embed.ln.b"));

  auto layout = std::make_shared<ad::AttentionLayout>();
  std::map<std::size_t, std::size_t> mask_of_length;
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const std::size_t n = pk.step_count[wi];
    auto [it, inserted] = mask_of_length.emplace(n, layout->masks.size());
    if (inserted) layout->masks.push_back(build_attention_mask(n, mode));
    layout->segments.push_back({3 * pk.step_offset[wi], 3 * n, it->second});
  }
  std::shared_ptr<const ad::AttentionLayout> shared_layout = std::move(layout);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const Var<T> h = ad::layer_norm(x, P(block(l, "ln1.g")), P(block(l, "ln1.b")));
    const Var<T> qkv = ad::linear(h, P(block(l, "attn.qkv.w")), P(block(l, "attn.qkv.b")));
    const Var<T> att = ad::masked_attention(qkv, shared_layout, cfg.n_heads);
    x = ad::add(x, ad::linear(att, P(block(l, "attn.proj.w")), P(block(l, "attn.proj.b"))));
    const Var<T> h2 = ad::layer_norm(x, P(block(l, "ln2.g")), P(block(l, "ln2.b")));
    const Var<T> fc = ad::gelu(ad::linear(h2, P(block(l, "mlp.fc.w")), P(block(l, "mlp.fc.b"))));
    x = ad::add(x, ad::linear(fc, P(block(l, "mlp.out.w")), P(block(l, "mlp.out.b"))));
  }
  x = ad::layer_norm(x, P("ln_f.g"), P("ln_f.b"));

  std::vector<std::size_t> rows_obs(S), rows_ret(S), rows_act(S);
  for (std::size_t i = 0; i < S; ++i) {
    rows_obs[i] = 3 * i + kObsToken;
    rows_ret[i] = 3 * i + kReturnToken;
    rows_act[i] = 3 * i + kActionToken;
  }
  const Var<T> h_obs = ad::gather_rows(x, std::move(rows_obs));
  const Var<T> h_ret = ad::gather_rows(x, std::move(rows_ret));
  const Var<T> h_act = ad::gather_rows(x, std::move(rows_act));

  out.return_logits = ad::linear(h_obs, P("head.return.w"), P("head.return.b"));
  out.rtilde = ad::linear(h_obs, P("head.rtilde.w"), P("head.rtilde.b"));
  const Var<T> act = ad::linear(h_ret, P("head.action.w"), P("head.action.b"));
  out.action = discrete ? act : ad::tanh(act);
  const std::vector<Var<T>> joint{h_obs, h_act};
  out.next_obs = ad::linear(ad::concat_cols<T>(joint), P("head.next_obs.w"), P("head.next_obs.b"));
  return out;
}

template BatchOutputs<float> forward_batch(ad::Tape<float>&, const ModelConfig&, std::span<const data::TokenWindow>,
                                           MaskMode);
template BatchOutputs<double> forward_batch(ad::Tape<double>&, const ModelConfig&,
                                            std::span<const data::TokenWindow>, MaskMode);

std::vector<ModelOutputs> forward_many(const ParamStore<float>& params, const ModelConfig& cfg,
                                       std::span<const data::TokenWindow> windows, MaskMode mode) {
  ad::Tape<float> tape(&params, /*record=*/false);
  const auto batch = forward_batch(tape, cfg, windows, mode);
  const auto& logits = batch.return_logits.value();
  const auto& rtilde = batch.rtilde.value();
  const auto& action = batch.action.value();
  const auto& next_obs = batch.next_obs.value();
  std::vector<ModelOutputs> result;
  result.reserve(windows.size());
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    ModelOutputs o;
    o.length = w.length;
    o.valid = w.valid;
    o.return_logits = Tensor<float>::matrix(w.length, cfg.n_return_bins);
    o.rtilde.assign(w.length, 0.0f);
    o.action = Tensor<float>::matrix(w.length, cfg.action_out());
    o.next_obs = Tensor<float>::matrix(w.length, cfg.obs_dim);
    for (std::size_t pos = batch.packing.first_valid[wi]; pos < w.length; ++pos) {
      const std::size_t i = batch.packing.packed(wi, pos);
      for (std::size_t k = 0; k < cfg.n_return_bins; ++k) o.return_logits(pos, k) = logits(i, k);
      o.rtilde[pos] = rtilde(i, 0);
      for (std::size_t k = 0; k < cfg.action_out(); ++k) o.action(pos, k) = action(i, k);
      for (std::size_t k = 0; k < cfg.obs_dim; ++k) o.next_obs(pos, k) = next_obs(i, k);
    }
    result.push_back(std::move(o));
  }
  return result;
}

ModelOutputs forward(const ParamStore<float>& params, const ModelConfig& cfg, const data::TokenWindow& window,
                     MaskMode mode) {
  return std::move(forward_many(params, cfg, std::span<const data::TokenWindow>(&window, 1), mode).front());
}

std::uint64_t forward_window_count() { return g_forward_windows.load(std::memory_order_relaxed); }

}  // namespace edt::model
