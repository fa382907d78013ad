#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "edt/errors.hpp"
#include "edt/model/model.hpp"
#include "support/probes.hpp"

using namespace edt;
using namespace edt::model;
using data::TokenWindow;
using namespace edt::probes;

namespace {

void check_token_probe(const ParamStore<float>& params, const ModelConfig& cfg, const TokenWindow& base, MaskMode mode) {
  CHECK(probes::probe_violations(params, cfg, base, mode) == 0);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c;
  c.embed_dim = 63;
  c.n_heads = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
  ModelConfig ok;
  CHECK_NOTHROW(ok.validate());
  CHECK(ModelConfig::from_json(ok.to_json()) == ok);
  CHECK_THROWS_AS(ModelConfig::from_json({{"embed_size", 3}}), ConfigError);
  ModelConfig t0;
  t0.T = 0;
  CHECK_THROWS_AS(t0.validate(), ConfigError);
}

TEST_CASE("init_model is deterministic and matches the closed-form count") {
  for (auto kind : {data::ActionKind::kContinuous, data::ActionKind::kDiscrete}) {
    for (std::size_t layers : {1, 2, 3}) {
      ModelConfig c = small_config(kind, 5);
      c.n_layers = layers;
      const auto a = init_model(c, 11);
      const auto b = init_model(c, 11);
      CHECK(a == b);
      CHECK_FALSE(a == init_model(c, 12));
      CHECK(a.scalar_count() == parameter_count(c));
    }
  }
  ModelConfig desk;
  desk.obs_dim = 5;
  const auto p = init_model(desk, 0);
  CHECK(p.scalar_count() == parameter_count(desk));
  CHECK(p.at("ln_f.g")[0] == 1.0f);
  CHECK(p.at("head.rtilde.b")[0] == 0.0f);
}

TEST_CASE("attention mask rules") {
  SECTION("T=1 is a plain causal mask in both modes") {
    const auto a = build_attention_mask(1, MaskMode::kStandardCausal);
    const auto b = build_attention_mask(1, MaskMode::kReturnMasked);
    CHECK(a == b);
    CHECK(a == std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
  }
  SECTION("T=3 return-masked") {
    const auto m = build_attention_mask(3, MaskMode::kReturnMasked);
    const std::size_t n = 9;
    const std::size_t obs3 = 3 * 2 + kObsToken;
    CHECK(m[obs3 * n + (3 * 0 + kReturnToken)] == 1);
    CHECK(m[obs3 * n + (3 * 1 + kReturnToken)] == 0);
    CHECK(m[obs3 * n + (3 * 2 + kReturnToken)] == 0);
    const std::size_t act3 = 3 * 2 + kActionToken;
    CHECK(m[act3 * n + (3 * 2 + kReturnToken)] == 0);
    CHECK(m[(3 * 2 + kReturnToken) * n + (3 * 2 + kReturnToken)] == 1);
    CHECK(m[act3 * n + (3 * 0 + kReturnToken)] == 1);
    CHECK(m[act3 * n + (3 * 1 + kReturnToken)] == 0);
  }
  SECTION("exhaustive over every padding pattern for T <= 5") {
    for (std::size_t T = 1; T <= 5; ++T) {
      for (std::uint32_t bits = 0; bits < (1u << T); ++bits) {
        std::vector<std::uint8_t> valid(T);
        for (std::size_t t = 0; t < T; ++t) valid[t] = (bits >> t) & 1u;
        for (auto mode : {MaskMode::kStandardCausal, MaskMode::kReturnMasked}) {
          const auto m = build_attention_mask(T, valid, mode);
          const std::size_t n = 3 * T;
          std::size_t first = T;
          for (std::size_t t = T; t-- > 0;) {
            if (valid[t]) first = t;
          }
          for (std::size_t q = 0; q < n; ++q) {
            for (std::size_t k = 0; k < n; ++k) {
              // Independent restatement of the visibility rule.
              bool expected = k <= q && valid[q / 3] && valid[k / 3];
              if (mode == MaskMode::kReturnMasked && k % 3 == 1 && k / 3 != first && k != q) {
                expected = false;
              }
              CHECK(m[q * n + k] == expected);
              if (k > q) CHECK(m[q * n + k] == 0);
            }
          }
          // The packed mask over n valid steps is the full mask restricted to valid positions.
          std::vector<std::size_t> idx;
          for (std::size_t t = 0; t < T; ++t) {
            if (valid[t]) {
              for (std::size_t k = 0; k < 3; ++k) idx.push_back(3 * t + k);
            }
          }
          const std::size_t nv = idx.size() / 3;
          if (nv == 0) continue;
          const auto compact = build_attention_mask(nv, mode);
          bool same = true;
          for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t j = 0; j < idx.size(); ++j) {
              same = same && compact[i * idx.size() + j] == m[idx[i] * n + idx[j]];
            }
          }
          CHECK(same);
        }
      }
    }
  }
}

TEST_CASE("forward output shapes and head ranges") {
  std::mt19937_64 rng(3);
  for (auto kind : {data::ActionKind::kContinuous, data::ActionKind::kDiscrete}) {
    const ModelConfig cfg = small_config(kind, 6);
    const auto params = probe_params(cfg, 1);
    const TokenWindow w = random_window(cfg, 6, 4, 2, rng);
    const ModelOutputs o = forward(params, cfg, w, MaskMode::kReturnMasked);
    CHECK(o.return_logits.shape() == Shape{6, cfg.n_return_bins});
    CHECK(o.rtilde.size() == 6);
    CHECK(o.action.shape() == Shape{6, cfg.action_out()});
    CHECK(o.next_obs.shape() == Shape{6, cfg.obs_dim});
    for (std::size_t pos = 2; pos < 6; ++pos) {
      double z = 0.0, mx = -1e30;
      for (std::size_t b = 0; b < cfg.n_return_bins; ++b) mx = std::max(mx, double(o.return_logits(pos, b)));
      for (std::size_t b = 0; b < cfg.n_return_bins; ++b) z += std::exp(double(o.return_logits(pos, b)) - mx);
      double total = 0.0;
      for (std::size_t b = 0; b < cfg.n_return_bins; ++b) total += std::exp(double(o.return_logits(pos, b)) - mx) / z;
      CHECK(std::abs(total - 1.0) <= 1e-5);
      if (kind == data::ActionKind::kContinuous) {
        for (std::size_t k = 0; k < cfg.action_out(); ++k) {
          CHECK(o.action(pos, k) > -1.0f);
          CHECK(o.action(pos, k) < 1.0f);
        }
      }
    }
    TokenWindow bad = w;
    bad.timesteps[5] = 1000;
    CHECK_THROWS_AS(forward(params, cfg, bad, MaskMode::kReturnMasked), ContractViolation);
  }
}

TEST_CASE("causality and return-mask probes, exhaustive for T <= 5", "[property]") {
  std::mt19937_64 rng(17);
  for (auto kind : {data::ActionKind::kContinuous, data::ActionKind::kDiscrete}) {
    for (std::size_t T = 1; T <= 5; ++T) {
      const ModelConfig cfg = small_config(kind, T);
      const auto params = probe_params(cfg, T);
      for (std::size_t n = 1; n <= T; ++n) {
        const TokenWindow w = random_window(cfg, T, n, static_cast<std::int64_t>(rng() % 10), rng);
        for (auto mode : {MaskMode::kStandardCausal, MaskMode::kReturnMasked}) check_token_probe(params, cfg, w, mode);
      }
    }
  }
}

TEST_CASE("causality and return-mask probes at T = 20", "[property]") {
  std::mt19937_64 rng(23);
  for (auto kind : {data::ActionKind::kContinuous, data::ActionKind::kDiscrete}) {
    const ModelConfig cfg = small_config(kind, 20);
    const auto params = probe_params(cfg, 99);
    for (int trial = 0; trial < 3; ++trial) {
      const std::size_t n = 1 + rng() % 20;
      const TokenWindow w = random_window(cfg, 20, n, static_cast<std::int64_t>(rng() % 15), rng);
      for (auto mode : {MaskMode::kStandardCausal, MaskMode::kReturnMasked}) check_token_probe(params, cfg, w, mode);
    }
  }
}

TEST_CASE("return-masked estimate at step 2 of a T=4 window") {
  std::mt19937_64 rng(4);
  const ModelConfig cfg = small_config(data::ActionKind::kContinuous, 4);
  const auto params = probe_params(cfg, 4);
  const TokenWindow base = random_window(cfg, 4, 4, 0, rng);
  TokenWindow w = base;
  w.returns[1] += 0.5f;
  const auto a = forward(params, cfg, base, MaskMode::kReturnMasked);
  const auto b = forward(params, cfg, w, MaskMode::kReturnMasked);
  for (std::size_t pos = 0; pos < 4; ++pos) {
    const StepDiff diff = compare_step(a, b, pos);
    const bool any = diff.logits || diff.rtilde || diff.action || diff.next_obs;
    CHECK(any == (pos == 1));
  }
}

TEST_CASE("outputs do not depend on the amount of left padding") {
  std::mt19937_64 rng(8);
  for (auto kind : {data::ActionKind::kContinuous, data::ActionKind::kDiscrete}) {
    const ModelConfig cfg = small_config(kind, 20);
    const auto params = probe_params(cfg, 5);
    const TokenWindow full = random_window(cfg, 20, 12, 3, rng);
    for (std::size_t w = 1; w <= 12; ++w) {
      // Truncation to the last w steps, once padded to T and once unpadded.
      TokenWindow padded = full;
      for (std::size_t pos = 0; pos < 20 - w; ++pos) {
        padded.valid[pos] = 0;
      }
      TokenWindow tight = TokenWindow::padded(w, cfg.obs_dim, cfg.action.stored_width());
      for (std::size_t i = 0; i < w; ++i) {
        const std::size_t src = 20 - w + i;
        tight.valid[i] = 1;
        tight.timesteps[i] = full.timesteps[src];
        tight.returns[i] = full.returns[src];
        std::copy_n(full.obs_at(src), cfg.obs_dim, tight.observations.begin() + i * cfg.obs_dim);
        std::copy_n(full.action_at(src), cfg.action.stored_width(),
                    tight.actions.begin() + i * cfg.action.stored_width());
      }
      const auto a = forward(params, cfg, padded, MaskMode::kReturnMasked);
      const auto b = forward(params, cfg, tight, MaskMode::kReturnMasked);
      for (std::size_t k = 0; k < cfg.n_return_bins; ++k) {
        CHECK(std::abs(a.return_logits(19, k) - b.return_logits(w - 1, k)) <= 1e-5f);
      }
      CHECK(std::abs(a.rtilde[19] - b.rtilde[w - 1]) <= 1e-5f);
    }
  }
}

TEST_CASE("estimate at the last obs ignores intermediate return tokens") {
  std::mt19937_64 rng(31);
  const ModelConfig cfg = small_config(data::ActionKind::kContinuous, 8);
  const auto params = probe_params(cfg, 31);
  const TokenWindow base = random_window(cfg, 8, 8, 0, rng);
  const auto ref = forward(params, cfg, base, MaskMode::kReturnMasked);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    TokenWindow w = base;
    for (std::size_t pos = 1; pos < 8; ++pos) w.returns[pos] = u(rng);
    const auto out = forward(params, cfg, w, MaskMode::kReturnMasked);
    CHECK(out.rtilde[7] == ref.rtilde[7]);
    CHECK(row_equal(out.return_logits, ref.return_logits, 7));
  }
  // Without return masking the same change is visible.
  TokenWindow w = base;
  w.returns[3] += 0.5f;
  CHECK(forward(params, cfg, w, MaskMode::kStandardCausal).rtilde[7] !=
        forward(params, cfg, base, MaskMode::kStandardCausal).rtilde[7]);
}

TEST_CASE("batched forward equals single-window forwards and counts windows") {
  std::mt19937_64 rng(2);
  const ModelConfig cfg = small_config(data::ActionKind::kDiscrete, 10);
  const auto params = probe_params(cfg, 2);
  std::vector<TokenWindow> ws;
  for (std::size_t n : {3, 10, 1, 7}) ws.push_back(random_window(cfg, 10, n, 0, rng));
  const auto before = forward_window_count();
  const auto many = forward_many(params, cfg, ws, MaskMode::kReturnMasked);
  CHECK(forward_window_count() - before == 4);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto one = forward(params, cfg, ws[i], MaskMode::kReturnMasked);
    for (std::size_t pos = ws[i].first_valid(); pos < 10; ++pos) {
      CHECK(std::abs(one.rtilde[pos] - many[i].rtilde[pos]) <= 1e-5f);
    }
  }
}
