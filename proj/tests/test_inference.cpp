#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "edt/envs/env.hpp"
#include "edt/envs/policy.hpp"
#include "edt/errors.hpp"
#include "edt/inference/inference.hpp"
#include "edt/training/train.hpp"

using namespace edt;
using namespace edt::inference;

namespace {

training::Checkpoint untrained(const data::Dataset& ds, std::size_t T, std::uint64_t seed = 1) {
  model::ModelConfig m;
  m.embed_dim = 16;
  m.n_layers = 2;
  m.n_heads = 2;
  m.obs_dim = ds.obs_dim();
  m.action = ds.action;
  m.n_return_bins = 10;
  m.T = T;
  training::TrainConfig t;
  t.seed = seed;
  return training::initial_checkpoint(ds, m, t);
}

data::Dataset fork_data() {
  return envs::generate_dataset(envs::make_fork_env(), envs::PolicySpec{envs::PolicyKind::kTwoPolicy}, 20, 1);
}

data::Dataset chain_data() {
  return envs::generate_dataset(envs::make_chain_env(9, 30, 0.3, 1.0), envs::PolicySpec{envs::PolicyKind::kRandom},
                                20, 1);
}

/// Buffer of n contiguous random steps.
TraversedBuffer random_buffer(const model::ModelConfig& cfg, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> g;
  TraversedBuffer buf(cfg.T);
  for (std::size_t t = 0; t < n; ++t) {
    BufferStep s;
    for (std::size_t k = 0; k < cfg.obs_dim; ++k) s.observation.push_back(g(rng));
    if (cfg.action.kind == data::ActionKind::kDiscrete) {
      s.action = {static_cast<float>(rng() % cfg.action.dim)};
    } else {
      for (std::size_t k = 0; k < cfg.action.dim; ++k) s.action.push_back(std::tanh(g(rng)));
    }
    s.return_token = std::abs(g(rng));
    s.timestep = static_cast<std::int64_t>(t);
    buf.push(s);
  }
  return buf;
}

CurrentStep random_current(const model::ModelConfig& cfg, std::int64_t t, std::mt19937_64& rng) {
  std::normal_distribution<float> g;
  CurrentStep c;
  for (std::size_t k = 0; k < cfg.obs_dim; ++k) c.observation.push_back(g(rng));
  c.timestep = t;
  return c;
}

std::vector<double> softmax_oracle(const std::vector<float>& logits) {
  std::vector<double> p(logits.size());
  double m = -1e300, s = 0.0;
  for (float v : logits) m = std::max(m, static_cast<double>(v));
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - m);
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

TEST_CASE("search space construction") {
  CHECK(build_search_space(20, 8, 20) == std::vector<std::size_t>{20, 12, 4});
  CHECK(build_search_space(20, 8, 100) == std::vector<std::size_t>{20, 12, 4});
  CHECK(build_search_space(20, 2, 20) == std::vector<std::size_t>{20, 18, 16, 14, 12, 10, 8, 6, 4, 2});
  CHECK(build_search_space(20, 2, 1) == std::vector<std::size_t>{1});
  CHECK(build_search_space(20, 8, 3) == std::vector<std::size_t>{3});
  CHECK(build_search_space(20, 8, 15) == std::vector<std::size_t>{12, 4});
  for (std::size_t T = 1; T <= 25; ++T) {
    for (std::size_t avail = 1; avail <= 30; ++avail) {
      std::vector<std::size_t> all;
      for (std::size_t w = std::min(T, avail); w >= 1; --w) all.push_back(w);
      CHECK(build_search_space(T, 1, avail) == all);
      for (std::size_t delta = 1; delta <= 9; ++delta) {
        const auto s = build_search_space(T, delta, avail);
        REQUIRE_FALSE(s.empty());
        for (std::size_t i = 0; i < s.size(); ++i) {
          CHECK(s[i] >= 1);
          CHECK(s[i] <= std::min(T, avail));
          if (i > 0) CHECK(s[i - 1] - s[i] == delta);
        }
      }
    }
  }
}

TEST_CASE("local search range") {
  auto range = [](std::size_t a, std::size_t b) {
    std::vector<std::size_t> v;
    for (std::size_t w = a; w <= b; ++w) v.push_back(w);
    return v;
  };
  CHECK(local_search_step(10, 2, 20, 20) == range(8, 12));
  CHECK(local_search_step(1, 2, 20, 20) == range(1, 3));
  CHECK(local_search_step(20, 2, 20, 20) == range(18, 20));
  CHECK(local_search_step(5, 2, 20, 6) == range(3, 6));
}

TEST_CASE("length choice breaks ties toward longer history") {
  const std::vector<std::size_t> lengths{20, 12, 4};
  CHECK(pick_length(lengths, std::vector<float>{0.5f, 0.5f, 0.5f}) == 0);
  CHECK(pick_length(std::vector<std::size_t>{4, 12, 20}, std::vector<float>{0.5f, 0.5f, 0.5f}) == 2);
  CHECK(pick_length(lengths, std::vector<float>{0.1f, 0.9f, 0.9f}) == 1);
  CHECK(pick_length(std::vector<std::size_t>{7}, std::vector<float>{-3.0f}) == 0);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> ls;
    std::vector<float> r, transformed;
    for (std::size_t w = 10; w >= 1; --w) {
      ls.push_back(w);
      r.push_back(std::round(u(rng) * 2.0f) / 2.0f);  // coarse values force ties
      transformed.push_back(std::exp(r.back()) * 3.0f + 1.0f);
    }
    CHECK(pick_length(ls, r) == pick_length(ls, transformed));
  }
}

TEST_CASE("max-return estimation") {
  const auto ds = chain_data();
  const auto ck = untrained(ds, 20);
  std::mt19937_64 rng(6);
  const auto buffer = random_buffer(ck.model, 20, rng);
  const auto current = random_current(ck.model, 20, rng);

  SECTION("one pass per candidate") {
    for (std::size_t delta : {8u, 2u, 1u}) {
      const auto lengths = build_search_space(20, delta, buffer.size() + 1);
      const auto before = model::forward_window_count();
      const auto r = estimate_max_returns(ck.params, ck.model, buffer, current, lengths);
      CHECK(model::forward_window_count() - before == lengths.size());
      CHECK(r.forward_passes == lengths.size());
      CHECK(r.rtilde.size() == lengths.size());
    }
    CHECK(estimate_max_returns(ck.params, ck.model, buffer, current, build_search_space(20, 8, 21)).forward_passes ==
          3);
    CHECK(estimate_max_returns(ck.params, ck.model, buffer, current, build_search_space(20, 2, 21)).forward_passes ==
          10);
  }

  SECTION("per-candidate values match a padded single-window pass") {
    const std::vector<std::size_t> lengths{20, 13, 5, 1};
    const auto r = estimate_max_returns(ck.params, ck.model, buffer, current, lengths);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      const std::size_t w = lengths[i];
      // Oracle window: full length T, left-padded, filled directly from the buffer.
      auto win = data::TokenWindow::padded(20, ck.model.obs_dim, 1);
      for (std::size_t k = 0; k < w; ++k) {
        const std::size_t pos = 20 - w + k;
        win.valid[pos] = 1;
        if (k + 1 == w) {
          std::copy(current.observation.begin(), current.observation.end(), win.observations.begin() + pos * 9);
          win.timesteps[pos] = current.timestep;
        } else {
          const auto& s = buffer[buffer.size() - (w - 1) + k];
          std::copy(s.observation.begin(), s.observation.end(), win.observations.begin() + pos * 9);
          win.actions[pos] = s.action[0];
          win.returns[pos] = s.return_token;
          win.timesteps[pos] = s.timestep;
        }
      }
      const auto o = model::forward(ck.params, ck.model, win, model::MaskMode::kReturnMasked);
      CHECK(std::abs(o.rtilde[19] - r.rtilde[i]) <= 1e-5);
      if (i == r.chosen) {
        for (std::size_t b = 0; b < ck.model.n_return_bins; ++b) {
          CHECK(std::abs(o.return_logits(19, b) - r.return_logits[b]) <= 1e-5);
        }
      }
    }
    CHECK(r.rtilde_max() == *std::max_element(r.rtilde.begin(), r.rtilde.end()));
  }

  SECTION("single candidate is chosen") {
    const auto r = estimate_max_returns(ck.params, ck.model, buffer, current, std::vector<std::size_t>{7});
    CHECK(r.chosen_w() == 7);
  }
}

TEST_CASE("expert return reweighting") {
  const data::ReturnTokenizer two(2, -0.5, 1.5);  // centers 0 and 1
  const auto p = expert_return_distribution(std::vector<float>{0.0f, 0.0f}, two, 10.0);
  const double e10 = std::exp(10.0);
  CHECK(std::abs(p[0] - 1.0 / (1.0 + e10)) <= 1e-6);
  CHECK(std::abs(p[1] - e10 / (1.0 + e10)) <= 1e-6);
  CHECK(p[0] == Catch::Approx(4.54e-5).margin(1e-7));

  const data::ReturnTokenizer tok(12);
  std::mt19937_64 rng(7);
  std::normal_distribution<float> g(0.0f, 3.0f);
  std::uniform_real_distribution<double> kap(0.01, 20.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> logits(12);
    for (auto& v : logits) v = g(rng);
    const auto id = expert_return_distribution(logits, tok, 0.0);
    const auto soft = softmax_oracle(logits);
    for (std::size_t b = 0; b < 12; ++b) CHECK(std::abs(id[b] - soft[b]) <= 1e-12);

    const double kappa = kap(rng);
    const auto q = expert_return_distribution(logits, tok, kappa);
    auto shifted = logits;
    for (auto& v : shifted) v += 37.5f;
    const auto qs = expert_return_distribution(shifted, tok, kappa);
    double sum = 0.0;
    for (std::size_t b = 0; b < 12; ++b) {
      sum += q[b];
      CHECK(std::abs(q[b] - qs[b]) <= 1e-6);
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    for (std::size_t hi = 0; hi < 12; ++hi) {
      for (std::size_t lo = 0; lo < hi; ++lo) {
        if (soft[hi] >= soft[lo] && soft[lo] > 0.0) CHECK(q[hi] > q[lo]);
      }
    }
    auto masked = logits;
    masked[trial % 12] = -std::numeric_limits<float>::infinity();
    CHECK(expert_return_distribution(masked, tok, kappa)[trial % 12] == 0.0);
  }
}

TEST_CASE("top percentile filter") {
  CHECK(top_percentile_filter(std::vector<double>{0.5, 0.3, 0.1, 0.1}, 0.85) == std::vector<double>{1, 0, 0, 0});
  const std::vector<double> uniform(20, 0.05);
  CHECK(top_percentile_filter(uniform, 0.85) == uniform);
  const std::vector<double> onehot{0, 0, 1, 0};
  CHECK(top_percentile_filter(onehot, 0.85) == onehot);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> p(1 + rng() % 30);
    double s = 0.0;
    for (auto& v : p) s += v = u(rng) < 0.3 ? 0.0 : u(rng);
    if (s == 0.0) p[0] = s = 1.0;
    for (auto& v : p) v /= s;
    const double pct = 0.05 + 0.9 * u(rng);
    const auto f = top_percentile_filter(p, pct);
    double total = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      total += f[i];
      kept += f[i] > 0.0;
      if (f[i] > 0.0) CHECK(p[i] > 0.0);
    }
    CHECK(total == Catch::Approx(1.0).margin(1e-12));
    CHECK(kept >= 1);
    const auto top = std::max_element(p.begin(), p.end()) - p.begin();
    CHECK(f[static_cast<std::size_t>(top)] > 0.0);
  }
}

TEST_CASE("traversed buffer") {
  TraversedBuffer b(3);
  for (std::int64_t t = 0; t < 5; ++t) b.push({{0.0f}, {0.0f}, 0.0f, t});
  CHECK(b.size() == 3);
  CHECK(b[0].timestep == 2);
  CHECK_THROWS_AS(b.push({{0.0f}, {0.0f}, 0.0f, 9}), ContractViolation);
}

TEST_CASE("action selection") {
  for (const auto& ds : {fork_data(), chain_data()}) {
    const auto ck = untrained(ds, 6);
    std::mt19937_64 data_rng(9);
    const auto buffer = random_buffer(ck.model, 4, data_rng);
    const auto current = random_current(ck.model, 4, data_rng);
    InferenceConfig icfg;
    icfg.T = 6;
    std::mt19937_64 r1(10), r2(10);
    const auto a = select_action(ck.params, ck.model, ck.tokenizer, icfg, buffer, current, r1);
    const auto b = select_action(ck.params, ck.model, ck.tokenizer, icfg, buffer, current, r2);
    CHECK(a.action == b.action);
    CHECK(a.return_bin == b.return_bin);
    CHECK(a.search.lengths == std::vector<std::size_t>{4, 2});
    CHECK(a.return_token == static_cast<float>(ck.tokenizer.detokenize(a.return_bin)));
    if (ds.action.kind == data::ActionKind::kContinuous) {
      CHECK(std::abs(a.action[0]) < 1.0f);
    } else {
      CHECK((a.action[0] == 0.0f || a.action[0] == 1.0f));
    }

    training::Checkpoint ck2 = ck;
    ck2.train.alpha = 0.5;
    icfg.kappa = 0.0;
    std::mt19937_64 r3(11);
    const auto c = select_action(ck2.params, ck2.model, ck2.tokenizer, icfg, buffer, current, r3);
    CHECK(c.action.size() == ds.action.stored_width());

    const TraversedBuffer empty(6);
    std::mt19937_64 r4(12);
    const auto d = select_action(ck.params, ck.model, ck.tokenizer, icfg, empty, random_current(ck.model, 0, r4), r4);
    CHECK(d.search.lengths == std::vector<std::size_t>{1});
  }
}

TEST_CASE("candidate lengths by mode") {
  InferenceConfig icfg;
  CHECK(candidate_lengths(icfg, 7, std::nullopt) == std::vector<std::size_t>{6, 4, 2});
  icfg.heuristic = true;
  CHECK(candidate_lengths(icfg, 7, std::nullopt) == std::vector<std::size_t>{6, 4, 2});
  CHECK(candidate_lengths(icfg, 20, 10) == std::vector<std::size_t>{6, 7, 8, 9, 10, 11, 12, 13, 14});
  icfg.heuristic = false;
  icfg.fixed_w = 5;
  CHECK(candidate_lengths(icfg, 3, std::nullopt) == std::vector<std::size_t>{3});
  CHECK(candidate_lengths(icfg, 30, 1) == std::vector<std::size_t>{5});
}

TEST_CASE("inference config json") {
  InferenceConfig c;
  c.fixed_w = 4;
  c.kappa = 3.5;
  CHECK(InferenceConfig::from_json(c.to_json()) == c);
  CHECK(InferenceConfig::from_json(nlohmann::json::object()) == InferenceConfig{});
  CHECK_THROWS_AS(InferenceConfig::from_json({{"kapa", 1.0}}), ConfigError);
  CHECK_THROWS_AS(InferenceConfig::from_json({{"pct", 1.0}}), ConfigError);
  CHECK_THROWS_AS(InferenceConfig::from_json({{"delta", 0}}), ConfigError);
  CHECK_THROWS_AS(InferenceConfig::from_json({{"fixed_w", 30}}), ConfigError);
}

TEST_CASE("rollouts") {
  const auto env = envs::make_fork_env();
  const auto ds = fork_data();
  const auto ck = untrained(ds, 20);
  InferenceConfig icfg;
  icfg.delta = 1;

  const auto r = rollout(env, ck, icfg, 30, 3);
  CHECK(r.returns.size() == 30);
  CHECK(r.mean() >= 0.0);
  CHECK(r.mean() <= 1.0);
  for (std::size_t n : r.lengths) CHECK(n == 2);
  for (const auto& s : r.log) CHECK(s.search_passes == build_search_space(20, 1, s.step + 1).size());

  const auto again = rollout(env, ck, icfg, 30, 3);
  std::ostringstream a, b;
  write_length_log(a, r.log);
  write_length_log(b, again.log);
  CHECK(a.str() == b.str());
  CHECK(r.returns == again.returns);
  CHECK(a.str().rfind("episode,step,timestep,chosen_w,rtilde_max,sampled_return_bin\n", 0) == 0);

  const auto hist = length_histogram(r.log, 20);
  CHECK(hist.size() == 20);
  std::size_t total = 0;
  for (std::size_t v : hist) total += v;
  CHECK(total == r.log.size());

  SECTION("fixed length") {
    InferenceConfig fixed = icfg;
    fixed.fixed_w = 1;
    for (const auto& s : rollout(env, ck, fixed, 10, 4).log) CHECK(s.chosen_w == 1);
    fixed.fixed_w = 20;
    for (const auto& s : rollout(env, ck, fixed, 10, 4).log) {
      CHECK(s.chosen_w == s.step + 1);
      CHECK(s.search_passes == 1);
    }
  }
  SECTION("start state and chain env") {
    const auto from_b = rollout(env, ck, icfg, 10, 5, env.state_index("start_b"));
    for (const auto& s : from_b.log) {
      if (s.step == 0) CHECK(s.state == env.state_index("start_b"));
    }
    const auto chain = envs::make_chain_env(9, 30, 0.3, 1.0);
    const auto cck = untrained(chain_data(), 20);
    const auto cr = rollout(chain, cck, InferenceConfig{}, 5, 6);
    for (std::size_t i = 0; i < cr.returns.size(); ++i) {
      CHECK(cr.lengths[i] <= 30);
      CHECK(cr.returns[i] <= 1.0);
    }
  }
  SECTION("mismatches are configuration errors") {
    CHECK_THROWS_AS(rollout(envs::make_chain_env(9, 12, 0.3, 1.0), ck, icfg, 1, 0), ConfigError);
    InferenceConfig too_long = icfg;
    too_long.T = 21;
    CHECK_THROWS_AS(rollout(env, ck, too_long, 1, 0), ConfigError);
  }
}
