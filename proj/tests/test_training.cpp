#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "edt/envs/env.hpp"
#include "edt/envs/policy.hpp"
#include "edt/errors.hpp"
#include "edt/numerics/gradcheck.hpp"
#include "edt/numerics/ops.hpp"
#include "edt/training/checkpoint.hpp"
#include "edt/training/loss.hpp"
#include "edt/training/train.hpp"

using namespace edt;
using namespace edt::training;
using Catch::Approx;

namespace {

// Golden-section minimization of the empirical expectile loss: the oracle the
// closed-form solver is judged against.
double golden_section_expectile(const std::vector<double>& x, double alpha) {
  auto f = [&](double m) { return expectile_loss(std::vector<double>(x.size(), m), x, alpha); };
  double lo = *std::min_element(x.begin(), x.end());
  double hi = *std::max_element(x.begin(), x.end());
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
  double fa = f(a), fb = f(b);
  for (int i = 0; i < 200 && hi - lo > 1e-12; ++i) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - g * (hi - lo);
      fa = f(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + g * (hi - lo);
      fb = f(b);
    }
  }
  return 0.5 * (lo + hi);
}

model::ModelConfig tiny_model(const data::Dataset& ds, std::size_t T) {
  model::ModelConfig c;
  c.embed_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_timestep = 16;
  c.obs_dim = ds.obs_dim();
  c.action = ds.action;
  c.n_return_bins = 6;
  c.T = T;
  return c;
}

data::Dataset fork_dataset() {
  return envs::generate_dataset(envs::make_fork_env(), envs::PolicySpec{envs::PolicyKind::kTwoPolicy}, 100, 7);
}

data::Dataset chain_dataset() {
  const envs::PolicySpec spec{envs::PolicyKind::kMixture,
                              0.3,
                              {{envs::PolicyKind::kRandom, 0.5}, {envs::PolicyKind::kEpsilonMediocre, 0.5}}};
  return envs::generate_dataset(envs::make_chain_env(7, 8, 0.3, 1.0), spec, 40, 3);
}

std::string csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  return os.str();
}

}  // namespace

TEST_CASE("expectile loss values") {
  const std::vector<double> zero{0.0};
  CHECK(expectile_loss(zero, zero, 0.9) == 0.0);
  CHECK(expectile_loss(std::vector<double>{0.0}, std::vector<double>{2.0}, 0.5) == 2.0);
  CHECK(expectile_loss(std::vector<double>{0.0}, std::vector<double>{1.0}, 0.99) == Approx(0.99).margin(1e-15));
  CHECK(expectile_loss(std::vector<double>{0.0}, std::vector<double>{-1.0}, 0.99) == Approx(0.01).margin(1e-15));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(17), t(17);
    double mse = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = n(rng);
      t[i] = n(rng);
      mse += (t[i] - p[i]) * (t[i] - p[i]);
    }
    mse /= 17.0;
    CHECK(2.0 * expectile_loss(p, t, 0.5) == Approx(mse).epsilon(1e-15));
  }
}

TEST_CASE("scalar expectile solver") {
  CHECK(scalar_expectile(std::vector<double>{0.0, 1.0}, 0.99) == Approx(0.99).margin(1e-12));
  CHECK(std::abs(scalar_expectile(std::vector<double>{0.0, 1.0, 2.0}, 0.999) - 2.0) < 0.01);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(1 + rng() % 30);
    for (auto& v : x) v = n(rng);
    double prev = -1e300;
    for (double alpha : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
      const double m = scalar_expectile(x, alpha);
      CHECK(std::abs(m - golden_section_expectile(x, alpha)) <= 1e-6);
      CHECK(m >= prev - 1e-12);
      prev = m;
    }
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    CHECK(std::abs(scalar_expectile(x, 0.5) - mean) <= 1e-9);
  }
}

TEST_CASE("expectile loss is convex in the prediction", "[property]") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> x(5);
    for (auto& v : x) v = n(rng);
    const double alpha = u(rng);
    const double a = n(rng) * 3.0, b = n(rng) * 3.0, lam = u(rng);
    auto f = [&](double m) { return expectile_loss(std::vector<double>(5, m), x, alpha); };
    CHECK(f(lam * a + (1 - lam) * b) <= lam * f(a) + (1 - lam) * f(b) + 1e-12);
  }
}

TEST_CASE("loss combination") {
  TrainConfig cfg;
  const LossBreakdown parts{0.0, 2.0, 1.0, 0.5, 0.8};
  CHECK(combine(parts, cfg, ActionLossKind::kMse) == Approx(1.902).margin(1e-12));
  CHECK(action_weight(ActionLossKind::kCrossEntropy, 0.001) == Approx(0.01).margin(1e-15));
  CHECK(resolve_action_loss(ActionLossKind::kAuto, {data::ActionKind::kDiscrete, 2}) == ActionLossKind::kCrossEntropy);
  CHECK_THROWS_AS(resolve_action_loss(ActionLossKind::kMse, {data::ActionKind::kDiscrete, 2}), ConfigError);
  CHECK_THROWS_AS(resolve_action_loss(ActionLossKind::kCrossEntropy, {data::ActionKind::kContinuous, 1}),
                  ConfigError);
}

TEST_CASE("edt_loss on hand-built outputs") {
  const data::Dataset ds = fork_dataset();
  const auto w = data::make_window(ds, 0, 0, 5);  // two valid steps
  const std::vector<data::TokenWindow> windows{w};
  const data::ReturnTokenizer tok(4);
  TrainConfig cfg;
  ad::Tape<double> tape;
  model::BatchOutputs<double> out;
  out.packing = {{0}, {2}, {3}, 2};
  Tensor<double> logits = Tensor<double>::matrix(2, 4, -50.0);
  Tensor<double> rtilde = Tensor<double>::matrix(2, 1);
  Tensor<double> action = Tensor<double>::matrix(2, 1);
  Tensor<double> next_obs = Tensor<double>::matrix(2, 5);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::size_t pos = 3 + s;
    logits(s, tok.tokenize(w.returns[pos])) = 50.0;
    rtilde(s, 0) = w.returns[pos];
    action(s, 0) = w.actions[pos];
    for (std::size_t k = 0; k < 5; ++k) next_obs(s, k) = w.next_observations[pos * 5 + k];
  }
  next_obs(1, 0) = 123.0;  // last valid step carries no target and must not count
  out.return_logits = tape.constant(logits);
  out.rtilde = tape.constant(rtilde);
  out.action = tape.constant(action);
  out.next_obs = tape.constant(next_obs);
  const auto r = edt_loss(out, std::span<const data::TokenWindow>(windows), tok, cfg, ds.action);
  CHECK(r.parts.l_observation == 0.0);
  CHECK(r.parts.l_action == 0.0);
  CHECK(r.parts.l_max == 0.0);
  CHECK(r.parts.l_return >= 0.0);
  CHECK(r.parts.l_return < 1e-30);
  CHECK(r.parts.total == Approx(combine(r.parts, cfg, ActionLossKind::kMse)).margin(1e-15));

  TrainConfig wrong = cfg;
  wrong.action_loss = ActionLossKind::kCrossEntropy;
  CHECK_THROWS_AS(edt_loss(out, std::span<const data::TokenWindow>(windows), tok, wrong, ds.action), ConfigError);
}

TEST_CASE("loss components do not depend on left padding") {
  const data::Dataset ds = chain_dataset();
  const auto mcfg20 = tiny_model(ds, 20);
  const auto params = model::init_model(mcfg20, 5);
  const data::ReturnTokenizer tok(mcfg20.n_return_bins);
  const TrainConfig tcfg;
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w20 = data::sample_training_window(ds, 20, rng);
    const auto w12 = data::make_window(ds, w20.trajectory, w20.start, 12);
    if (w12.valid_count() != w20.valid_count()) continue;
    auto eval = [&](const data::TokenWindow& w) {
      ad::Tape<float> tape(&params, false);
      const std::vector<data::TokenWindow> ws{w};
      const auto out = model::forward_batch(tape, mcfg20, std::span<const data::TokenWindow>(ws),
                                            model::MaskMode::kReturnMasked);
      return edt_loss(out, std::span<const data::TokenWindow>(ws), tok, tcfg, ds.action).parts;
    };
    const auto a = eval(w20);
    const auto b = eval(w12);
    CHECK(a.total == b.total);
    CHECK(a.l_return == b.l_return);
    CHECK(a.l_observation == b.l_observation);
    CHECK(a.l_action == b.l_action);
    CHECK(a.l_max == b.l_max);
  }
}

TEST_CASE("full objective gradient matches finite differences on a 2-layer model") {
  const auto start = std::chrono::steady_clock::now();
  for (const auto& ds : {fork_dataset(), chain_dataset()}) {
    const auto mcfg = tiny_model(ds, 4);
    // Wider-than-default weights so that no parameter's gradient is trivially tiny.
    ParamStore<float> pf = model::init_model(mcfg, 9);
    std::mt19937_64 rng(10);
    std::normal_distribution<float> n(0.0f, 0.3f);
    for (auto& e : pf.entries()) {
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += n(rng);
    }
    const ParamStore<double> params = pf.cast<double>();
    std::vector<data::TokenWindow> batch;
    for (int b = 0; b < 4; ++b) batch.push_back(data::sample_training_window(ds, 4, rng));
    const data::ReturnTokenizer tok(mcfg.n_return_bins);
    TrainConfig tcfg;
    tcfg.c_r = 0.5;  // make every term visible in the total
    const LossGraph<double> graph = [&](ad::Tape<double>& tape) {
      const auto out = model::forward_batch(tape, mcfg, std::span<const data::TokenWindow>(batch),
                                            model::MaskMode::kReturnMasked);
      return edt_loss(out, std::span<const data::TokenWindow>(batch), tok, tcfg, ds.action).total;
    };
    const auto report = finite_diff_check(graph, params, {1e-4, 1e-4, 1e-3});
    INFO("max relative error " << report.max_rel_error());
    CHECK(report.pass);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(secs < 60.0);
}

TEST_CASE("training loop") {
  const data::Dataset ds = fork_dataset();
  model::ModelConfig mcfg = tiny_model(ds, 20);
  TrainConfig tcfg;
  tcfg.batch_size = 8;
  tcfg.seed = 3;

  SECTION("zero steps keep the initialization") {
    tcfg.n_steps = 0;
    const auto r = train(ds, mcfg, tcfg);
    CHECK(r.metrics.empty());
    CHECK(r.checkpoint.params == model::init_model(mcfg, 3));
  }

  SECTION("same seed gives identical metrics") {
    tcfg.n_steps = 25;
    const auto a = train(ds, mcfg, tcfg);
    const auto b = train(ds, mcfg, tcfg);
    CHECK(a.metrics.size() == 25);
    CHECK(csv(a.metrics) == csv(b.metrics));
    CHECK(a.checkpoint.params == b.checkpoint.params);
    tcfg.seed = 4;
    CHECK(csv(train(ds, mcfg, tcfg).metrics) != csv(a.metrics));
  }

  SECTION("resuming matches an uninterrupted run") {
    tcfg.n_steps = 20;
    const auto full = train(ds, mcfg, tcfg);
    tcfg.n_steps = 12;
    const auto half = train(ds, mcfg, tcfg);
    const auto rest = continue_training(ds, half.checkpoint, 8);
    CHECK(rest.checkpoint.params == full.checkpoint.params);
    CHECK(rest.metrics.front().step == 13);
  }

  SECTION("mismatched model dims are a configuration error") {
    mcfg.obs_dim = 3;
    CHECK_THROWS_AS(train(ds, mcfg, tcfg), ConfigError);
  }

  SECTION("a numeric fault reports the step") {
    data::Dataset bad = ds;
    bad.trajectories[0].returns_to_go[0] = std::nanf("");
    bad.return_min = 0.0f;
    tcfg.n_steps = 50;
    try {
      train(bad, mcfg, tcfg);
      FAIL("expected a numeric fault");
    } catch (const NumericFault& e) {
      REQUIRE(e.step().has_value());
      CHECK(*e.step() >= 1);
    }
  }
}

TEST_CASE("fork training lowers the smoothed loss") {
  const data::Dataset ds = fork_dataset();
  model::ModelConfig mcfg;
  mcfg.obs_dim = ds.obs_dim();
  mcfg.action = ds.action;
  mcfg.max_timestep = 2;
  TrainConfig tcfg;
  tcfg.n_steps = 2000;
  const auto r = train(ds, mcfg, tcfg);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    first += r.metrics[i].loss.total;
    last += r.metrics[r.metrics.size() - 100 + i].loss.total;
  }
  CHECK(last < first);
}

TEST_CASE("checkpoint round-trip") {
  const data::Dataset ds = chain_dataset();
  const auto mcfg = tiny_model(ds, 6);
  TrainConfig tcfg;
  tcfg.n_steps = 5;
  tcfg.batch_size = 4;
  const auto r = train(ds, mcfg, tcfg);
  const auto bytes = serialize_checkpoint(r.checkpoint);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back.params == r.checkpoint.params);
  CHECK(back.model == r.checkpoint.model);
  CHECK(back.train == r.checkpoint.train);
  CHECK(back.stats == r.checkpoint.stats);
  CHECK(back.tokenizer == r.checkpoint.tokenizer);
  CHECK(back.rng_state == r.checkpoint.rng_state);
  CHECK(serialize_checkpoint(back) == bytes);

  SECTION("file round-trip and zero-step resume are byte-identical") {
    const auto dir = std::filesystem::temp_directory_path() / "edt_test_ckpt";
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "a.edt", r.checkpoint);
    const auto loaded = load_checkpoint(dir / "a.edt");
    const auto resumed = continue_training(ds, loaded, 0);
    save_checkpoint(dir / "b.edt", resumed.checkpoint);
    CHECK(serialize_checkpoint(load_checkpoint(dir / "b.edt")) == bytes);
    std::filesystem::remove_all(dir);
  }
  SECTION("corruption is detected") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), IoError);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    CHECK_THROWS_AS(deserialize_checkpoint(cut), IoError);
    auto tiny = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 20);
    CHECK_THROWS_AS(deserialize_checkpoint(tiny), IoError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.edt"), IoError);
  }
}
