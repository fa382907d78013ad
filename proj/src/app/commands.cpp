#include "edt/app/commands.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>

#include "edt/data/jsonl.hpp"
#include "edt/errors.hpp"
#include "edt/training/train.hpp"

namespace edt::app {

namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  ensure_dir(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

data::Dataset load_dataset(const RunConfig& cfg) {
  const auto path = cfg.dataset_path();
  if (!fs::exists(path)) throw IoError("dataset '" + path.string() + "' not found (run gen-data first)");
  return data::read_jsonl(path);
}

void print_loss(std::ostream& log, const training::LossBreakdown& l) {
  log << "final loss: total=" << fmt(l.total) << " l_return=" << fmt(l.l_return)
      << " l_observation=" << fmt(l.l_observation) << " l_action=" << fmt(l.l_action) << " l_max=" << fmt(l.l_max)
      << '\n';
}

void check_env_matches(const envs::Env& env, const training::Checkpoint& ck) {
  const auto& extra = ck.extra;
  if (extra.contains("dataset_meta") && extra["dataset_meta"].contains("env") &&
      extra["dataset_meta"]["env"] != env.spec()) {
    throw ConfigError("env: " + env.spec().dump() + " does not match the checkpoint's training env " +
                      extra["dataset_meta"]["env"].dump());
  }
}

std::optional<std::size_t> resolve_start(const envs::Env& env, const EvalSpec& eval) {
  if (!eval.start_state) return std::nullopt;
  try {
    return env.state_index(*eval.start_state);
  } catch (const std::exception&) {
    throw ConfigError("eval.start_state: env '" + env.name() + "' has no state '" + *eval.start_state + "'");
  }
}

}  // namespace

GenDataSummary cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  const auto env = envs::make_env(cfg.env);
  const auto policy = cfg.dataset.policy.value_or(default_policy(env));
  const auto ds = envs::generate_dataset(env, policy, cfg.dataset.n_episodes, cfg.dataset.seed);
  GenDataSummary s;
  s.path = cfg.dataset_path();
  ensure_dir(s.path.parent_path());
  data::write_jsonl(s.path, ds);
  s.episodes = ds.trajectories.size();
  s.return_min = s.return_max = ds.trajectories.front().episode_return();
  double sum = 0.0;
  for (const auto& t : ds.trajectories) {
    const double r = t.episode_return();
    s.return_min = std::min(s.return_min, r);
    s.return_max = std::max(s.return_max, r);
    sum += r;
  }
  s.return_mean = sum / static_cast<double>(s.episodes);
  log << "wrote " << s.path.string() << ": episodes=" << s.episodes << " steps=" << ds.total_steps()
      << " return min=" << fmt(s.return_min) << " max=" << fmt(s.return_max) << " mean=" << fmt(s.return_mean)
      << '\n';
  return s;
}

TrainSummary cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto ds = load_dataset(cfg);
  TrainSummary s;
  s.checkpoint = cfg.checkpoint_path();
  s.metrics = fs::path(cfg.out) / "metrics.csv";
  training::Checkpoint start;
  std::size_t n_steps = cfg.train.n_steps;
  if (!cfg.resume.empty()) {
    start = training::load_checkpoint(cfg.resume);
  } else {
    start = training::initial_checkpoint(ds, resolve_model(cfg, ds), cfg.train);
  }
  auto metrics = open_out(s.metrics);
  metrics << training::kMetricsHeader << '\n';
  const auto result = training::continue_training(ds, std::move(start), n_steps, [&](const training::MetricsRow& row) {
    training::write_metrics_row(metrics, row);
  });
  metrics.flush();
  if (!metrics) throw IoError("failed writing '" + s.metrics.string() + "'");
  training::save_checkpoint(s.checkpoint, result.checkpoint);
  s.steps = result.metrics.size();
  log << "trained " << s.steps << " steps (optimizer step " << result.checkpoint.params.step() << "); wrote "
      << s.checkpoint.string() << " and " << s.metrics.string() << '\n';
  if (!result.metrics.empty()) {
    s.final_loss = result.metrics.back().loss;
    print_loss(log, *s.final_loss);
  }
  return s;
}

inference::RolloutResult evaluate(const envs::Env& env, const training::Checkpoint& ck,
                                  const inference::InferenceConfig& icfg, const EvalSpec& eval) {
  check_env_matches(env, ck);
  return inference::rollout(env, ck, icfg, eval.n_episodes, eval.seed, resolve_start(env, eval));
}

double cached_random_baseline(const envs::Env& env, const fs::path& dir) {
  constexpr std::size_t kEpisodes = 1000;
  constexpr std::uint64_t kSeed = 0;
  const auto path = dir / "random_baseline.json";
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      const auto j = nlohmann::json::parse(in);
      if (j.at("env") == env.spec() && j.at("episodes") == kEpisodes && j.at("seed") == kSeed) {
        return j.at("value").get<double>();
      }
    } catch (const nlohmann::json::exception&) {
      // unreadable cache: recompute below
    }
  }
  const double value = envs::random_policy_baseline(env, kEpisodes, kSeed);
  write_json(path, {{"env", env.spec()}, {"episodes", kEpisodes}, {"seed", kSeed}, {"value", value}});
  return value;
}

std::optional<double> normalized_score(double mean, double random_baseline, double oracle) {
  if (oracle == random_baseline) return std::nullopt;
  return (mean - random_baseline) / (oracle - random_baseline);
}

std::string checkpoint_hash(const training::Checkpoint& ck) {
  return training::hex64(training::fnv1a(training::serialize_checkpoint(ck)));
}

EvalSummary cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto env = envs::make_env(cfg.env);
  const auto ck = training::load_checkpoint(cfg.checkpoint_path());
  const auto r = evaluate(env, ck, cfg.inference, cfg.eval);
  const auto start = resolve_start(env, cfg.eval);
  const double oracle = start ? envs::optimal_return_oracle(env, *start) : envs::optimal_return_oracle(env);
  const fs::path out(cfg.out);
  ensure_dir(out);
  const double random = cached_random_baseline(env, out);
  const auto score = normalized_score(r.mean(), random, oracle);

  EvalSummary s;
  auto& j = s.results;
  j["mode"] = cfg.inference.fixed_w ? "fixed" : "elastic";
  j["w"] = cfg.inference.fixed_w ? nlohmann::json(*cfg.inference.fixed_w) : nlohmann::json(nullptr);
  j["env"] = env.spec();
  j["start_state"] = cfg.eval.start_state ? nlohmann::json(*cfg.eval.start_state) : nlohmann::json(nullptr);
  j["n_episodes"] = cfg.eval.n_episodes;
  j["seed"] = cfg.eval.seed;
  j["inference"] = cfg.inference.to_json();
  j["checkpoint_hash"] = checkpoint_hash(ck);
  j["mean"] = r.mean();
  j["std"] = r.stddev();
  j["returns"] = r.returns;
  j["episode_lengths"] = r.lengths;
  j["oracle"] = oracle;
  j["random_baseline"] = random;
  j["normalized_score"] = score ? nlohmann::json(*score) : nlohmann::json(nullptr);

  s.results_path = out / "results.json";
  s.lengths_path = out / "chosen_lengths.csv";
  s.histogram_path = out / "length_histogram.csv";
  write_json(s.results_path, j);
  {
    auto f = open_out(s.lengths_path);
    inference::write_length_log(f, r.log);
  }
  {
    auto f = open_out(s.histogram_path);
    const auto hist = inference::length_histogram(r.log, cfg.inference.T);
    f << "w,count,fraction\n";
    for (std::size_t w = 1; w <= hist.size(); ++w) {
      const double frac = r.log.empty() ? 0.0 : static_cast<double>(hist[w - 1]) / static_cast<double>(r.log.size());
      f << w << ',' << hist[w - 1] << ',' << fmt(frac) << '\n';
    }
  }
  log << j["mode"].get<std::string>() << " eval over " << cfg.eval.n_episodes << " episodes: mean=" << fmt(r.mean())
      << " std=" << fmt(r.stddev()) << " oracle=" << fmt(oracle) << " random=" << fmt(random)
      << " normalized=" << (score ? fmt(*score) : std::string("n/a")) << '\n';
  return s;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& log) {
  const std::string& param = cfg.sweep.param;
  if (param != "alpha" && param != "delta" && param != "fixed_w" && param != "elastic") {
    throw ConfigError("sweep.param: unknown sweep parameter '" + param +
                      "' (expected alpha, delta, fixed_w or elastic)");
  }
  if (param != "elastic" && cfg.sweep.values.empty()) throw ConfigError("sweep.values: no values to sweep");
  auto as_count = [&](double v) {
    if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError("sweep.values: " + param + " needs integers >= 1");
    return static_cast<std::size_t>(v);
  };
  const auto env = envs::make_env(cfg.env);
  const auto ds = load_dataset(cfg);
  const auto mcfg = resolve_model(cfg, ds);

  std::vector<AblationRow> rows;
  auto run = [&](const training::Checkpoint& ck, const inference::InferenceConfig& icfg, double value,
                 std::uint64_t seed, const std::string& hash) {
    const auto r = evaluate(env, ck, icfg, cfg.eval);
    AblationRow row{param, value, seed, icfg.fixed_w ? "fixed" : "elastic", icfg.fixed_w, r.mean(), r.stddev(), hash};
    log << param << '=' << fmt(value) << " seed=" << seed << " mode=" << row.mode << " mean=" << fmt(row.mean)
        << " std=" << fmt(row.std) << '\n';
    rows.push_back(row);
  };
  auto train_one = [&](std::uint64_t seed, std::optional<double> alpha) {
    auto tcfg = cfg.train;
    tcfg.seed = seed;
    if (alpha) tcfg.alpha = *alpha;
    return training::train(ds, mcfg, tcfg).checkpoint;
  };

  for (std::uint64_t seed : cfg.seeds) {
    if (param == "alpha") {
      for (double v : cfg.sweep.values) {
        const auto ck = train_one(seed, v);
        run(ck, cfg.inference, v, seed, checkpoint_hash(ck));
      }
      continue;
    }
    const auto ck = train_one(seed, std::nullopt);
    const auto hash = checkpoint_hash(ck);
    if (param == "elastic") {
      auto elastic = cfg.inference;
      elastic.fixed_w.reset();
      auto fixed = elastic;
      fixed.fixed_w = elastic.T;
      run(ck, elastic, 0.0, seed, hash);
      run(ck, fixed, static_cast<double>(elastic.T), seed, hash);
      continue;
    }
    for (double v : cfg.sweep.values) {
      auto icfg = cfg.inference;
      if (param == "delta") {
        icfg.delta = as_count(v);
      } else {
        icfg.heuristic = false;
        icfg.fixed_w = as_count(v);
      }
      icfg.validate();
      run(ck, icfg, v, seed, hash);
    }
  }

  const auto path = fs::path(cfg.out) / "ablation.csv";
  auto f = open_out(path);
  f << "param,value,seed,mode,w,mean,std,checkpoint_hash\n";
  for (const auto& r : rows) {
    f << r.param << ',' << fmt(r.value) << ',' << r.seed << ',' << r.mode << ',' << (r.w ? std::to_string(*r.w) : "")
      << ',' << fmt(r.mean) << ',' << fmt(r.std) << ',' << r.checkpoint_hash << '\n';
  }
  if (!f) throw IoError("failed writing '" + path.string() + "'");
  log << "wrote " << path.string() << " (" << rows.size() << " rows)\n";
  return rows;
}

}  // namespace edt::app
