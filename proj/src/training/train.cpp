#include "edt/training/train.hpp"

#include <cstdio>
#include <ostream>
#include <random>
#include <sstream>

#include "edt/data/window.hpp"
#include "edt/errors.hpp"
#include "edt/numerics/optim.hpp"

namespace edt::training {

namespace {

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw IoError("checkpoint holds an unreadable sampler state");
  return rng;
}

void check_compatible(const data::Dataset& ds, const model::ModelConfig& mcfg) {
  if (ds.trajectories.empty()) throw ConfigError("dataset: no episodes to train on");
  if (mcfg.obs_dim != ds.obs_dim()) {
    throw ConfigError("model.obs_dim: " + std::to_string(mcfg.obs_dim) + " does not match dataset obs dim " +
                      std::to_string(ds.obs_dim()));
  }
  if (!(mcfg.action == ds.action)) {
    throw ConfigError("model.action_kind: model expects " + data::to_string(mcfg.action.kind) + " actions of dim " +
                      std::to_string(mcfg.action.dim) + ", dataset has " + data::to_string(ds.action.kind) +
                      " of dim " + std::to_string(ds.action.dim));
  }
}

std::vector<data::TokenWindow> sample_batch(const data::Dataset& ds, std::size_t T, std::size_t n,
                                            std::mt19937_64& rng) {
  std::vector<data::TokenWindow> batch;
  batch.reserve(n);
  for (std::size_t b = 0; b < n; ++b) batch.push_back(data::sample_training_window(ds, T, rng));
  return batch;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

const char* const kMetricsHeader = "step,total,l_return,l_observation,l_action,l_max,grad_norm";

Checkpoint initial_checkpoint(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  check_compatible(ds, mcfg);
  resolve_action_loss(tcfg.action_loss, ds.action);
  Checkpoint ck;
  ck.model = mcfg;
  ck.train = tcfg;
  ck.stats = data::DataStats::from(ds);
  ck.tokenizer = data::ReturnTokenizer(mcfg.n_return_bins, 0.0, 1.0);
  ck.rng_state = rng_to_string(std::mt19937_64(tcfg.seed));
  ck.params = model::init_model(mcfg, tcfg.seed);
  ck.extra = {{"dataset_meta", ds.meta}};
  return ck;
}

TrainResult continue_training(const data::Dataset& ds, Checkpoint start, std::size_t n_steps,
                              const MetricsSink& sink, const EvalHook& eval) {
  const auto& mcfg = start.model;
  const auto& tcfg = start.train;
  check_compatible(ds, mcfg);
  // Windows are normalized with the checkpoint's statistics, not refit ones.
  data::Dataset view = ds;
  view.obs_mean = start.stats.obs_mean;
  view.obs_std = start.stats.obs_std;
  view.return_min = start.stats.return_min;
  view.return_max = start.stats.return_max;

  std::mt19937_64 rng = rng_from_string(start.rng_state);
  const AdamWConfig opt{tcfg.lr, tcfg.weight_decay, tcfg.beta1, tcfg.beta2, tcfg.eps};
  TrainResult result;
  result.metrics.reserve(n_steps);
  auto& params = start.params;
  for (std::size_t i = 0; i < n_steps; ++i) {
    const std::int64_t step = params.step() + 1;
    try {
      const auto batch = sample_batch(view, mcfg.T, tcfg.batch_size, rng);
      ad::Tape<float> tape(&params);
      const auto out = model::forward_batch(tape, mcfg, std::span<const data::TokenWindow>(batch),
                                            model::MaskMode::kReturnMasked);
      const auto loss = edt_loss(out, std::span<const data::TokenWindow>(batch), start.tokenizer, tcfg, ds.action);
      tape.backward(loss.total);
      auto grads = tape.param_grads();
      const double norm = clip_global_norm(grads, tcfg.grad_clip);
      adamw_update(params, grads, opt);
      for (const auto& e : params.entries()) {
        if (!e.value.all_finite()) throw NumericFault("adamw_update");
      }
      MetricsRow row{step, loss.parts, norm};
      if (sink) sink(row);
      result.metrics.push_back(row);
    } catch (const NumericFault& e) {
      throw e.at_step(step);
    }
    if (eval && tcfg.eval_every > 0 && step % static_cast<std::int64_t>(tcfg.eval_every) == 0) {
      start.rng_state = rng_to_string(rng);
      eval(start);
    }
  }
  start.rng_state = rng_to_string(rng);
  result.checkpoint = std::move(start);
  return result;
}

TrainResult train(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const MetricsSink& sink, const EvalHook& eval) {
  return continue_training(ds, initial_checkpoint(ds, mcfg, tcfg), tcfg.n_steps, sink, eval);
}

LossBreakdown evaluate_batch_loss(const Checkpoint& ck, const data::Dataset& ds, std::size_t batch_size,
                                  std::uint64_t seed) {
  check_compatible(ds, ck.model);
  data::Dataset view = ds;
  view.obs_mean = ck.stats.obs_mean;
  view.obs_std = ck.stats.obs_std;
  view.return_min = ck.stats.return_min;
  view.return_max = ck.stats.return_max;
  std::mt19937_64 rng(seed);
  const auto batch = sample_batch(view, ck.model.T, batch_size, rng);
  ad::Tape<float> tape(&ck.params, /*record=*/false);
  const auto out = model::forward_batch(tape, ck.model, std::span<const data::TokenWindow>(batch),
                                        model::MaskMode::kReturnMasked);
  return edt_loss(out, std::span<const data::TokenWindow>(batch), ck.tokenizer, ck.train, ds.action).parts;
}

void write_metrics_row(std::ostream& out, const MetricsRow& r) {
  out << r.step << ',' << fmt(r.loss.total) << ',' << fmt(r.loss.l_return) << ',' << fmt(r.loss.l_observation) << ','
      << fmt(r.loss.l_action) << ',' << fmt(r.loss.l_max) << ',' << fmt(r.grad_norm) << '\n';
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) write_metrics_row(out, r);
}

}  // namespace edt::training
