#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "edt/data/dataset.hpp"
#include "edt/model/model.hpp"
#include "edt/training/checkpoint.hpp"
#include "edt/training/loss.hpp"

namespace edt::training {

struct MetricsRow {
  std::int64_t step = 0;  ///< optimizer step count after this update
  LossBreakdown loss;
  double grad_norm = 0.0;  ///< pre-clip global norm
};

using MetricsSink = std::function<void(const MetricsRow&)>;
/// Called every eval_every steps with the current checkpoint.
using EvalHook = std::function<void(const Checkpoint&)>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
};

/// Fresh model and optimizer state for `ds`; the model config's obs/action
/// dims must match the dataset (ConfigError otherwise).
Checkpoint initial_checkpoint(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& tcfg);

/// Runs `n_steps` more updates from `start`, continuing its optimizer and sampler state.
/// A NumericFault is rethrown carrying the offending step index.
TrainResult continue_training(const data::Dataset& ds, Checkpoint start, std::size_t n_steps,
                              const MetricsSink& sink = {}, const EvalHook& eval = {});

/// initial_checkpoint followed by tcfg.n_steps updates.
TrainResult train(const data::Dataset& ds, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const MetricsSink& sink = {}, const EvalHook& eval = {});

/// Loss of one batch without updating anything (used for diagnostics).
LossBreakdown evaluate_batch_loss(const Checkpoint& ck, const data::Dataset& ds, std::size_t batch_size,
                                  std::uint64_t seed);

extern const char* const kMetricsHeader;
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_metrics_row(std::ostream& out, const MetricsRow& row);

}  // namespace edt::training
