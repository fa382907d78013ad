#include <CLI11.hpp>

#include <ostream>
#include <sstream>

#include "edt/app/commands.hpp"
#include "edt/errors.hpp"

namespace edt::app {

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> fixed_w;
  std::optional<std::size_t> delta;
  std::optional<double> alpha;
  std::optional<double> kappa;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  std::optional<std::string> param;
  std::vector<double> values;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run config (defaults apply to missing keys)");
  cmd->add_option("--seed", o.seed, "seed for this command's randomness");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--fixed-w", o.fixed_w, "evaluate with a fixed history length");
  cmd->add_option("--delta", o.delta, "history-length search stride");
  cmd->add_option("--alpha", o.alpha, "expectile level");
  cmd->add_option("--kappa", o.kappa, "inverse temperature of the expert-return tilt");
  cmd->add_option("--checkpoint", o.checkpoint, "checkpoint path (default <out>/checkpoint.edt)");
}

RunConfig build_config(const std::string& verb, const Overrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.out) cfg.out = *o.out;
  if (o.checkpoint) cfg.checkpoint = *o.checkpoint;
  if (o.resume) cfg.resume = *o.resume;
  if (o.fixed_w) cfg.inference.fixed_w = *o.fixed_w;
  if (o.delta) cfg.inference.delta = *o.delta;
  if (o.kappa) cfg.inference.kappa = *o.kappa;
  if (o.alpha) cfg.train.alpha = *o.alpha;
  if (o.param) cfg.sweep.param = *o.param;
  if (!o.values.empty()) cfg.sweep.values = o.values;
  if (o.seed) {
    if (verb == "gen-data") cfg.dataset.seed = *o.seed;
    if (verb == "train") cfg.train.seed = *o.seed;
    if (verb == "eval") cfg.eval.seed = *o.seed;
    if (verb == "ablate") cfg.seeds = {*o.seed};
  }
  cfg.inference.validate();
  cfg.train.validate();
  return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Elastic decision transformer: dataset generation, training, evaluation and ablations"};
  app.require_subcommand(1);
  Overrides o;
  auto* gen = app.add_subcommand("gen-data", "generate a behavior dataset (JSONL)");
  auto* train = app.add_subcommand("train", "train a model, writing a checkpoint and metrics CSV");
  auto* eval = app.add_subcommand("eval", "roll out a checkpoint; writes results JSON and chosen-length CSVs");
  auto* ablate = app.add_subcommand("ablate", "sweep alpha, delta, fixed_w or elastic-vs-fixed");
  for (auto* cmd : {gen, train, eval, ablate}) add_common(cmd, o);
  train->add_option("--resume", o.resume, "continue from this checkpoint");
  ablate->add_option("--param", o.param, "alpha | delta | fixed_w | elastic");
  ablate->add_option("--values", o.values, "sweep values")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o_out, o_err;
    const int code = app.exit(e, o_out, o_err);
    out << o_out.str();
    err << o_err.str();
    return code == 0 ? kOk : kConfigError;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = build_config(verb, o);
    if (verb == "gen-data") cmd_gen_data(cfg, out);
    if (verb == "train") cmd_train(cfg, out);
    if (verb == "eval") cmd_eval(cfg, out);
    if (verb == "ablate") cmd_ablate(cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const NumericFault& e) {
    err << "numeric fault: " << e.what() << '\n';
    return kNumericFault;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}

}  // namespace edt::app
