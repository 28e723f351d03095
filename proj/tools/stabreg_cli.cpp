// stabreg: simulate | run | sweep | verify | explain

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "stabreg/experiment.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<std::size_t> pool_size, subsample_size, epochs, batch_size, replicates, workers;
  std::optional<std::string> dataset, label_column;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (version 1)")->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "root seed");
  cmd->add_option("--lambda", o.lambda, "stability penalty weight");
  cmd->add_option("--pool-size", o.pool_size, "bootstrap pool size");
  cmd->add_option("--subsample-size", o.subsample_size, "pool members per optimiser step");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--batch-size", o.batch_size, "mini-batch size");
  cmd->add_option("--replicates", o.replicates, "seed replicates");
  cmd->add_option("--workers", o.workers, "worker threads (0 = hardware concurrency)");
  cmd->add_option("--dataset", o.dataset, "CSV dataset instead of the simulation");
  cmd->add_option("--label-column", o.label_column, "label column of the CSV dataset");
}

stabreg::ExperimentConfig resolve(const Overrides& o) {
  stabreg::ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = stabreg::config_from_json(stabreg::io::read_json(o.config_path));
  if (o.out) cfg.output_dir = *o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.lambda) cfg.train.lambda = *o.lambda;
  if (o.pool_size) cfg.train.pool_size = *o.pool_size;
  if (o.subsample_size) cfg.train.subsample_size = *o.subsample_size;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.replicates) cfg.replicates = *o.replicates;
  if (o.workers) cfg.train.workers = *o.workers;
  if (o.dataset) {
    cfg.dataset.source = "csv";
    cfg.dataset.csv_path = *o.dataset;
  }
  if (o.label_column) cfg.dataset.label_column = *o.label_column;
  return cfg;
}

int report(const stabreg::RunManifest& m, const std::string& out) {
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << '\n';
  if (!m.complete) {
    std::cerr << "stabreg " << m.command << ": stage '" << m.failed_stage << "' failed: " << m.error << '\n';
    return 1;
  }
  std::cout << m.command << " complete: " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bootstrap-stability regularised binary prediction models"};
  app.require_subcommand(1);

  Overrides sim_o, run_o, sweep_o;
  auto* simulate = app.add_subcommand("simulate", "write a simulated dataset and its sidecar");
  add_common(simulate, sim_o);
  auto* run = app.add_subcommand("run", "train standard, stable and ensemble models and evaluate them");
  add_common(run, run_o);
  auto* sweep = app.add_subcommand("sweep", "stable models over the lambda and subsample grids");
  add_common(sweep, sweep_o);

  std::string verify_dir;
  double verify_tol = 1e-9;
  auto* verify = app.add_subcommand("verify", "recompute a run's summary from its saved artifacts");
  verify->add_option("--out,run_dir", verify_dir, "run output directory")->required()->check(CLI::ExistingDirectory);
  verify->add_option("--tolerance", verify_tol, "absolute tolerance");

  stabreg::ExplainOptions ex;
  std::string ex_model, ex_data, ex_out = ex.output_dir.string();
  std::optional<std::string> ex_bg;
  auto* explain = app.add_subcommand("explain", "Shapley attributions for a saved model");
  explain->add_option("--model", ex_model, "model JSON")->required()->check(CLI::ExistingFile);
  explain->add_option("--dataset", ex_data, "CSV to explain")->required()->check(CLI::ExistingFile);
  explain->add_option("--label-column", ex.label_column, "label column");
  explain->add_option("--background", ex_bg, "background CSV (default: the explained dataset)");
  explain->add_option("--permutations", ex.attribution.n_permutations, "permutations per row (0 = exact)");
  explain->add_option("--background-size", ex.attribution.background_size, "background rows");
  explain->add_option("--explain-size", ex.attribution.explain_size, "explained rows");
  explain->add_option("--seed", ex.seed, "root seed");
  explain->add_option("--out", ex_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) {
      const auto cfg = resolve(sim_o);
      return report(stabreg::run_simulate(cfg), cfg.output_dir);
    }
    if (*run) {
      const auto cfg = resolve(run_o);
      return report(stabreg::run_experiment(cfg).manifest, cfg.output_dir);
    }
    if (*sweep) {
      const auto cfg = resolve(sweep_o);
      return report(stabreg::run_sweep(cfg).manifest, cfg.output_dir);
    }
    if (*verify) {
      const auto v = stabreg::verify_run(verify_dir, verify_tol);
      for (const auto& p : v.problems) std::cerr << "mismatch: " << p << '\n';
      std::cout << "checked " << v.values_checked << " values, max abs diff " << v.max_abs_diff << ": "
                << (v.ok ? "ok" : "FAILED") << '\n';
      return v.ok ? 0 : 1;
    }
    if (*explain) {
      ex.model_path = ex_model;
      ex.dataset_path = ex_data;
      if (ex_bg) ex.background_path = *ex_bg;
      ex.output_dir = ex_out;
      return report(stabreg::run_explain(ex), ex_out);
    }
  } catch (const stabreg::Error& e) {
    std::cerr << "stabreg: " << stabreg::to_string(e.kind()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "stabreg: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
