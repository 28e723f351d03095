#pragma once

// Experiment driver: configuration, the run/sweep/verify/explain pipelines and
// the files they write. Every random choice is drawn from a SeedFamily rooted
// at ExperimentConfig::seed, so one seed reproduces a whole output directory.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "stabreg/attribution.hpp"
#include "stabreg/data.hpp"
#include "stabreg/error.hpp"
#include "stabreg/eval.hpp"
#include "stabreg/io.hpp"
#include "stabreg/model.hpp"
#include "stabreg/rng.hpp"
#include "stabreg/training.hpp"

namespace stabreg {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct DatasetSpec {
  std::string source = "simulate";  // "simulate" or "csv"
  SimConfig simulation;             // seed is derived per replicate
  std::string csv_path;
  std::string label_column = "y";
  std::vector<std::string> feature_columns;  // empty: every non-label column
};

struct EvalSpec {
  double threshold = 0.05;
  AttributionConfig attribution;
  bool attributions = true;
  std::size_t spread_members = 20;
  std::size_t violin_rows = 50;
  std::size_t histogram_bins = 20;
};

struct SweepSpec {
  std::vector<double> lambda_grid{0.01, 0.1, 1.0, 10.0};
  std::vector<std::size_t> subsample_grid{20, 50, 100};
  double subsample_lambda = 0.1;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetSpec dataset;
  double test_fraction = 0.2;
  bool standardise = true;
  TrainConfig train;
  EvalSpec eval;
  SweepSpec sweep;
  std::size_t replicates = 1;
  std::string output_dir = "stabreg_out";

  void validate() const {
    if (dataset.source == "simulate") {
      dataset.simulation.validate();
    } else if (dataset.source == "csv") {
      if (dataset.csv_path.empty()) throw Error(ErrorKind::invalid_config, "csv dataset needs a path");
      if (!std::filesystem::exists(dataset.csv_path))
        throw Error(ErrorKind::missing_file, "dataset not found: " + dataset.csv_path);
    } else {
      throw Error(ErrorKind::invalid_config, "dataset source must be 'simulate' or 'csv', got '" + dataset.source + "'");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw Error(ErrorKind::invalid_config, "test_fraction must lie in (0, 1)");
    train.validate();
    if (replicates < 1) throw Error(ErrorKind::invalid_config, "replicates must be >= 1");
    if (!(eval.threshold > 0.0 && eval.threshold <= 1.0))
      throw Error(ErrorKind::invalid_config, "threshold must lie in (0, 1]");
    if (eval.histogram_bins < 1) throw Error(ErrorKind::invalid_config, "histogram_bins must be >= 1");
    if (eval.attributions) {
      if (eval.attribution.background_size < 1 || eval.attribution.explain_size < 1)
        throw Error(ErrorKind::invalid_config, "attribution background and explain sizes must be >= 1");
      if (eval.spread_members > train.pool_size)
        throw Error(ErrorKind::invalid_config, "spread_members exceeds pool_size");
    }
  }

  void validate_sweep() const {
    validate();
    if (sweep.lambda_grid.empty() || sweep.subsample_grid.empty())
      throw Error(ErrorKind::invalid_config, "sweep grids must be nonempty");
    for (double l : sweep.lambda_grid)
      if (!(l >= 0.0)) throw Error(ErrorKind::invalid_config, "lambda grid values must be >= 0");
    for (std::size_t m : sweep.subsample_grid)
      if (m > train.pool_size) throw Error(ErrorKind::invalid_config, "subsample grid value exceeds pool_size");
  }
};

inline io::Json config_to_json(const ExperimentConfig& c) {
  io::Json train = train_config_to_json(c.train);
  train.erase("seed");
  const auto& sim = c.dataset.simulation;
  return {{"version", kConfigVersion},
          {"seed", c.seed},
          {"dataset",
           {{"source", c.dataset.source},
            {"simulation",
             {{"n", sim.n},
              {"p_binary", sim.p_binary},
              {"p_informative", sim.p_informative},
              {"p_noise", sim.p_noise},
              {"beta_low", sim.beta_low},
              {"beta_high", sim.beta_high}}},
            {"csv_path", c.dataset.csv_path},
            {"label_column", c.dataset.label_column},
            {"feature_columns", c.dataset.feature_columns}}},
          {"split", {{"test_fraction", c.test_fraction}, {"standardise", c.standardise}}},
          {"train", train},
          {"eval",
           {{"threshold", c.eval.threshold},
            {"attributions", c.eval.attributions},
            {"permutations", c.eval.attribution.n_permutations},
            {"background_size", c.eval.attribution.background_size},
            {"explain_size", c.eval.attribution.explain_size},
            {"spread_members", c.eval.spread_members},
            {"violin_rows", c.eval.violin_rows},
            {"histogram_bins", c.eval.histogram_bins}}},
          {"sweep",
           {{"lambda_grid", c.sweep.lambda_grid},
            {"subsample_grid", c.sweep.subsample_grid},
            {"subsample_lambda", c.sweep.subsample_lambda}}},
          {"replicates", c.replicates},
          {"output_dir", c.output_dir}};
}

/// Keys absent from `j` keep the values in `c`; `version` is required.
inline ExperimentConfig config_from_json(const io::Json& j, ExperimentConfig c = {}) {
  if (!j.is_object()) throw Error(ErrorKind::invalid_config, "config must be a JSON object");
  if (!j.contains("version")) throw Error(ErrorKind::invalid_config, "config is missing 'version'");
  if (j.at("version").get<int>() != kConfigVersion)
    throw Error(ErrorKind::invalid_config, "unsupported config version " + j.at("version").dump());
  try {
    c.seed = j.value("seed", c.seed);
    c.replicates = j.value("replicates", c.replicates);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.source = d.value("source", c.dataset.source);
      c.dataset.csv_path = d.value("csv_path", c.dataset.csv_path);
      c.dataset.label_column = d.value("label_column", c.dataset.label_column);
      c.dataset.feature_columns = d.value("feature_columns", c.dataset.feature_columns);
      if (d.contains("simulation")) {
        const auto& s = d.at("simulation");
        auto& sim = c.dataset.simulation;
        sim.n = s.value("n", sim.n);
        sim.p_binary = s.value("p_binary", sim.p_binary);
        sim.p_informative = s.value("p_informative", sim.p_informative);
        sim.p_noise = s.value("p_noise", sim.p_noise);
        sim.beta_low = s.value("beta_low", sim.beta_low);
        sim.beta_high = s.value("beta_high", sim.beta_high);
      }
    }
    if (j.contains("split")) {
      c.test_fraction = j.at("split").value("test_fraction", c.test_fraction);
      c.standardise = j.at("split").value("standardise", c.standardise);
    }
    if (j.contains("train")) {
      const std::uint64_t keep_seed = c.train.seed;
      c.train = train_config_from_json(j.at("train"), c.train);
      c.train.seed = keep_seed;
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      c.eval.threshold = e.value("threshold", c.eval.threshold);
      c.eval.attributions = e.value("attributions", c.eval.attributions);
      c.eval.attribution.n_permutations = e.value("permutations", c.eval.attribution.n_permutations);
      c.eval.attribution.background_size = e.value("background_size", c.eval.attribution.background_size);
      c.eval.attribution.explain_size = e.value("explain_size", c.eval.attribution.explain_size);
      c.eval.spread_members = e.value("spread_members", c.eval.spread_members);
      c.eval.violin_rows = e.value("violin_rows", c.eval.violin_rows);
      c.eval.histogram_bins = e.value("histogram_bins", c.eval.histogram_bins);
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      c.sweep.lambda_grid = s.value("lambda_grid", c.sweep.lambda_grid);
      c.sweep.subsample_grid = s.value("subsample_grid", c.sweep.subsample_grid);
      c.sweep.subsample_lambda = s.value("subsample_lambda", c.sweep.subsample_lambda);
    }
  } catch (const io::Json::exception& e) {
    throw Error(ErrorKind::invalid_config, std::string("bad config value: ") + e.what());
  }
  return c;
}

/// Hash of everything that determines results; the output location is excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  io::Json j = config_to_json(c);
  j.erase("output_dir");
  return io::hash_json(j);
}

// ---------------------------------------------------------------------------
// Manifest

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;  // relative to the output directory
  std::vector<std::pair<std::string, double>> timings;
  std::vector<std::string> warnings;
  bool complete = false;
  std::string failed_stage;
  std::string error;
};

inline io::Json manifest_to_json(const RunManifest& m) {
  io::Json timings = io::Json::array();
  for (const auto& [stage, seconds] : m.timings) timings.push_back({{"stage", stage}, {"seconds", seconds}});
  return {{"format", "stabreg-manifest"},
          {"tool_version", kToolVersion},
          {"command", m.command},
          {"config_hash", m.config_hash},
          {"seed", m.seed},
          {"complete", m.complete},
          {"failed_stage", m.failed_stage.empty() ? io::Json(nullptr) : io::Json(m.failed_stage)},
          {"error", m.error.empty() ? io::Json(nullptr) : io::Json(m.error)},
          {"warnings", m.warnings},
          {"artifacts", m.artifacts},
          {"timings", timings}};
}

namespace detail {

/// Records artifacts and stage timings for one output directory.
class Recorder {
 public:
  Recorder(std::filesystem::path root, RunManifest& manifest) : root_(std::move(root)), manifest_(manifest) {}

  const std::filesystem::path& root() const noexcept { return root_; }

  void text(const std::filesystem::path& rel, std::string_view body) {
    io::write_text(root_ / rel, body);
    manifest_.artifacts.push_back(rel.generic_string());
  }
  void json(const std::filesystem::path& rel, const io::Json& doc) {
    io::write_json(root_ / rel, doc);
    manifest_.artifacts.push_back(rel.generic_string());
  }
  void dataset(const std::filesystem::path& rel, const Dataset& ds) {
    write_dataset(ds, root_ / rel);
    manifest_.artifacts.push_back(rel.generic_string());
    auto sidecar = rel;
    manifest_.artifacts.push_back(sidecar.replace_extension(".json").generic_string());
  }
  void listed(const std::filesystem::path& rel) { manifest_.artifacts.push_back(rel.generic_string()); }

  template <class F>
  void stage(const std::string& name, F&& body) {
    current_ = name;
    const auto t0 = std::chrono::steady_clock::now();
    body();
    manifest_.timings.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  const std::string& current_stage() const noexcept { return current_; }

 private:
  std::filesystem::path root_;
  RunManifest& manifest_;
  std::string current_;
};

/// Runs body(i) for i in [0, n) on up to `workers` threads; each index owns its output.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w)
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            body(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string replicate_dir(std::size_t k) {
  std::string digits = std::to_string(k);
  while (digits.size() < 3) digits.insert(digits.begin(), '0');
  return "replicate_" + digits;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shared pipeline pieces

/// Replicate k draws everything from child seeds of derive_seed(root, "replicate", k).
inline SeedFamily replicate_seeds(std::uint64_t root, std::size_t k) {
  return SeedFamily{derive_seed(root, "replicate", k)};
}

struct PreparedData {
  Dataset full;
  Split split;
  TrainConfig train;
  std::vector<std::string> warnings;
};

inline Dataset load_source(const DatasetSpec& spec, std::uint64_t simulation_seed, std::vector<std::string>& warnings) {
  if (spec.source == "simulate") {
    SimConfig sim = spec.simulation;
    sim.seed = simulation_seed;
    return simulate_dataset(sim);
  }
  std::optional<std::vector<std::string>> columns;
  if (!spec.feature_columns.empty()) columns = spec.feature_columns;
  CsvLoad load = load_csv(spec.csv_path, spec.label_column, columns);
  if (load.dropped_rows > 0)
    warnings.push_back("dropped " + std::to_string(load.dropped_rows) + " rows with missing values");
  return std::move(load.data);
}

inline PreparedData prepare_replicate(const ExperimentConfig& cfg, const SeedFamily& seeds) {
  PreparedData d;
  d.full = load_source(cfg.dataset, seeds.child("simulate"), d.warnings);
  d.split = split(d.full, cfg.test_fraction, seeds.child("split"), cfg.standardise);
  for (const auto& w : d.split.warnings) d.warnings.push_back(w);
  d.train = cfg.train;
  d.train.seed = seeds.child("train");
  return d;
}

/// Selects min(k, n) row positions in [0, n), ascending.
inline std::vector<std::size_t> sample_positions(std::size_t n, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  auto pos = rng.sample_without_replacement(n, std::min(n, k));
  std::sort(pos.begin(), pos.end());
  return pos;
}

inline Matrix rows_of(const Matrix& X, std::span<const std::size_t> positions) {
  Matrix out(static_cast<Eigen::Index>(positions.size()), X.cols());
  for (std::size_t i = 0; i < positions.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(positions[i]));
  return out;
}

struct ModelReports {
  EvalReport standard;
  EvalReport stable;
  EvalReport ensemble;
};

/// Evaluates the three variants on the test side against the pool panel.
inline ModelReports evaluate_variants(const Vector& standard, const Vector& stable, const Vector& ensemble,
                                      const Matrix& boot, const Vector& labels, double threshold, double eps) {
  return {evaluate_model(standard, standard, boot, labels, threshold, "standard", "test", eps),
          evaluate_model(stable, standard, boot, labels, threshold, "stable", "test", eps),
          evaluate_model(ensemble, standard, boot, labels, threshold, "ensemble", "test", eps)};
}

inline const char* kSummaryHeader = "replicate,model,mad,auc,sig_fraction,closer_fraction\n";

inline std::string summary_rows(std::size_t replicate, const ModelReports& r) {
  std::string out;
  for (const EvalReport* e : {&r.standard, &r.stable, &r.ensemble})
    out += std::to_string(replicate) + ',' + e->model_tag + ',' + io::format_double(e->mad) + ',' +
           io::format_double(e->auc) + ',' + io::format_double(e->sig_fraction) + ',' +
           io::format_double(e->closer_fraction) + '\n';
  return out;
}

/// Sample mean and standard deviation (n - 1; zero for a single value).
inline std::pair<double, double> mean_sd(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size() - 1))};
}

inline io::Json mean_sd_json(const std::vector<double>& v) {
  const auto [mean, sd] = mean_sd(v);
  return {{"mean", mean}, {"sd", sd}, {"values", v}};
}

// ---------------------------------------------------------------------------
// run

struct ReplicateResult {
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  ModelReports reports;
  std::optional<double> global_rho;
  std::optional<std::size_t> max_rank_range;
};

struct RunResult {
  RunManifest manifest;
  std::vector<ReplicateResult> replicates;
};

namespace detail {

inline std::string violin_csv(const Split& s, std::span<const std::size_t> positions, const Matrix& boot,
                              const Vector& standard, const Vector& stable, const Vector& ensemble) {
  std::string out = "row_id,model,member_id,prediction\n";
  for (std::size_t pos : positions) {
    const auto i = static_cast<Eigen::Index>(pos);
    const std::string id = std::to_string(s.test_rows[pos]);
    for (Eigen::Index m = 0; m < boot.cols(); ++m)
      out += id + ",member," + std::to_string(m) + ',' + io::format_double(boot(i, m)) + '\n';
    out += id + ",standard,," + io::format_double(standard[i]) + '\n';
    out += id + ",stable,," + io::format_double(stable[i]) + '\n';
    out += id + ",ensemble,," + io::format_double(ensemble[i]) + '\n';
  }
  return out;
}

inline std::string histogram_csv(const ModelReports& r, std::size_t bins) {
  std::string out = "model,bin_low,bin_high,count\n";
  for (const EvalReport* e : {&r.standard, &r.stable, &r.ensemble}) {
    const auto counts = pvalue_histogram(e->pvalues, bins);
    for (std::size_t b = 0; b < bins; ++b)
      out += e->model_tag + ',' + io::format_double(static_cast<double>(b) / static_cast<double>(bins)) + ',' +
             io::format_double(static_cast<double>(b + 1) / static_cast<double>(bins)) + ',' +
             std::to_string(counts[b]) + '\n';
  }
  return out;
}

inline io::Json report_json(const EvalReport& r, const Split& s) {
  io::Json j = eval_report_to_json(r);
  std::vector<std::size_t> ids(s.test_rows.begin(), s.test_rows.end());
  j["row_ids"] = ids;
  return j;
}

inline ModelDocument model_document(const ModelParams& p, const Split& s, const std::string& role,
                                    const std::string& hash, std::size_t replicate) {
  return {p, s.train.standardisation, {{"role", role}, {"config_hash", hash}, {"replicate", replicate}}};
}

inline ReplicateResult run_replicate(const ExperimentConfig& cfg, std::size_t k, Recorder& rec, RunManifest& manifest) {
  const SeedFamily seeds = replicate_seeds(cfg.seed, k);
  const std::filesystem::path dir = replicate_dir(k);
  const std::string hash = manifest.config_hash;
  ReplicateResult result;
  result.replicate = k;
  result.seed = seeds.root;

  PreparedData data;
  rec.stage(dir.string() + "/data", [&] {
    data = prepare_replicate(cfg, seeds);
    for (const auto& w : data.warnings) manifest.warnings.push_back(dir.string() + ": " + w);
    rec.dataset(dir / "data" / "dataset.csv", data.full);
    rec.dataset(dir / "data" / "train.csv", data.split.train);
    rec.dataset(dir / "data" / "test.csv", data.split.test);
    rec.json(dir / "data" / "split.json", {{"train_rows", data.split.train_rows}, {"test_rows", data.split.test_rows}});
  });
  const Split& s = data.split;
  const TrainConfig& tc = data.train;
  io::Json train_json = train_config_to_json(tc);

  BootstrapPool pool;
  rec.stage(dir.string() + "/pool", [&] {
    pool = build_pool(s.train, tc);
    save_pool(pool, rec.root() / dir / "pool", train_json);
    for (std::size_t m = 0; m < pool.size(); ++m) rec.listed(dir / "pool" / member_filename(m));
    for (const char* f : {"cache.csv", "bootstrap_indices.csv", "manifest.json"}) rec.listed(dir / "pool" / f);
  });

  ModelParams standard, stable;
  rec.stage(dir.string() + "/standard", [&] {
    FitResult fit = fit_standard(s.train, tc);
    for (const auto& w : fit.warnings) manifest.warnings.push_back(dir.string() + "/standard: " + w);
    standard = std::move(fit.params);
    rec.json(dir / "models" / "standard.json", model_to_json(model_document(standard, s, "standard", hash, k)));
  });
  rec.stage(dir.string() + "/stable", [&] {
    FitResult fit = fit_stable(s.train, pool, tc);
    for (const auto& w : fit.warnings) manifest.warnings.push_back(dir.string() + "/stable: " + w);
    stable = std::move(fit.params);
    rec.json(dir / "models" / "stable.json", model_to_json(model_document(stable, s, "stable", hash, k)));
  });
  EnsembleModel ensemble;
  rec.stage(dir.string() + "/ensemble", [&] {
    ensemble = train_ensemble(pool);
    rec.json(dir / "models" / "ensemble.json",
             {{"format", "stabreg-ensemble"}, {"version", 1}, {"pool", "../pool"}, {"members", pool.size()},
              {"aggregation", "mean-probability"}});
  });

  Vector p_standard, p_stable, p_ensemble;
  Matrix boot;
  rec.stage(dir.string() + "/evaluate", [&] {
    boot = member_predictions(pool.models, s.test.features);
    p_standard = forward_batch(standard, s.test.features);
    p_stable = forward_batch(stable, s.test.features);
    p_ensemble = ensemble.predict(s.test.features);
    result.reports =
        evaluate_variants(p_standard, p_stable, p_ensemble, boot, s.test.labels, cfg.eval.threshold, tc.clamp_eps);
    rec.json(dir / "reports" / "standard.json", report_json(result.reports.standard, s));
    rec.json(dir / "reports" / "stable.json", report_json(result.reports.stable, s));
    rec.json(dir / "reports" / "ensemble.json", report_json(result.reports.ensemble, s));
  });

  rec.stage(dir.string() + "/plots", [&] {
    rec.text(dir / "plots" / "summary.csv", std::string(kSummaryHeader) + summary_rows(k, result.reports));
    const auto violin = sample_positions(s.test.rows(), cfg.eval.violin_rows, seeds.child("violin-rows"));
    rec.text(dir / "plots" / "violin.csv", violin_csv(s, violin, boot, p_standard, p_stable, p_ensemble));
    rec.text(dir / "plots" / "pvalue_histogram.csv", histogram_csv(result.reports, cfg.eval.histogram_bins));
  });

  if (!cfg.eval.attributions) return result;

  const AttributionConfig& ac = cfg.eval.attribution;
  const auto bg_pos = sample_positions(s.train.rows(), ac.background_size, seeds.child("background"));
  const Matrix background = rows_of(s.train.features, bg_pos);
  const auto ex_pos = sample_positions(s.test.rows(), ac.explain_size, seeds.child("explain-rows"));
  const Matrix X = rows_of(s.test.features, ex_pos);
  std::vector<std::size_t> row_ids;
  for (std::size_t pos : ex_pos) row_ids.push_back(s.test_rows[pos]);
  const SeedFamily shap_seeds{seeds.child("attribution")};
  const auto& names = s.train.feature_names;

  rec.stage(dir.string() + "/attribution", [&] {
    const AttributionMatrix a_standard =
        explain(ModelPredictor{&standard}, X, row_ids, background, names, ac.n_permutations, shap_seeds, 0);
    const AttributionMatrix a_stable =
        explain(ModelPredictor{&stable}, X, row_ids, background, names, ac.n_permutations, shap_seeds, 0);
    const AgreementReport agree = agreement(a_stable, a_standard);
    result.global_rho = agree.global_rho;
    io::Json j = agreement_to_json(agree, names);
    j["models"] = {"stable", "standard"};
    j["row_ids"] = row_ids;
    j["base_value"] = {{"standard", a_standard.base_value}, {"stable", a_stable.base_value}};
    rec.json(dir / "reports" / "agreement.json", j);
    rec.text(dir / "plots" / "attributions_standard.csv", attribution_long_csv(a_standard));
    rec.text(dir / "plots" / "attributions_stable.csv", attribution_long_csv(a_stable));
  });

  if (cfg.eval.spread_members >= 2) {
    rec.stage(dir.string() + "/spread", [&] {
      const auto members = choose_members(pool.size(), cfg.eval.spread_members, seeds.child("spread-members"));
      const EnsembleAttributionSpread spread =
          ensemble_spread(pool.models, members, X, row_ids, background, names, ac.n_permutations, shap_seeds);
      result.max_rank_range = *std::max_element(spread.rank_range.begin(), spread.rank_range.end());
      rec.json(dir / "reports" / "spread.json", spread_to_json(spread));
      rec.text(dir / "plots" / "spread_stddev.csv", spread_stddev_csv(spread));
      rec.text(dir / "plots" / "spread_members.csv", member_attributions_csv(spread));
      rec.text(dir / "plots" / "spread_rankings.csv", rankings_csv(spread));
    });
  }
  return result;
}

inline io::Json run_summary_json(const std::vector<ReplicateResult>& reps) {
  io::Json models = io::Json::object();
  for (const char* tag : {"standard", "stable", "ensemble"}) {
    std::vector<double> mad, auc_v, sig, closer;
    for (const auto& r : reps) {
      const EvalReport& e = std::string(tag) == "standard" ? r.reports.standard
                            : std::string(tag) == "stable" ? r.reports.stable
                                                           : r.reports.ensemble;
      mad.push_back(e.mad);
      auc_v.push_back(e.auc);
      sig.push_back(e.sig_fraction);
      closer.push_back(e.closer_fraction);
    }
    models[tag] = {{"mad", mean_sd_json(mad)},
                   {"auc", mean_sd_json(auc_v)},
                   {"sig_fraction", mean_sd_json(sig)},
                   {"closer_fraction", mean_sd_json(closer)}};
  }
  io::Json rho = io::Json::array();
  io::Json ranks = io::Json::array();
  for (const auto& r : reps) {
    rho.push_back(optional_to_json(r.global_rho));
    ranks.push_back(r.max_rank_range ? io::Json(*r.max_rank_range) : io::Json(nullptr));
  }
  return {{"replicates", reps.size()}, {"models", models}, {"global_rho", rho}, {"max_rank_range", ranks}};
}

}  // namespace detail

/// split -> pool -> standard/stable/ensemble -> evaluation -> attributions, per
/// replicate. Stage failures are caught: the manifest records the stage and
/// `complete` stays false.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  RunResult out;
  RunManifest& m = out.manifest;
  m.command = "run";
  m.seed = cfg.seed;
  const std::filesystem::path root = cfg.output_dir;
  detail::Recorder rec(root, m);
  try {
    rec.stage("config", [&] {
      cfg.validate();
      m.config_hash = config_hash(cfg);
      rec.json("config.json", config_to_json(cfg));
    });
    std::string summary = kSummaryHeader;
    for (std::size_t k = 0; k < cfg.replicates; ++k) {
      out.replicates.push_back(detail::run_replicate(cfg, k, rec, m));
      summary += summary_rows(k, out.replicates.back().reports);
    }
    rec.stage("summary", [&] {
      rec.text("summary.csv", summary);
      rec.json("summary.json", detail::run_summary_json(out.replicates));
    });
    m.complete = true;
  } catch (const std::exception& e) {
    m.failed_stage = rec.current_stage();
    m.error = e.what();
  }
  io::write_json(root / "manifest.json", manifest_to_json(m));
  return out;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
  std::size_t replicate = 0;
  std::string series;  // "reference", "lambda" or "subsample"
  std::string model;
  double lambda = 0.0;
  std::size_t subsample_size = 0;
  double mad = 0.0;
  double auc = 0.0;
  double sig_fraction = 0.0;
};

struct SweepResult {
  RunManifest manifest;
  std::vector<SweepRow> rows;
  std::vector<std::optional<double>> lambda_mad_rho;  // per replicate
};

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "replicate,series,model,lambda,subsample_size,mad,auc,sig_fraction\n";
  for (const auto& r : rows)
    out += std::to_string(r.replicate) + ',' + r.series + ',' + r.model + ',' + io::format_double(r.lambda) + ',' +
           std::to_string(r.subsample_size) + ',' + io::format_double(r.mad) + ',' + io::format_double(r.auc) + ',' +
           io::format_double(r.sig_fraction) + '\n';
  return out;
}

/// Stable models over the lambda grid (at the configured subsample size) and
/// over the subsample grid (at sweep.subsample_lambda), with standard and
/// ensemble reference rows. Grid points train concurrently.
inline SweepResult run_sweep(const ExperimentConfig& cfg) {
  SweepResult out;
  RunManifest& m = out.manifest;
  m.command = "sweep";
  m.seed = cfg.seed;
  const std::filesystem::path root = cfg.output_dir;
  detail::Recorder rec(root, m);
  try {
    rec.stage("config", [&] {
      cfg.validate_sweep();
      m.config_hash = config_hash(cfg);
      rec.json("config.json", config_to_json(cfg));
    });
    io::Json per_replicate = io::Json::array();
    for (std::size_t k = 0; k < cfg.replicates; ++k) {
      const SeedFamily seeds = replicate_seeds(cfg.seed, k);
      const std::string tag = detail::replicate_dir(k);
      PreparedData data;
      BootstrapPool pool;
      rec.stage(tag + "/data", [&] {
        data = prepare_replicate(cfg, seeds);
        for (const auto& w : data.warnings) m.warnings.push_back(tag + ": " + w);
      });
      const Split& s = data.split;
      rec.stage(tag + "/pool", [&] { pool = build_pool(s.train, data.train); });

      Matrix boot;
      Vector p_standard;
      rec.stage(tag + "/reference", [&] {
        boot = member_predictions(pool.models, s.test.features);
        p_standard = forward_batch(train_standard(s.train, data.train), s.test.features);
        const Vector p_ensemble = train_ensemble(pool).predict(s.test.features);
        for (const auto& [name, p] : {std::pair<const char*, const Vector*>{"standard", &p_standard},
                                       std::pair<const char*, const Vector*>{"ensemble", &p_ensemble}}) {
          const EvalReport r =
              evaluate_model(*p, p_standard, boot, s.test.labels, cfg.eval.threshold, name, "test", data.train.clamp_eps);
          out.rows.push_back({k, "reference", name, 0.0, std::size_t{0}, r.mad, r.auc, r.sig_fraction});
        }
      });

      struct Point {
        std::string series;
        double lambda;
        std::size_t subsample;
      };
      std::vector<Point> points;
      for (double l : cfg.sweep.lambda_grid) points.push_back({"lambda", l, data.train.subsample_size});
      for (std::size_t ms : cfg.sweep.subsample_grid) points.push_back({"subsample", cfg.sweep.subsample_lambda, ms});
      std::vector<SweepRow> point_rows(points.size());
      rec.stage(tag + "/grid", [&] {
        detail::parallel_for(points.size(), data.train.resolved_workers(), [&](std::size_t i) {
          TrainConfig tc = data.train;
          tc.lambda = points[i].lambda;
          tc.subsample_size = points[i].subsample;
          const Vector p = forward_batch(train_stable(s.train, pool, tc), s.test.features);
          const EvalReport r = evaluate_model(p, p_standard, boot, s.test.labels, cfg.eval.threshold, "stable", "test", tc.clamp_eps);
          point_rows[i] = {k, points[i].series, "stable", tc.lambda, tc.subsample_size, r.mad, r.auc, r.sig_fraction};
        });
      });
      std::vector<double> lambdas, mads;
      for (const auto& r : point_rows) {
        out.rows.push_back(r);
        if (r.series == "lambda") {
          lambdas.push_back(r.lambda);
          mads.push_back(r.mad);
        }
      }
      out.lambda_mad_rho.push_back(lambdas.size() >= 2 ? spearman(lambdas, mads) : std::nullopt);
      per_replicate.push_back({{"replicate", k}, {"lambda_mad_spearman", optional_to_json(out.lambda_mad_rho.back())}});
    }
    rec.stage("summary", [&] {
      rec.text("sweep.csv", sweep_csv(out.rows));
      // Mean MAD per grid point across replicates.
      io::Json points = io::Json::array();
      for (std::size_t i = 0; i < out.rows.size() / cfg.replicates; ++i) {
        std::vector<double> mad, auc_v;
        for (std::size_t k = 0; k < cfg.replicates; ++k) {
          const auto& r = out.rows[k * (out.rows.size() / cfg.replicates) + i];
          mad.push_back(r.mad);
          auc_v.push_back(r.auc);
        }
        const auto& r0 = out.rows[i];
        points.push_back({{"series", r0.series},
                          {"model", r0.model},
                          {"lambda", r0.lambda},
                          {"subsample_size", r0.subsample_size},
                          {"mad", mean_sd_json(mad)},
                          {"auc", mean_sd_json(auc_v)}});
      }
      rec.json("sweep.json", {{"replicates", per_replicate}, {"points", points}});
    });
    m.complete = true;
  } catch (const std::exception& e) {
    m.failed_stage = rec.current_stage();
    m.error = e.what();
  }
  io::write_json(root / "manifest.json", manifest_to_json(m));
  return out;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyResult {
  bool ok = false;
  double max_abs_diff = 0.0;
  std::size_t values_checked = 0;
  std::vector<std::string> problems;
};

/// Re-derives every summary.csv value from the saved test data, models and
/// pool members, and checks the stored config against the manifest hash.
inline VerifyResult verify_run(const std::filesystem::path& root, double tolerance = 1e-9) {
  VerifyResult v;
  const io::Json manifest = io::read_json(root / "manifest.json");
  if (!manifest.value("complete", false)) v.problems.push_back("manifest marks the run incomplete");
  for (const auto& rel : manifest.at("artifacts"))
    if (!std::filesystem::exists(root / rel.get<std::string>()))
      v.problems.push_back("missing artifact " + rel.get<std::string>());
  const ExperimentConfig cfg = config_from_json(io::read_json(root / "config.json"));
  if (config_hash(cfg) != manifest.at("config_hash").get<std::string>())
    v.problems.push_back("config.json does not match the manifest hash");

  const std::string summary = io::read_text(root / "summary.csv");
  std::size_t pos = summary.find('\n') + 1;
  std::vector<std::vector<std::string>> lines;
  while (pos < summary.size()) {
    const std::size_t end = summary.find('\n', pos);
    lines.push_back(io::split_csv_line(summary.substr(pos, end - pos)));
    pos = end == std::string::npos ? summary.size() : end + 1;
  }
  if (lines.size() != 3 * cfg.replicates) v.problems.push_back("summary.csv has an unexpected row count");

  for (std::size_t k = 0; k < cfg.replicates; ++k) {
    const std::filesystem::path dir = root / detail::replicate_dir(k);
    const Dataset test = read_dataset(dir / "data" / "test.csv");
    const BootstrapPool pool = load_pool(dir / "pool");
    const ModelParams standard = model_from_json(io::read_json(dir / "models" / "standard.json")).params;
    const ModelParams stable = model_from_json(io::read_json(dir / "models" / "stable.json")).params;
    const Matrix boot = member_predictions(pool.models, test.features);
    const ModelReports r = evaluate_variants(forward_batch(standard, test.features), forward_batch(stable, test.features),
                                             train_ensemble(pool).predict(test.features), boot, test.labels,
                                             cfg.eval.threshold, cfg.train.clamp_eps);
    std::size_t row = 0;
    for (const EvalReport* e : {&r.standard, &r.stable, &r.ensemble}) {
      const std::size_t idx = 3 * k + row++;
      if (idx >= lines.size()) break;
      const auto& f = lines[idx];
      if (f.size() != 6 || f[0] != std::to_string(k) || f[1] != e->model_tag) {
        v.problems.push_back("summary.csv row " + std::to_string(idx + 1) + " is misaligned");
        continue;
      }
      const double values[] = {e->mad, e->auc, e->sig_fraction, e->closer_fraction};
      for (std::size_t c = 0; c < 4; ++c) {
        const auto stored = io::parse_double(f[c + 2]);
        if (!stored) {
          v.problems.push_back("unparsable value in summary.csv row " + std::to_string(idx + 1));
          continue;
        }
        const double diff = std::abs(*stored - values[c]);
        v.max_abs_diff = std::max(v.max_abs_diff, diff);
        ++v.values_checked;
        if (!(diff <= tolerance))
          v.problems.push_back(e->model_tag + " replicate " + std::to_string(k) + ": stored " + f[c + 2] +
                               " vs recomputed " + io::format_double(values[c]));
      }
    }
  }
  v.ok = v.problems.empty();
  return v;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainOptions {
  std::filesystem::path model_path;
  std::filesystem::path dataset_path;
  std::string label_column = "y";
  std::optional<std::filesystem::path> background_path;  // default: sample of the dataset
  AttributionConfig attribution;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "stabreg_explain";
};

/// Attributions for a saved model on a CSV. Raw CSVs are standardised with the
/// model's stored transform; datasets with a sidecar are used as stored.
inline RunManifest run_explain(const ExplainOptions& opt) {
  RunManifest m;
  m.command = "explain";
  m.seed = opt.seed;
  detail::Recorder rec(opt.output_dir, m);
  try {
    ModelDocument doc;
    Dataset data, background_ds;
    rec.stage("load", [&] {
      doc = model_from_json(io::read_json(opt.model_path));
      auto load = [&](const std::filesystem::path& p) {
        auto sidecar = p;
        sidecar.replace_extension(".json");
        if (std::filesystem::exists(sidecar) && std::filesystem::exists(p)) {
          const io::Json sc = io::read_json(sidecar);
          if (sc.value("format", "") == "stabreg-dataset") return read_dataset(p);
        }
        Dataset ds = load_csv(p, opt.label_column).data;
        if (doc.standardisation) {
          doc.standardisation->apply(ds.features);
          ds.standardisation = doc.standardisation;
        }
        return ds;
      };
      data = load(opt.dataset_path);
      background_ds = opt.background_path ? load(*opt.background_path) : data;
      if (data.cols() != doc.params.arch.input_dim)
        throw Error(ErrorKind::shape_mismatch, "dataset width " + std::to_string(data.cols()) +
                                                   " differs from model input " +
                                                   std::to_string(doc.params.arch.input_dim));
      m.config_hash = io::hash_json({{"model", io::read_text(opt.model_path)},
                                     {"permutations", opt.attribution.n_permutations},
                                     {"background_size", opt.attribution.background_size},
                                     {"explain_size", opt.attribution.explain_size},
                                     {"seed", opt.seed}});
    });
    rec.stage("attribution", [&] {
      const SeedFamily seeds{opt.seed};
      const auto bg_pos = sample_positions(background_ds.rows(), opt.attribution.background_size, seeds.child("background"));
      const auto ex_pos = sample_positions(data.rows(), opt.attribution.explain_size, seeds.child("explain-rows"));
      const Matrix X = rows_of(data.features, ex_pos);
      const AttributionMatrix a = explain(ModelPredictor{&doc.params}, X, ex_pos, rows_of(background_ds.features, bg_pos),
                                          data.feature_names, opt.attribution.n_permutations, SeedFamily{seeds.child("attribution")});
      rec.text("attributions.csv", attribution_long_csv(a));
      io::Json features = io::Json::array();
      const Vector importance = a.values.cwiseAbs().colwise().mean().transpose();
      const auto ranks = importance_ranking(std::span<const double>(importance.data(), static_cast<std::size_t>(importance.size())));
      for (std::size_t j = 0; j < a.cols(); ++j)
        features.push_back({{"feature", a.feature_names[j]},
                            {"mean_abs_value", importance[static_cast<Eigen::Index>(j)]},
                            {"rank", ranks[j]}});
      rec.json("attribution_summary.json",
               {{"model", opt.model_path.generic_string()}, {"explained_rows", a.rows()},
                {"base_value", a.base_value}, {"features", features}});
    });
    m.complete = true;
  } catch (const std::exception& e) {
    m.failed_stage = rec.current_stage();
    m.error = e.what();
  }
  io::write_json(opt.output_dir / "manifest.json", manifest_to_json(m));
  return m;
}

// ---------------------------------------------------------------------------
// simulate

inline RunManifest run_simulate(const ExperimentConfig& cfg) {
  RunManifest m;
  m.command = "simulate";
  m.seed = cfg.seed;
  detail::Recorder rec(cfg.output_dir, m);
  try {
    rec.stage("simulate", [&] {
      cfg.dataset.simulation.validate();
      m.config_hash = config_hash(cfg);
      rec.json("config.json", config_to_json(cfg));
      SimConfig sim = cfg.dataset.simulation;
      sim.seed = replicate_seeds(cfg.seed, 0).child("simulate");
      rec.dataset("dataset.csv", simulate_dataset(sim));
    });
    m.complete = true;
  } catch (const std::exception& e) {
    m.failed_stage = rec.current_stage();
    m.error = e.what();
  }
  io::write_json(std::filesystem::path(cfg.output_dir) / "manifest.json", manifest_to_json(m));
  return m;
}

}  // namespace stabreg
