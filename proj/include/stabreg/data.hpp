#pragma once

// Tabular binary-outcome datasets: simulation, CSV ingestion, seeded splits,
// z-scoring and bootstrap resampling.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stabreg/error.hpp"
#include "stabreg/io.hpp"
#include "stabreg/rng.hpp"

namespace stabreg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Per-column affine transform x -> (x - mean) / scale.
struct Standardisation {
  std::vector<double> mean;
  std::vector<double> scale;
  // Columns whose training variance was zero; their scale is 1.
  std::vector<bool> zero_variance;

  std::size_t size() const noexcept { return mean.size(); }

  void apply(Matrix& features) const {
    if (static_cast<std::size_t>(features.cols()) != size())
      throw Error(ErrorKind::shape_mismatch, "standardisation width differs from feature width");
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      const auto col = static_cast<std::size_t>(j);
      features.col(j).array() = (features.col(j).array() - mean[col]) / scale[col];
    }
  }
};

inline Standardisation fit_standardisation(const Matrix& features) {
  Standardisation s;
  const auto n = static_cast<double>(features.rows());
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < features.rows(); ++i) sum += features(i, j);
    const double mean = sum / n;
    double ss = 0.0;
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      const double d = features(i, j) - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / n);
    const bool flat = !(sd > 0.0);
    s.mean.push_back(mean);
    s.scale.push_back(flat ? 1.0 : sd);
    s.zero_variance.push_back(flat);
  }
  return s;
}

struct Provenance {
  std::uint64_t seed = 0;
  std::string source;
};

struct Dataset {
  Matrix features;
  Vector labels;
  std::vector<std::string> feature_names;
  std::optional<Standardisation> standardisation;
  Provenance provenance;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(features.rows()); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(features.cols()); }

  std::size_t positives() const {
    std::size_t n = 0;
    for (Eigen::Index i = 0; i < labels.size(); ++i) n += labels[i] == 1.0 ? 1 : 0;
    return n;
  }

  bool has_both_classes() const {
    const std::size_t pos = positives();
    return pos > 0 && pos < rows();
  }

  void validate() const {
    if (features.rows() < 1 || features.cols() < 1)
      throw Error(ErrorKind::empty_dataset, "dataset needs at least one row and one column");
    if (labels.size() != features.rows())
      throw Error(ErrorKind::shape_mismatch, "label count differs from row count");
    for (Eigen::Index i = 0; i < labels.size(); ++i)
      if (labels[i] != 0.0 && labels[i] != 1.0)
        throw Error(ErrorKind::non_binary_label, "label at row " + std::to_string(i) + " is not 0/1");
    if (feature_names.size() != cols())
      throw Error(ErrorKind::shape_mismatch, "feature name count differs from column count");
    std::set<std::string> unique(feature_names.begin(), feature_names.end());
    if (unique.size() != feature_names.size())
      throw Error(ErrorKind::invalid_config, "feature names must be unique");
    if (!features.allFinite()) throw Error(ErrorKind::non_finite, "feature matrix has non-finite entries");
  }
};

inline Dataset subset_rows(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.features.cols());
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto src = static_cast<Eigen::Index>(rows[k]);
    out.features.row(static_cast<Eigen::Index>(k)) = ds.features.row(src);
    out.labels[static_cast<Eigen::Index>(k)] = ds.labels[src];
  }
  out.feature_names = ds.feature_names;
  out.standardisation = ds.standardisation;
  out.provenance = ds.provenance;
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

struct SimConfig {
  std::size_t n = 4000;
  std::size_t p_binary = 2;
  std::size_t p_informative = 10;
  std::size_t p_noise = 3;
  double beta_low = 3.0;
  double beta_high = 6.0;
  std::uint64_t seed = 0;

  std::size_t total_features() const noexcept { return p_binary + p_informative + p_noise; }

  void validate() const {
    if (n < 2) throw Error(ErrorKind::invalid_config, "simulation needs n >= 2");
    if (total_features() < 1) throw Error(ErrorKind::invalid_config, "simulation needs at least one feature");
    if (!(beta_low <= beta_high)) throw Error(ErrorKind::invalid_config, "beta_low must not exceed beta_high");
    if (!std::isfinite(beta_low) || !std::isfinite(beta_high))
      throw Error(ErrorKind::invalid_config, "beta bounds must be finite");
  }
};

struct Simulation {
  Dataset data;
  Vector beta;               // one coefficient per informative column
  Vector event_probability;  // true P(Y=1 | x) per row
};

/// Draw order from one stream seeded with cfg.seed: beta first, then per row
/// [binary | informative | noise] features followed by the label's uniform.
inline Simulation simulate(const SimConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Simulation sim;
  sim.beta.resize(static_cast<Eigen::Index>(cfg.p_informative));
  for (Eigen::Index k = 0; k < sim.beta.size(); ++k) sim.beta[k] = rng.uniform(cfg.beta_low, cfg.beta_high);

  const auto n = static_cast<Eigen::Index>(cfg.n);
  const auto p = static_cast<Eigen::Index>(cfg.total_features());
  Dataset& ds = sim.data;
  ds.features.resize(n, p);
  ds.labels.resize(n);
  sim.event_probability.resize(n);
  const auto nb = static_cast<Eigen::Index>(cfg.p_binary);
  const auto ni = static_cast<Eigen::Index>(cfg.p_informative);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index j = 0;
    for (Eigen::Index k = 0; k < nb; ++k) ds.features(i, j++) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    double logit = 0.0;
    for (Eigen::Index k = 0; k < ni; ++k) {
      const double x = rng.normal();
      ds.features(i, j++) = x;
      logit += x * sim.beta[k];
    }
    while (j < p) ds.features(i, j++) = rng.uniform(-1.0, 1.0);
    const double prob = 1.0 / (1.0 + std::exp(-logit));
    sim.event_probability[i] = prob;
    ds.labels[i] = rng.uniform() < prob ? 1.0 : 0.0;
  }
  for (std::size_t k = 0; k < cfg.p_binary; ++k) ds.feature_names.push_back("bin_" + std::to_string(k + 1));
  for (std::size_t k = 0; k < cfg.p_informative; ++k) ds.feature_names.push_back("imp_" + std::to_string(k + 1));
  for (std::size_t k = 0; k < cfg.p_noise; ++k) ds.feature_names.push_back("noise_" + std::to_string(k + 1));
  ds.provenance = {cfg.seed, "simulation"};
  return sim;
}

inline Dataset simulate_dataset(const SimConfig& cfg) { return simulate(cfg).data; }

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvLoad {
  Dataset data;
  std::size_t dropped_rows = 0;
};

inline bool is_missing_field(std::string_view field) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) field.remove_suffix(1);
  return field.empty() || field == "NA";
}

/// Complete-case load: rows missing any used value are dropped and counted.
inline CsvLoad load_csv(const std::filesystem::path& path, const std::string& label_column,
                        const std::optional<std::vector<std::string>>& feature_columns = std::nullopt) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::missing_file, path.string() + " does not exist");
  std::string text = io::read_text(path);
  if (text.size() >= 3 && static_cast<unsigned char>(text[0]) == 0xEF &&
      static_cast<unsigned char>(text[1]) == 0xBB && static_cast<unsigned char>(text[2]) == 0xBF)
    text.erase(0, 3);

  std::vector<std::string> lines;
  {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      std::string line = text.substr(start, end - start);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(std::move(line));
      start = end + 1;
    }
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw Error(ErrorKind::parse_error, path.string() + " has no header row");

  const std::vector<std::string> header = io::split_csv_line(lines.front());
  std::unordered_map<std::string, std::size_t> column_of;
  for (std::size_t c = 0; c < header.size(); ++c) column_of.emplace(header[c], c);

  auto find_column = [&](const std::string& name) {
    auto it = column_of.find(name);
    if (it == column_of.end()) throw Error(ErrorKind::missing_column, "column '" + name + "' not in " + path.string());
    return it->second;
  };
  const std::size_t label_idx = find_column(label_column);

  std::vector<std::string> names;
  if (feature_columns) {
    names = *feature_columns;
  } else {
    for (const auto& h : header)
      if (h != label_column) names.push_back(h);
  }
  if (names.empty()) throw Error(ErrorKind::missing_column, "no feature columns selected");
  std::vector<std::size_t> feature_idx;
  for (const auto& name : names) feature_idx.push_back(find_column(name));

  std::vector<double> values;
  std::vector<double> labels;
  std::size_t dropped = 0;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto fields = io::split_csv_line(lines[r]);
    auto field = [&](std::size_t c) -> std::string_view {
      return c < fields.size() ? std::string_view(fields[c]) : std::string_view();
    };
    bool missing = is_missing_field(field(label_idx));
    for (std::size_t c : feature_idx) missing = missing || is_missing_field(field(c));
    if (missing) {
      ++dropped;
      continue;
    }
    const auto label = io::parse_double(field(label_idx));
    if (!label) throw Error(ErrorKind::parse_error, "row " + std::to_string(r) + ": label is not numeric");
    if (*label != 0.0 && *label != 1.0)
      throw Error(ErrorKind::non_binary_label,
                  "row " + std::to_string(r) + ": label '" + std::string(field(label_idx)) + "' is not 0/1");
    for (std::size_t c : feature_idx) {
      const auto v = io::parse_double(field(c));
      if (!v || !std::isfinite(*v))
        throw Error(ErrorKind::parse_error, "row " + std::to_string(r) + ", column '" + header[c] + "' is not numeric");
      values.push_back(*v);
    }
    labels.push_back(*label);
  }
  if (labels.empty()) throw Error(ErrorKind::all_rows_dropped, "no complete rows in " + path.string());

  CsvLoad out;
  out.dropped_rows = dropped;
  const auto n = static_cast<Eigen::Index>(labels.size());
  const auto p = static_cast<Eigen::Index>(names.size());
  out.data.features = Eigen::Map<const Matrix>(values.data(), n, p);
  out.data.labels = Eigen::Map<const Vector>(labels.data(), n);
  out.data.feature_names = std::move(names);
  out.data.provenance = {0, path.string()};
  out.data.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Export

inline std::string to_csv(const Dataset& ds, const std::string& label_column = "y") {
  std::string out;
  for (const auto& name : ds.feature_names) {
    out += name;
    out += ',';
  }
  out += label_column;
  out += '\n';
  for (Eigen::Index i = 0; i < ds.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
      out += io::format_double(ds.features(i, j));
      out += ',';
    }
    out += ds.labels[i] == 1.0 ? "1" : "0";
    out += '\n';
  }
  return out;
}

inline io::Json standardisation_to_json(const Standardisation& s) {
  io::Json j;
  j["mean"] = s.mean;
  j["scale"] = s.scale;
  j["zero_variance"] = s.zero_variance;
  return j;
}

inline Standardisation standardisation_from_json(const io::Json& j) {
  Standardisation s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.scale = j.at("scale").get<std::vector<double>>();
  s.zero_variance = j.at("zero_variance").get<std::vector<bool>>();
  return s;
}

inline io::Json sidecar_json(const Dataset& ds) {
  io::Json j;
  j["format"] = "stabreg-dataset";
  j["version"] = 1;
  j["rows"] = ds.rows();
  j["feature_names"] = ds.feature_names;
  j["standardisation"] = ds.standardisation ? standardisation_to_json(*ds.standardisation) : io::Json(nullptr);
  j["provenance"] = {{"seed", ds.provenance.seed}, {"source", ds.provenance.source}};
  return j;
}

/// Writes `<stem>.csv` and its `<stem>.json` sidecar.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& csv_path) {
  io::write_text(csv_path, to_csv(ds));
  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  io::write_json(sidecar, sidecar_json(ds));
}

inline Dataset read_dataset(const std::filesystem::path& csv_path) {
  CsvLoad load = load_csv(csv_path, "y");
  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  if (std::filesystem::exists(sidecar)) {
    const io::Json j = io::read_json(sidecar);
    if (!j.at("standardisation").is_null()) load.data.standardisation = standardisation_from_json(j.at("standardisation"));
    load.data.provenance.seed = j.at("provenance").at("seed").get<std::uint64_t>();
    load.data.provenance.source = j.at("provenance").at("source").get<std::string>();
  }
  return std::move(load.data);
}

// ---------------------------------------------------------------------------
// Splitting and resampling

struct Split {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> test_rows;
  std::vector<std::string> warnings;
};

/// Seeded shuffle split. The first floor(N * test_fraction) shuffled rows form
/// the test side. Standardisation is fit on the train side and applied to both.
inline Split split(const Dataset& ds, double test_fraction, std::uint64_t seed, bool standardise = true) {
  ds.validate();
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw Error(ErrorKind::degenerate_split, "test fraction must lie in (0, 1)");
  const std::size_t n = ds.rows();
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction));
  if (n_test < 1 || n - n_test < 2)
    throw Error(ErrorKind::degenerate_split, "split of " + std::to_string(n) + " rows leaves an empty or single-row side");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  Split out;
  out.test_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.train_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  out.train = subset_rows(ds, out.train_rows);
  out.test = subset_rows(ds, out.test_rows);
  if (!out.train.has_both_classes()) out.warnings.push_back("train side contains a single class");
  if (standardise) {
    Standardisation s = fit_standardisation(out.train.features);
    s.apply(out.train.features);
    s.apply(out.test.features);
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s.zero_variance[j]) out.warnings.push_back("column '" + ds.feature_names[j] + "' has zero variance");
    out.train.standardisation = s;
    out.test.standardisation = s;
  }
  return out;
}

struct BootstrapIndex {
  std::vector<std::size_t> indices;
  std::uint64_t seed = 0;
};

inline BootstrapIndex draw_bootstrap(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorKind::empty_dataset, "cannot bootstrap an empty dataset");
  BootstrapIndex b;
  b.seed = seed;
  b.indices.resize(n);
  Rng rng(seed);
  for (auto& idx : b.indices) idx = static_cast<std::size_t>(rng.uniform_index(n));
  return b;
}

inline BootstrapIndex draw_bootstrap(const Dataset& ds, std::uint64_t seed) { return draw_bootstrap(ds.rows(), seed); }

}  // namespace stabreg
