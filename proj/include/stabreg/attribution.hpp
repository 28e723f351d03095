#pragma once

// Interventional Shapley attributions for batch prediction functions, and
// agreement / variability statistics built on them.
//
// The value of a coalition S for an explained row x is the mean, over the
// background rows, of f evaluated on the background row with the columns in S
// overwritten by x. base_value is therefore the mean prediction over the
// background and base_value + sum_j phi_j = f(x).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stabreg/data.hpp"
#include "stabreg/error.hpp"
#include "stabreg/eval.hpp"
#include "stabreg/io.hpp"
#include "stabreg/model.hpp"
#include "stabreg/rng.hpp"

namespace stabreg {

/// Maps an (n x P) matrix to n predictions.
template <class F>
concept BatchPredictor = requires(const F& f, const Matrix& X) {
  { f(X) } -> std::convertible_to<Vector>;
};

inline constexpr std::size_t kMaxExactFeatures = 15;

namespace detail {

inline constexpr Eigen::Index kShapleyBatchRows = 8192;

inline void check_shapley_inputs(std::span<const double> x, const Matrix& background) {
  if (background.rows() == 0) throw Error(ErrorKind::empty_dataset, "background set is empty");
  if (static_cast<std::size_t>(background.cols()) != x.size())
    throw Error(ErrorKind::shape_mismatch, "background width differs from explained row");
}

}  // namespace detail

template <BatchPredictor F>
double base_value(const F& predict, const Matrix& background) {
  return Vector(predict(background)).mean();
}

/// Exact enumeration over all 2^P coalitions.
template <BatchPredictor F>
Vector shapley_exact(const F& predict, std::span<const double> x, const Matrix& background) {
  detail::check_shapley_inputs(x, background);
  const std::size_t p = x.size();
  if (p > kMaxExactFeatures)
    throw Error(ErrorKind::too_many_features,
                std::to_string(p) + " features exceed the enumeration limit of " + std::to_string(kMaxExactFeatures));
  const std::size_t n_masks = std::size_t{1} << p;
  const Eigen::Index n_bg = background.rows();
  std::vector<double> value(n_masks);

  const std::size_t masks_per_batch =
      std::max<std::size_t>(1, static_cast<std::size_t>(detail::kShapleyBatchRows / std::max<Eigen::Index>(1, n_bg)));
  Matrix batch;
  for (std::size_t first = 0; first < n_masks; first += masks_per_batch) {
    const std::size_t count = std::min(masks_per_batch, n_masks - first);
    batch.resize(static_cast<Eigen::Index>(count) * n_bg, static_cast<Eigen::Index>(p));
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t mask = first + k;
      auto block = batch.middleRows(static_cast<Eigen::Index>(k) * n_bg, n_bg);
      block = background;
      for (std::size_t j = 0; j < p; ++j)
        if (mask & (std::size_t{1} << j)) block.col(static_cast<Eigen::Index>(j)).setConstant(x[j]);
    }
    const Vector out = predict(batch);
    for (std::size_t k = 0; k < count; ++k)
      value[first + k] = out.segment(static_cast<Eigen::Index>(k) * n_bg, n_bg).mean();
  }

  // weight[s] = s! (P - s - 1)! / P!
  std::vector<double> factorial(p + 1, 1.0);
  for (std::size_t k = 1; k <= p; ++k) factorial[k] = factorial[k - 1] * static_cast<double>(k);
  std::vector<double> weight(p, 0.0);
  for (std::size_t s = 0; s < p; ++s) weight[s] = factorial[s] * factorial[p - s - 1] / factorial[p];

  Vector phi = Vector::Zero(static_cast<Eigen::Index>(p));
  for (std::size_t mask = 0; mask < n_masks; ++mask) {
    const auto size = static_cast<std::size_t>(__builtin_popcountll(mask));
    for (std::size_t j = 0; j < p; ++j) {
      const std::size_t bit = std::size_t{1} << j;
      if (mask & bit) continue;
      phi[static_cast<Eigen::Index>(j)] += weight[size] * (value[mask | bit] - value[mask]);
    }
  }
  return phi;
}

/// Permutation sampling: each ordering adds features one at a time and credits
/// each feature with its background-averaged marginal change. Per ordering the
/// contributions telescope to f(x) - base_value.
template <BatchPredictor F>
Vector shapley_sample(const F& predict, std::span<const double> x, const Matrix& background,
                      std::size_t n_permutations, std::uint64_t seed) {
  detail::check_shapley_inputs(x, background);
  if (n_permutations < 1) throw Error(ErrorKind::invalid_config, "n_permutations must be >= 1");
  const std::size_t p = x.size();
  const Eigen::Index n_bg = background.rows();
  const auto steps = static_cast<Eigen::Index>(p + 1);
  const std::size_t perms_per_batch =
      std::max<std::size_t>(1, static_cast<std::size_t>(detail::kShapleyBatchRows / (steps * n_bg)));

  Rng rng(seed);
  Vector phi = Vector::Zero(static_cast<Eigen::Index>(p));
  std::vector<std::vector<std::size_t>> orders;
  Matrix batch;
  for (std::size_t done = 0; done < n_permutations;) {
    const std::size_t count = std::min(perms_per_batch, n_permutations - done);
    orders.assign(count, std::vector<std::size_t>(p));
    batch.resize(static_cast<Eigen::Index>(count) * steps * n_bg, static_cast<Eigen::Index>(p));
    for (std::size_t k = 0; k < count; ++k) {
      auto& order = orders[k];
      for (std::size_t j = 0; j < p; ++j) order[j] = j;
      rng.shuffle(std::span<std::size_t>(order));
      const Eigen::Index base = static_cast<Eigen::Index>(k) * steps * n_bg;
      for (Eigen::Index s = 0; s < steps; ++s) batch.middleRows(base + s * n_bg, n_bg) = background;
      // Step s has the first s features of the ordering switched on.
      for (std::size_t pos = 0; pos < p; ++pos) {
        const auto col = static_cast<Eigen::Index>(order[pos]);
        for (Eigen::Index s = static_cast<Eigen::Index>(pos) + 1; s < steps; ++s)
          batch.block(base + s * n_bg, col, n_bg, 1).setConstant(x[order[pos]]);
      }
    }
    const Vector out = predict(batch);
    for (std::size_t k = 0; k < count; ++k) {
      const Eigen::Index base = static_cast<Eigen::Index>(k) * steps * n_bg;
      double previous = out.segment(base, n_bg).mean();
      for (std::size_t pos = 0; pos < p; ++pos) {
        const double current = out.segment(base + static_cast<Eigen::Index>(pos + 1) * n_bg, n_bg).mean();
        phi[static_cast<Eigen::Index>(orders[k][pos])] += current - previous;
        previous = current;
      }
    }
    done += count;
  }
  return phi / static_cast<double>(n_permutations);
}

// ---------------------------------------------------------------------------
// Attribution matrices

struct AttributionMatrix {
  Matrix values;  // N_explain x P, probability units
  double base_value = 0.0;
  std::vector<std::size_t> row_ids;
  std::vector<std::string> feature_names;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(values.cols()); }
};

struct AttributionConfig {
  // 0 selects exact enumeration.
  std::size_t n_permutations = 128;
  std::size_t background_size = 100;
  std::size_t explain_size = 500;
};

/// Attributions for every row of X. Row r uses seed child("shap", row_ids[r], member).
template <BatchPredictor F>
AttributionMatrix explain(const F& predict, const Matrix& X, std::vector<std::size_t> row_ids,
                          const Matrix& background, std::vector<std::string> feature_names,
                          std::size_t n_permutations, const SeedFamily& seeds, std::size_t member = 0) {
  if (row_ids.size() != static_cast<std::size_t>(X.rows()))
    throw Error(ErrorKind::shape_mismatch, "row id count differs from explained rows");
  AttributionMatrix a;
  a.values.resize(X.rows(), X.cols());
  a.base_value = base_value(predict, background);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const std::span<const double> x(X.row(i).data(), static_cast<std::size_t>(X.cols()));
    const Vector phi = n_permutations == 0
                           ? shapley_exact(predict, x, background)
                           : shapley_sample(predict, x, background, n_permutations,
                                            seeds.child("shap", row_ids[static_cast<std::size_t>(i)], member));
    a.values.row(i) = phi.transpose();
  }
  a.row_ids = std::move(row_ids);
  a.feature_names = std::move(feature_names);
  return a;
}

/// Batch predictor over a model's output probabilities.
struct ModelPredictor {
  const ModelParams* model;
  Vector operator()(const Matrix& X) const { return forward_batch(*model, X); }
};

// ---------------------------------------------------------------------------
// Agreement between two attribution matrices

struct AgreementReport {
  std::optional<double> global_rho;
  std::vector<std::optional<double>> per_participant_rho;
  std::vector<std::optional<double>> per_feature_rho;
};

inline AgreementReport agreement(const AttributionMatrix& a, const AttributionMatrix& b) {
  if (a.values.rows() != b.values.rows() || a.values.cols() != b.values.cols())
    throw Error(ErrorKind::shape_mismatch, "attribution matrices differ in shape");
  if (a.row_ids != b.row_ids || a.feature_names != b.feature_names)
    throw Error(ErrorKind::shape_mismatch, "attribution matrices are not aligned");
  AgreementReport r;
  const std::size_t n = a.rows();
  const std::size_t p = a.cols();
  // values are row-major, so the flattened (row, feature) pairs are contiguous.
  if (n * p >= 2)
    r.global_rho = spearman(std::span<const double>(a.values.data(), n * p), std::span<const double>(b.values.data(), n * p));
  if (p >= 2) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      r.per_participant_rho.push_back(
          spearman(std::span<const double>(a.values.row(row).data(), p), std::span<const double>(b.values.row(row).data(), p)));
    }
  }
  if (n >= 2) {
    std::vector<double> ca(n), cb(n);
    for (std::size_t j = 0; j < p; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        ca[i] = a.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        cb[i] = b.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
      r.per_feature_rho.push_back(spearman(ca, cb));
    }
  }
  return r;
}

inline io::Json optional_to_json(const std::optional<double>& v) { return v ? io::Json(*v) : io::Json(nullptr); }

inline io::Json agreement_to_json(const AgreementReport& r, std::span<const std::string> feature_names) {
  io::Json per_row = io::Json::array();
  for (const auto& v : r.per_participant_rho) per_row.push_back(optional_to_json(v));
  io::Json per_feature = io::Json::object();
  for (std::size_t j = 0; j < r.per_feature_rho.size(); ++j)
    per_feature[feature_names[j]] = optional_to_json(r.per_feature_rho[j]);
  std::size_t undefined_rows = 0;
  double row_sum = 0.0;
  for (const auto& v : r.per_participant_rho) {
    if (v) row_sum += *v;
    else ++undefined_rows;
  }
  const std::size_t defined_rows = r.per_participant_rho.size() - undefined_rows;
  return {{"global_rho", optional_to_json(r.global_rho)},
          {"mean_per_participant_rho", defined_rows ? io::Json(row_sum / static_cast<double>(defined_rows)) : io::Json(nullptr)},
          {"undefined_per_participant", undefined_rows},
          {"per_feature_rho", per_feature},
          {"per_participant_rho", per_row}};
}

// ---------------------------------------------------------------------------
// Ensemble member variability

struct EnsembleAttributionSpread {
  std::vector<std::size_t> member_ids;
  std::vector<AttributionMatrix> member_attributions;
  Matrix spread;      // N_explain x P, population stddev across members
  Matrix importance;  // K x P, mean |value| across rows
  std::vector<std::vector<std::size_t>> rankings;  // K x P, rank 1 = most important
  std::vector<std::size_t> rank_range;             // per feature, max - min rank
};

/// Rank 1 for the largest importance; ties go to the lower feature index.
inline std::vector<std::size_t> importance_ranking(std::span<const double> importance) {
  std::vector<std::size_t> order(importance.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
  std::vector<std::size_t> rank(importance.size());
  for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = k + 1;
  return rank;
}

/// K distinct pool members, ascending, drawn with `seed`.
inline std::vector<std::size_t> choose_members(std::size_t pool_size, std::size_t k, std::uint64_t seed) {
  if (k > pool_size) throw Error(ErrorKind::invalid_config, "member subset larger than the pool");
  Rng rng(seed);
  auto ids = rng.sample_without_replacement(pool_size, k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Spread statistics from precomputed member attribution matrices.
inline EnsembleAttributionSpread summarise_spread(std::vector<AttributionMatrix> attributions,
                                                  std::vector<std::size_t> member_ids) {
  const std::size_t k = attributions.size();
  if (k < 2) throw Error(ErrorKind::invalid_config, "ensemble spread needs at least two members");
  const Eigen::Index n = attributions.front().values.rows();
  const Eigen::Index p = attributions.front().values.cols();
  for (const auto& a : attributions)
    if (a.values.rows() != n || a.values.cols() != p) throw Error(ErrorKind::shape_mismatch, "member attributions differ in shape");

  EnsembleAttributionSpread s;
  s.member_ids = std::move(member_ids);
  // Centred on the first member so identical members give exactly zero.
  const Matrix& ref = attributions.front().values;
  Matrix shift = Matrix::Zero(n, p);
  for (const auto& a : attributions) shift += a.values - ref;
  shift /= static_cast<double>(k);
  Matrix var = Matrix::Zero(n, p);
  for (const auto& a : attributions) var.array() += (a.values - ref - shift).array().square();
  s.spread = (var / static_cast<double>(k)).cwiseSqrt();

  s.importance.resize(static_cast<Eigen::Index>(k), p);
  for (std::size_t m = 0; m < k; ++m) {
    const auto row = static_cast<Eigen::Index>(m);
    s.importance.row(row) = attributions[m].values.cwiseAbs().colwise().mean();
    s.rankings.push_back(importance_ranking(std::span<const double>(s.importance.row(row).data(), static_cast<std::size_t>(p))));
  }
  s.rank_range.resize(static_cast<std::size_t>(p));
  for (std::size_t j = 0; j < static_cast<std::size_t>(p); ++j) {
    std::size_t lo = s.rankings[0][j], hi = s.rankings[0][j];
    for (const auto& r : s.rankings) {
      lo = std::min(lo, r[j]);
      hi = std::max(hi, r[j]);
    }
    s.rank_range[j] = hi - lo;
  }
  s.member_attributions = std::move(attributions);
  return s;
}

inline EnsembleAttributionSpread ensemble_spread(std::span<const ModelParams> pool_models,
                                                 std::span<const std::size_t> member_ids, const Matrix& X,
                                                 const std::vector<std::size_t>& row_ids, const Matrix& background,
                                                 const std::vector<std::string>& feature_names,
                                                 std::size_t n_permutations, const SeedFamily& seeds) {
  if (member_ids.size() < 2) throw Error(ErrorKind::invalid_config, "ensemble spread needs at least two members");
  std::vector<AttributionMatrix> attributions;
  for (std::size_t id : member_ids) {
    if (id >= pool_models.size()) throw Error(ErrorKind::invalid_config, "member id outside the pool");
    attributions.push_back(
        explain(ModelPredictor{&pool_models[id]}, X, row_ids, background, feature_names, n_permutations, seeds, id + 1));
  }
  return summarise_spread(std::move(attributions), {member_ids.begin(), member_ids.end()});
}

// ---------------------------------------------------------------------------
// Long-format exports

inline std::string attribution_long_csv(const AttributionMatrix& a, std::optional<std::size_t> member = std::nullopt) {
  std::string out = member ? "row_id,feature,value,member_id\n" : "row_id,feature,value\n";
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out += std::to_string(a.row_ids[i]);
      out += ',';
      out += a.feature_names[j];
      out += ',';
      out += io::format_double(a.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      if (member) {
        out += ',';
        out += std::to_string(*member);
      }
      out += '\n';
    }
  }
  return out;
}

inline std::string spread_stddev_csv(const EnsembleAttributionSpread& s) {
  const auto& ref = s.member_attributions.front();
  std::string out = "row_id,feature,stddev\n";
  for (std::size_t i = 0; i < ref.rows(); ++i)
    for (std::size_t j = 0; j < ref.cols(); ++j)
      out += std::to_string(ref.row_ids[i]) + ',' + ref.feature_names[j] + ',' +
             io::format_double(s.spread(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) + '\n';
  return out;
}

inline std::string member_attributions_csv(const EnsembleAttributionSpread& s) {
  std::string out = "row_id,feature,value,member_id\n";
  for (std::size_t m = 0; m < s.member_attributions.size(); ++m) {
    std::string block = attribution_long_csv(s.member_attributions[m], s.member_ids[m]);
    out += block.substr(block.find('\n') + 1);
  }
  return out;
}

inline std::string rankings_csv(const EnsembleAttributionSpread& s) {
  const auto& names = s.member_attributions.front().feature_names;
  std::string out = "member_id,feature,importance,rank\n";
  for (std::size_t m = 0; m < s.rankings.size(); ++m)
    for (std::size_t j = 0; j < names.size(); ++j)
      out += std::to_string(s.member_ids[m]) + ',' + names[j] + ',' +
             io::format_double(s.importance(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j))) + ',' +
             std::to_string(s.rankings[m][j]) + '\n';
  return out;
}

inline io::Json spread_to_json(const EnsembleAttributionSpread& s) {
  const auto& names = s.member_attributions.front().feature_names;
  io::Json features = io::Json::array();
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    features.push_back({{"feature", names[j]},
                        {"mean_stddev", s.spread.col(col).mean()},
                        {"max_stddev", s.spread.col(col).maxCoeff()},
                        {"rank_range", s.rank_range[j]}});
  }
  return {{"members", s.member_ids}, {"explained_rows", s.member_attributions.front().rows()}, {"features", features}};
}

}  // namespace stabreg
