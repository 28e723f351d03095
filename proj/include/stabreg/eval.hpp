#pragma once

// Stability and discrimination metrics against a bootstrap reference.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stabreg/data.hpp"
#include "stabreg/error.hpp"
#include "stabreg/io.hpp"
#include "stabreg/model.hpp"

namespace stabreg {

/// Midpoint median; the input is copied.
inline double median(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorKind::empty_dataset, "median of empty range");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct PredictionPanel {
  Vector target_preds;  // N_test
  Matrix boot_preds;    // N_test x M_pool
  Vector boot_median;   // N_test

  std::size_t rows() const noexcept { return static_cast<std::size_t>(target_preds.size()); }
  std::size_t members() const noexcept { return static_cast<std::size_t>(boot_preds.cols()); }
};

/// Clamps every probability to [eps, 1-eps] and computes per-row medians.
inline PredictionPanel make_panel(const Vector& target, const Matrix& boot_preds, double eps = kDefaultClampEps) {
  if (target.size() != boot_preds.rows())
    throw Error(ErrorKind::shape_mismatch, "panel target and bootstrap rows differ");
  PredictionPanel panel;
  panel.target_preds = target.unaryExpr([eps](double p) { return clamp_prob(p, eps); });
  panel.boot_preds = boot_preds.unaryExpr([eps](double p) { return clamp_prob(p, eps); });
  panel.boot_median.resize(target.size());
  std::vector<double> row(static_cast<std::size_t>(boot_preds.cols()));
  for (Eigen::Index i = 0; i < boot_preds.rows(); ++i) {
    for (Eigen::Index m = 0; m < boot_preds.cols(); ++m) row[static_cast<std::size_t>(m)] = panel.boot_preds(i, m);
    panel.boot_median[i] = median(row);
  }
  return panel;
}

/// Member probabilities on X, one column per model.
inline Matrix member_predictions(std::span<const ModelParams> members, const Matrix& X) {
  Matrix out(X.rows(), static_cast<Eigen::Index>(members.size()));
  for (std::size_t m = 0; m < members.size(); ++m) out.col(static_cast<Eigen::Index>(m)) = forward_batch(members[m], X);
  return out;
}

inline double mad(const PredictionPanel& panel) {
  if (panel.rows() == 0) throw Error(ErrorKind::empty_dataset, "mad of empty panel");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < panel.target_preds.size(); ++i)
    sum += std::abs(panel.target_preds[i] - panel.boot_median[i]);
  return sum / static_cast<double>(panel.rows());
}

struct DeviationPValues {
  std::vector<double> values;
  // Rows whose bootstrap members all agree; p is then 1 or 0.
  std::vector<std::size_t> degenerate_rows;
};

/// p_i = #{m : |boot_im - med_i| >= |target_i - med_i|} / M.
inline DeviationPValues deviation_pvalues(const PredictionPanel& panel) {
  if (panel.members() < 2) throw Error(ErrorKind::invalid_config, "deviation p-values need at least two members");
  DeviationPValues out;
  out.values.resize(panel.rows());
  const auto m_pool = static_cast<Eigen::Index>(panel.members());
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(panel.rows()); ++i) {
    const double med = panel.boot_median[i];
    const double target_dev = std::abs(panel.target_preds[i] - med);
    const auto row = panel.boot_preds.row(i);
    if ((row.array() == row(0)).all()) {
      out.degenerate_rows.push_back(static_cast<std::size_t>(i));
      out.values[static_cast<std::size_t>(i)] = panel.target_preds[i] == row(0) ? 1.0 : 0.0;
      continue;
    }
    std::size_t count = 0;
    for (Eigen::Index m = 0; m < m_pool; ++m) count += std::abs(row(m) - med) >= target_dev ? 1 : 0;
    out.values[static_cast<std::size_t>(i)] = static_cast<double>(count) / static_cast<double>(m_pool);
  }
  return out;
}

/// 1-based ranks with ties assigned their average rank.
inline std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

/// Mann-Whitney AUC via the rank-sum identity.
inline double auc(std::span<const double> preds, std::span<const double> labels) {
  if (preds.size() != labels.size()) throw Error(ErrorKind::shape_mismatch, "auc: length mismatch");
  double n_pos = 0.0;
  double rank_sum = 0.0;
  const auto ranks = midranks(preds);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1.0) {
      n_pos += 1.0;
      rank_sum += ranks[i];
    }
  }
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw Error(ErrorKind::single_class, "auc needs both classes");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

inline double auc(const Vector& preds, const Vector& labels) {
  return auc(std::span<const double>(preds.data(), static_cast<std::size_t>(preds.size())),
             std::span<const double>(labels.data(), static_cast<std::size_t>(labels.size())));
}

inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Pearson correlation of midranks; nullopt when either side is constant.
inline std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::shape_mismatch, "spearman: length mismatch");
  if (a.size() < 2) throw Error(ErrorKind::invalid_config, "spearman needs at least two points");
  const auto ra = midranks(a);
  const auto rb = midranks(b);
  return pearson(ra, rb);
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::string model_tag;
  std::string dataset_tag;
  double mad = 0.0;
  double auc = 0.0;
  std::vector<double> pvalues;
  double threshold = 0.05;
  double sig_fraction = 0.0;
  double closer_fraction = 0.0;
  std::size_t closer_ties = 0;
  std::size_t degenerate_rows = 0;
};

/// `closer` counts rows where the model is strictly nearer the bootstrap
/// median than the standard model; exact ties are excluded from both the
/// numerator and the denominator.
inline EvalReport evaluate_model(const Vector& model_preds, const Vector& standard_preds, const Matrix& boot_preds,
                                 const Vector& labels, double threshold = 0.05, std::string model_tag = {},
                                 std::string dataset_tag = {}, double eps = kDefaultClampEps) {
  if (model_preds.size() != standard_preds.size() || model_preds.size() != labels.size())
    throw Error(ErrorKind::shape_mismatch, "evaluate_model: misaligned inputs");
  const PredictionPanel panel = make_panel(model_preds, boot_preds, eps);
  EvalReport r;
  r.model_tag = std::move(model_tag);
  r.dataset_tag = std::move(dataset_tag);
  r.threshold = threshold;
  r.mad = mad(panel);
  r.auc = auc(panel.target_preds, labels);
  auto pv = deviation_pvalues(panel);
  r.pvalues = std::move(pv.values);
  r.degenerate_rows = pv.degenerate_rows.size();
  std::size_t sig = 0;
  for (double p : r.pvalues) sig += p < threshold ? 1 : 0;
  r.sig_fraction = static_cast<double>(sig) / static_cast<double>(r.pvalues.size());

  std::size_t closer = 0;
  std::size_t decided = 0;
  for (Eigen::Index i = 0; i < model_preds.size(); ++i) {
    const double med = panel.boot_median[i];
    const double d_model = std::abs(panel.target_preds[i] - med);
    const double d_standard = std::abs(clamp_prob(standard_preds[i], eps) - med);
    if (d_model == d_standard) {
      ++r.closer_ties;
      continue;
    }
    ++decided;
    closer += d_model < d_standard ? 1 : 0;
  }
  r.closer_fraction = decided == 0 ? 0.0 : static_cast<double>(closer) / static_cast<double>(decided);
  return r;
}

inline io::Json eval_report_to_json(const EvalReport& r) {
  return {{"model", r.model_tag},
          {"dataset", r.dataset_tag},
          {"mad", r.mad},
          {"auc", r.auc},
          {"threshold", r.threshold},
          {"sig_fraction", r.sig_fraction},
          {"closer_fraction", r.closer_fraction},
          {"closer_ties", r.closer_ties},
          {"degenerate_rows", r.degenerate_rows},
          {"pvalues", r.pvalues}};
}

/// Counts of p-values per [k/bins, (k+1)/bins) bin; p = 1 lands in the last bin.
inline std::vector<std::size_t> pvalue_histogram(std::span<const double> pvalues, std::size_t bins = 20) {
  std::vector<std::size_t> counts(bins, 0);
  for (double p : pvalues) {
    auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(bins)));
    counts[std::min(k, bins - 1)] += 1;
  }
  return counts;
}

}  // namespace stabreg
