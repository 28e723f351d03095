#include "stabreg/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stabreg/rng.hpp"

using namespace stabreg;

namespace {

// Rows of `boot` are per-row member predictions.
PredictionPanel panel_from(const std::vector<double>& target, const std::vector<std::vector<double>>& boot) {
  Vector t(static_cast<Eigen::Index>(target.size()));
  Matrix b(static_cast<Eigen::Index>(boot.size()), static_cast<Eigen::Index>(boot.front().size()));
  for (std::size_t i = 0; i < target.size(); ++i) {
    t[static_cast<Eigen::Index>(i)] = target[i];
    for (std::size_t m = 0; m < boot[i].size(); ++m) b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m)) = boot[i][m];
  }
  return make_panel(t, b);
}

double pair_count_auc(const std::vector<double>& p, const std::vector<double>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 1.0) continue;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (y[j] != 0.0) continue;
      pairs += 1.0;
      wins += p[i] > p[j] ? 1.0 : (p[i] == p[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

}  // namespace

TEST(Median, OddAndEven) {
  EXPECT_EQ(median(std::vector<double>{3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median(std::vector<double>{4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_THROW(median(std::vector<double>{}), Error);
}

TEST(Mad, Examples) {
  const auto same = panel_from({0.3, 0.7}, {{0.1, 0.3, 0.5}, {0.6, 0.7, 0.9}});
  EXPECT_EQ(mad(same), 0.0);
  const auto two = panel_from({0.32, 0.64}, {{0.3, 0.3, 0.3}, {0.7, 0.7, 0.7}});
  EXPECT_NEAR(mad(two), 0.04, 1e-12);
}

TEST(Mad, MatchesLoopOracle) {
  Rng rng(31);
  Vector t(40);
  Matrix b(40, 9);
  for (Eigen::Index i = 0; i < 40; ++i) {
    t[i] = rng.uniform(0.01, 0.99);
    for (Eigen::Index m = 0; m < 9; ++m) b(i, m) = rng.uniform(0.01, 0.99);
  }
  const auto panel = make_panel(t, b);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < 40; ++i) {
    std::vector<double> row(b.row(i).data(), b.row(i).data() + 9);
    std::sort(row.begin(), row.end());
    sum += std::abs(t[i] - row[4]);
  }
  EXPECT_NEAR(mad(panel), sum / 40.0, 1e-12);
}

TEST(DeviationPValues, Examples) {
  const auto at_median = panel_from({0.5}, {{0.4, 0.5, 0.6}});
  EXPECT_EQ(deviation_pvalues(at_median).values[0], 1.0);
  const auto far = panel_from({0.95}, {{0.4, 0.5, 0.6}});
  EXPECT_EQ(deviation_pvalues(far).values[0], 0.0);
}

TEST(DeviationPValues, FiveMemberCount) {
  // Member deviations {0.01, ..., 0.05} around a pinned median of 0.5.
  PredictionPanel panel;
  panel.target_preds = Vector::Constant(1, 0.535);
  panel.boot_preds.resize(1, 5);
  panel.boot_preds << 0.49, 0.52, 0.47, 0.54, 0.55;
  panel.boot_median = Vector::Constant(1, 0.5);
  EXPECT_DOUBLE_EQ(deviation_pvalues(panel).values[0], 0.4);
}

TEST(DeviationPValues, MatchesIndependentCount) {
  Rng rng(32);
  for (int rep = 0; rep < 20; ++rep) {
    Vector t(30);
    Matrix b(30, 11);
    for (Eigen::Index i = 0; i < 30; ++i) {
      t[i] = rng.uniform(0.05, 0.95);
      for (Eigen::Index m = 0; m < 11; ++m) b(i, m) = std::round(rng.uniform(0.05, 0.95) * 20.0) / 20.0;
    }
    const auto panel = make_panel(t, b);
    const auto pv = deviation_pvalues(panel);
    for (Eigen::Index i = 0; i < 30; ++i) {
      std::vector<double> row(b.row(i).data(), b.row(i).data() + 11);
      std::sort(row.begin(), row.end());
      const double med = row[5];
      int count = 0;
      for (double v : row)
        if (std::abs(v - med) >= std::abs(t[i] - med)) ++count;
      ASSERT_EQ(pv.values[static_cast<std::size_t>(i)], count / 11.0);
    }
  }
}

TEST(DeviationPValues, DegenerateRowsFlagged) {
  const auto panel = panel_from({0.5, 0.4}, {{0.3, 0.3}, {0.2, 0.6}});
  const auto pv = deviation_pvalues(panel);
  ASSERT_EQ(pv.degenerate_rows.size(), 1u);
  EXPECT_EQ(pv.degenerate_rows[0], 0u);
  EXPECT_EQ(pv.values[0], 0.0);
  const auto single = panel_from({0.5}, {{0.3}});
  EXPECT_THROW(deviation_pvalues(single), Error);
}

TEST(Auc, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<double>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<double>{0, 1, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<double>{0, 0, 1, 1}), 0.75);
  try {
    auc(std::vector<double>{0.1, 0.2}, std::vector<double>{1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::single_class);
  }
}

TEST(Auc, MatchesPairCountingAndInvariances) {
  Rng rng(33);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rng.uniform_index(60);
    std::vector<double> p(n), y(n), flipped(n), transformed(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = std::round(rng.uniform() * 10.0) / 10.0;  // coarse grid forces ties
      y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    y[0] = 1.0;
    y[1] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      flipped[i] = 1.0 - y[i];
      transformed[i] = std::exp(3.0 * p[i]) - 7.0;
    }
    const double a = auc(p, y);
    EXPECT_NEAR(a, pair_count_auc(p, y), 1e-12);
    EXPECT_NEAR(a + auc(p, flipped), 1.0, 1e-12);
    EXPECT_NEAR(a, auc(transformed, y), 1e-12);
  }
}

TEST(Spearman, Examples) {
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> neg{-1, -2, -3, -4};
  EXPECT_NEAR(*spearman(a, a), 1.0, 1e-12);
  EXPECT_NEAR(*spearman(a, neg), -1.0, 1e-12);
  EXPECT_NEAR(*spearman(a, std::vector<double>{1, 3, 2, 4}), 0.8, 1e-12);
  EXPECT_FALSE(spearman(a, std::vector<double>{2, 2, 2, 2}).has_value());
  EXPECT_THROW(spearman(a, std::vector<double>{1, 2}), Error);
}

TEST(Spearman, MonotoneInvariance) {
  Rng rng(34);
  std::vector<double> a(50), b(50), ta(50), tb(50);
  for (std::size_t i = 0; i < 50; ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + rng.normal();
    ta[i] = std::exp(a[i]);
    tb[i] = b[i] * b[i] * b[i];
  }
  EXPECT_NEAR(*spearman(a, b), *spearman(ta, tb), 1e-12);
}

TEST(Midranks, Ties) {
  const auto r = midranks(std::vector<double>{10, 20, 20, 5});
  EXPECT_EQ(r, (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(EvaluateModel, StandardAgainstItself) {
  Rng rng(35);
  Vector p(20), y(20);
  Matrix b(20, 7);
  for (Eigen::Index i = 0; i < 20; ++i) {
    p[i] = rng.uniform(0.05, 0.95);
    y[i] = i % 2;
    for (Eigen::Index m = 0; m < 7; ++m) b(i, m) = rng.uniform(0.05, 0.95);
  }
  const EvalReport r = evaluate_model(p, p, b, y, 0.05, "standard", "test");
  EXPECT_EQ(r.closer_fraction, 0.0);
  EXPECT_EQ(r.closer_ties, 20u);
  EXPECT_EQ(r.pvalues.size(), 20u);
  EXPECT_GE(r.sig_fraction, 0.0);
  EXPECT_LE(r.sig_fraction, 1.0);
  EXPECT_EQ(r.mad, mad(make_panel(p, b)));
}

TEST(EvaluateModel, CloserFraction) {
  Vector standard(2), model(2), y(2);
  standard << 0.9, 0.2;
  model << 0.55, 0.1;
  y << 1, 0;
  Matrix b(2, 3);
  b << 0.4, 0.5, 0.6, 0.4, 0.5, 0.6;
  const EvalReport r = evaluate_model(model, standard, b, y);
  EXPECT_EQ(r.closer_fraction, 0.5);
  EXPECT_EQ(r.closer_ties, 0u);
}

TEST(PValueHistogram, Bins) {
  const auto h = pvalue_histogram(std::vector<double>{0.0, 0.04, 0.05, 0.5, 1.0}, 20);
  ASSERT_EQ(h.size(), 20u);
  EXPECT_EQ(h[0], 2u);
  EXPECT_EQ(h[1], 1u);
  EXPECT_EQ(h[10], 1u);
  EXPECT_EQ(h[19], 1u);
}
