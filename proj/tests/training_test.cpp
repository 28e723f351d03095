#include "stabreg/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "stabreg/eval.hpp"

using namespace stabreg;
namespace fs = std::filesystem;

namespace {

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.epochs = 15;
  cfg.batch_size = 64;
  cfg.pool_size = 6;
  cfg.subsample_size = 3;
  cfg.hidden_dims = {16, 8};
  cfg.workers = 1;
  return cfg;
}

Split small_simulation(std::size_t n, std::uint64_t seed) {
  SimConfig sim;
  sim.n = n;
  sim.seed = seed;
  return split(simulate_dataset(sim), 0.2, seed + 100);
}

Dataset separable_toy() {
  Dataset ds;
  const Eigen::Index n = 60;
  ds.features.resize(n, 2);
  ds.labels.resize(n);
  Rng rng(12);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool pos = i % 2 == 0;
    ds.features(i, 0) = (pos ? 2.0 : -2.0) + 0.3 * rng.normal();
    ds.features(i, 1) = rng.normal();
    ds.labels[i] = pos ? 1.0 : 0.0;
  }
  ds.feature_names = {"signal", "noise"};
  return ds;
}

ModelParams constant_model(std::size_t input_dim, double prob) {
  ModelParams p = ModelParams::zeros({input_dim, {}});
  p.layers[0].bias[0] = std::log(prob / (1.0 - prob));
  return p;
}

}  // namespace

TEST(BceLoss, UniformPredictor) {
  const std::vector<double> p{0.5, 0.5}, y{1.0, 0.0};
  EXPECT_NEAR(bce_loss(p, y), std::log(2.0), 1e-9);
}

TEST(BceLoss, PerfectFitIsNearZero) {
  const std::vector<double> p{1.0, 0.0, 1.0}, y{1.0, 0.0, 1.0};
  EXPECT_LE(bce_loss(p, y), 1.1 * -std::log(1.0 - kDefaultClampEps));
}

TEST(BceLoss, MatchesNaiveLoop) {
  Rng rng(2);
  std::vector<double> p(50), y(50);
  for (std::size_t i = 0; i < 50; ++i) {
    p[i] = rng.uniform(0.01, 0.99);
    y[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < 50; ++i) total += y[i] == 1.0 ? -std::log(p[i]) : -std::log(1.0 - p[i]);
  EXPECT_NEAR(bce_loss(p, y), total / 50.0, 1e-12);
  const std::vector<double> short_y{1.0};
  EXPECT_THROW(bce_loss(p, short_y), Error);
}

TEST(LogPredDistance, Examples) {
  EXPECT_EQ(log_pred_distance(-0.3, -0.3), 0.0);
  EXPECT_NEAR(log_pred_distance(std::log(0.9), std::log(0.45)), std::log(2.0), 1e-12);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double a = std::log(rng.uniform(0.01, 1.0));
    const double b = std::log(rng.uniform(0.01, 1.0));
    EXPECT_EQ(log_pred_distance(a, b), log_pred_distance(b, a));
  }
}

TEST(StabilityPenalty, Examples) {
  PenaltyContext ctx;
  ctx.cached_logp.resize(2, 1);
  ctx.cached_logp << std::log(0.2), std::log(0.8);
  const std::vector<double> target{std::log(0.4)};
  ctx.lambda = 0.0;
  EXPECT_EQ(stability_penalty(ctx, target), 0.0);
  ctx.lambda = 0.7;
  // 0.7 * (|log .2 - log .4| + |log .8 - log .4|) / 2 = 0.7 log 2
  EXPECT_NEAR(stability_penalty(ctx, target), 0.7 * std::log(2.0), 1e-12);

  PenaltyContext same;
  same.lambda = 3.0;
  same.cached_logp = Matrix::Constant(4, 3, -0.25);
  const std::vector<double> equal{-0.25, -0.25, -0.25};
  EXPECT_EQ(stability_penalty(same, equal), 0.0);

  const std::vector<double> misaligned{-0.25, -0.25};
  EXPECT_THROW(stability_penalty(same, misaligned), Error);
}

TEST(StabilityPenalty, AgreesWithGradLossPenaltyTerm) {
  Rng rng(4);
  const ModelParams p = init_params({3, {5}}, 9);
  Matrix X(6, 3);
  for (Eigen::Index k = 0; k < X.size(); ++k) X.data()[k] = rng.normal();
  Vector y = Vector::Ones(6);
  PenaltyContext ctx;
  ctx.lambda = 0.4;
  ctx.cached_logp.resize(4, 6);
  for (Eigen::Index k = 0; k < ctx.cached_logp.size(); ++k) ctx.cached_logp.data()[k] = std::log(rng.uniform(0.05, 0.95));
  const Vector z = forward_logits(p, X);
  std::vector<double> logp(6);
  for (int i = 0; i < 6; ++i) logp[static_cast<std::size_t>(i)] = clamped_log_prob(z[i]);
  const double penalty = stability_penalty(ctx, logp);
  EXPECT_GT(penalty, 0.0);
  EXPECT_NEAR(grad_loss(p, X, y, &ctx).penalty, penalty, 1e-12);
}

TEST(BuildPool, SeparableToyOrdersLabels) {
  TrainConfig cfg = quick_config();
  cfg.pool_size = 1;
  cfg.subsample_size = 1;
  cfg.epochs = 40;
  const Dataset ds = separable_toy();
  const BootstrapPool pool = build_pool(ds, cfg);
  double pos = 0.0, neg = 0.0;
  for (Eigen::Index i = 0; i < ds.labels.size(); ++i) (ds.labels[i] == 1.0 ? pos : neg) += pool.cached_logp(0, i);
  EXPECT_GT(pos / 30.0, neg / 30.0);
}

TEST(BuildPool, DeterministicAndScheduleIndependent) {
  const Split s = small_simulation(300, 5);
  TrainConfig cfg = quick_config(7);
  const BootstrapPool a = build_pool(s.train, cfg);
  const BootstrapPool b = build_pool(s.train, cfg);
  cfg.workers = 3;
  const BootstrapPool c = build_pool(s.train, cfg);
  EXPECT_EQ(a.cached_logp, b.cached_logp);
  EXPECT_EQ(a.cached_logp, c.cached_logp);
  for (std::size_t m = 0; m < a.size(); ++m) {
    EXPECT_TRUE(a.models[m] == c.models[m]);
    EXPECT_EQ(a.indices[m].indices, c.indices[m].indices);
  }
}

TEST(BuildPool, CacheMatchesReEvaluation) {
  const Split s = small_simulation(300, 6);
  const TrainConfig cfg = quick_config(8);
  const BootstrapPool pool = build_pool(s.train, cfg);
  ASSERT_EQ(pool.train_rows(), s.train.rows());
  const double lo = std::log(cfg.clamp_eps);
  const double hi = std::log(1.0 - cfg.clamp_eps);
  for (std::size_t m = 0; m < pool.size(); ++m) {
    for (Eigen::Index i = 0; i < s.train.features.rows(); ++i) {
      std::vector<double> x(s.train.features.row(i).data(), s.train.features.row(i).data() + s.train.features.cols());
      const double re = std::log(clamp_prob(forward(pool.models[m], x), cfg.clamp_eps));
      const double cached = pool.cached_logp(static_cast<Eigen::Index>(m), i);
      ASSERT_NEAR(cached, re, 1e-12);
      ASSERT_GE(cached, lo);
      ASSERT_LE(cached, hi);
    }
  }
}

TEST(BuildPool, MembersAreDiverse) {
  const Split s = small_simulation(500, 9);
  TrainConfig cfg = quick_config(10);
  cfg.pool_size = 200;
  cfg.epochs = 5;
  const BootstrapPool pool = build_pool(s.train, cfg);
  const Matrix probs = (pool.cached_logp.array().exp()).matrix();
  std::size_t spread_rows = 0;
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    const double mean = probs.col(i).mean();
    const double var = (probs.col(i).array() - mean).square().mean();
    spread_rows += var > 0.0 ? 1 : 0;
  }
  EXPECT_GT(static_cast<double>(spread_rows), 0.99 * static_cast<double>(probs.cols()));
}

TEST(BuildPool, DivergenceNamesMember) {
  const Split s = small_simulation(200, 11);
  TrainConfig cfg = quick_config(12);
  cfg.pool_size = 2;
  cfg.subsample_size = 1;
  cfg.adam.learning_rate = 1e300;
  try {
    build_pool(s.train, cfg);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::divergence);
    EXPECT_NE(std::string(e.what()).find("pool member 0"), std::string::npos) << e.what();
  }
}

TEST(TrainStandard, DefaultConfigDiscriminatesSimulation) {
  SimConfig sim;
  sim.seed = 21;
  const Split s = split(simulate_dataset(sim), 0.2, 22);
  TrainConfig cfg;
  cfg.seed = 23;
  const ModelParams model = train_standard(s.train, cfg);
  EXPECT_GT(auc(forward_batch(model, s.test.features), s.test.labels), 0.85);
}

TEST(TrainStandard, ConstantLabelsPredictBaseRate) {
  Split s = small_simulation(300, 13);
  s.train.labels.setZero();
  TrainConfig cfg = quick_config(14);
  cfg.epochs = 200;
  const FitResult fit = fit_standard(s.train, cfg);
  ASSERT_FALSE(fit.warnings.empty());
  const Vector p = forward_batch(fit.params, s.test.features);
  EXPECT_LT(p.maxCoeff(), 0.05);
}

TEST(TrainStandard, IgnoresLambda) {
  const Split s = small_simulation(300, 15);
  TrainConfig cfg = quick_config(16);
  cfg.lambda = 0.0;
  const ModelParams a = train_standard(s.train, cfg);
  cfg.lambda = 5.0;
  const ModelParams b = train_standard(s.train, cfg);
  EXPECT_TRUE(a == b);
}

TEST(TrainStable, ZeroLambdaReproducesStandard) {
  const Split s = small_simulation(400, 17);
  TrainConfig cfg = quick_config(18);
  cfg.lambda = 0.0;
  const BootstrapPool pool = build_pool(s.train, cfg);
  EXPECT_TRUE(train_stable(s.train, pool, cfg) == train_standard(s.train, cfg));
  cfg.lambda = 0.5;
  EXPECT_FALSE(train_stable(s.train, pool, cfg) == train_standard(s.train, cfg));
}

TEST(TrainStable, RejectsMismatchedPool) {
  const Split s = small_simulation(300, 19);
  const TrainConfig cfg = quick_config(20);
  const BootstrapPool pool = build_pool(s.train, cfg);
  const Dataset fewer = subset_rows(s.train, std::vector<std::size_t>{0, 1, 2, 3, 4});
  try {
    train_stable(fewer, pool, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape_mismatch);
  }
  TrainConfig big = cfg;
  big.subsample_size = 7;
  big.pool_size = 7;
  EXPECT_THROW(train_stable(s.train, pool, big), Error);
}

TEST(TrainStable, ObjectiveDecreases) {
  const Split s = small_simulation(500, 21);
  TrainConfig cfg = quick_config(22);
  const BootstrapPool pool = build_pool(s.train, cfg);
  for (double lambda : {0.0, 0.1, 1.0}) {
    cfg.lambda = lambda;
    const FitResult fit = fit_stable(s.train, pool, cfg);
    ASSERT_EQ(fit.epoch_objective.size(), cfg.epochs);
    EXPECT_LT(fit.epoch_objective.back(), fit.epoch_objective.front()) << "lambda " << lambda;
  }
}

TEST(TrainStable, PenaltyPullsTowardPool) {
  const Split s = small_simulation(500, 23);
  TrainConfig cfg = quick_config(24);
  const BootstrapPool pool = build_pool(s.train, cfg);
  auto mean_distance = [&](const ModelParams& model) {
    const Vector logp = cached_log_predictions(model, s.train.features, cfg.clamp_eps);
    double total = 0.0;
    for (Eigen::Index m = 0; m < pool.cached_logp.rows(); ++m)
      total += (pool.cached_logp.row(m).transpose() - logp).cwiseAbs().mean();
    return total / static_cast<double>(pool.size());
  };
  cfg.lambda = 10.0;
  const double stable = mean_distance(train_stable(s.train, pool, cfg));
  const double standard = mean_distance(train_standard(s.train, cfg));
  EXPECT_LT(stable, standard);
}

TEST(Ensemble, SingleMemberMatchesMember) {
  const Split s = small_simulation(200, 25);
  TrainConfig cfg = quick_config(26);
  cfg.pool_size = 1;
  cfg.subsample_size = 1;
  const BootstrapPool pool = build_pool(s.train, cfg);
  const EnsembleModel ens = train_ensemble(pool);
  EXPECT_EQ(ens.predict(s.test.features), forward_batch(pool.models[0], s.test.features));
}

TEST(Ensemble, MeanOfMemberProbabilities) {
  BootstrapPool pool;
  pool.models = {constant_model(2, 0.2), constant_model(2, 0.6)};
  const EnsembleModel ens = train_ensemble(pool);
  const Matrix X = Matrix::Zero(3, 2);
  const Vector p = ens.predict(X);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 0.4, 1e-12);
  EXPECT_THROW(train_ensemble(BootstrapPool{}), Error);
}

TEST(Ensemble, EqualsMeanOfForwards) {
  const Split s = small_simulation(300, 27);
  const BootstrapPool pool = build_pool(s.train, quick_config(28));
  const EnsembleModel ens = train_ensemble(pool);
  const Vector p = ens.predict(s.test.features);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    std::vector<double> x(s.test.features.row(i).data(), s.test.features.row(i).data() + s.test.features.cols());
    double sum = 0.0;
    for (const auto& m : pool.models) sum += forward(m, x);
    ASSERT_NEAR(p[i], sum / static_cast<double>(pool.size()), 1e-12);
    ASSERT_GT(p[i], 0.0);
    ASSERT_LT(p[i], 1.0);
  }
}

TEST(PoolFiles, SaveLoadRoundTrip) {
  const Split s = small_simulation(200, 29);
  const TrainConfig cfg = quick_config(30);
  const BootstrapPool pool = build_pool(s.train, cfg);
  const fs::path dir = fs::temp_directory_path() / "stabreg_pool_roundtrip";
  fs::remove_all(dir);
  save_pool(pool, dir, train_config_to_json(cfg));
  const BootstrapPool back = load_pool(dir);
  ASSERT_EQ(back.size(), pool.size());
  EXPECT_EQ(back.cached_logp, pool.cached_logp);
  for (std::size_t m = 0; m < pool.size(); ++m) {
    EXPECT_TRUE(back.models[m] == pool.models[m]);
    EXPECT_EQ(back.indices[m].indices, pool.indices[m].indices);
    EXPECT_EQ(back.indices[m].seed, pool.indices[m].seed);
  }
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig cfg;
  cfg.lambda = 2.5;
  cfg.hidden_dims = {8};
  cfg.seed = 99;
  const TrainConfig back = train_config_from_json(train_config_to_json(cfg));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(cfg));
  cfg.subsample_size = cfg.pool_size + 1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.lambda = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
}
