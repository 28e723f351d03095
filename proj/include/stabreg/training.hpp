#pragma once

// Standard, stable (bootstrap-penalised) and bagged-ensemble model construction.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "stabreg/data.hpp"
#include "stabreg/error.hpp"
#include "stabreg/io.hpp"
#include "stabreg/model.hpp"
#include "stabreg/rng.hpp"

namespace stabreg {

struct TrainConfig {
  double lambda = 0.1;
  std::size_t pool_size = 200;
  std::size_t subsample_size = 100;
  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  AdamConfig adam;
  std::vector<std::size_t> hidden_dims{64, 32};
  double clamp_eps = kDefaultClampEps;
  std::uint64_t seed = 0;
  // Threads used by build_pool; 0 means hardware concurrency.
  std::size_t workers = 0;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(ErrorKind::invalid_config, "lambda must be >= 0");
    if (subsample_size > pool_size) throw Error(ErrorKind::invalid_config, "subsample_size exceeds pool_size");
    if (epochs < 1) throw Error(ErrorKind::invalid_config, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorKind::invalid_config, "batch_size must be >= 1");
    if (!(clamp_eps > 0.0 && clamp_eps < 0.5)) throw Error(ErrorKind::invalid_config, "clamp_eps must lie in (0, 0.5)");
    if (!(adam.learning_rate > 0.0)) throw Error(ErrorKind::invalid_config, "learning rate must be > 0");
  }

  Architecture architecture(std::size_t input_dim) const { return {input_dim, hidden_dims}; }

  std::size_t resolved_workers() const {
    if (workers > 0) return workers;
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }
};

inline io::Json train_config_to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},
          {"pool_size", c.pool_size},
          {"subsample_size", c.subsample_size},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.adam.learning_rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_epsilon", c.adam.epsilon},
          {"hidden_dims", c.hidden_dims},
          {"clamp_eps", c.clamp_eps},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults. `workers` is a runtime knob and is not
/// part of the serialised (hashed) configuration.
inline TrainConfig train_config_from_json(const io::Json& j, TrainConfig c = {}) {
  c.lambda = j.value("lambda", c.lambda);
  c.pool_size = j.value("pool_size", c.pool_size);
  c.subsample_size = j.value("subsample_size", c.subsample_size);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam.learning_rate = j.value("learning_rate", c.adam.learning_rate);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.epsilon = j.value("adam_epsilon", c.adam.epsilon);
  c.hidden_dims = j.value("hidden_dims", c.hidden_dims);
  c.clamp_eps = j.value("clamp_eps", c.clamp_eps);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------
// Loss terms

/// Mean binary cross-entropy of clamped probabilities.
inline double bce_loss(std::span<const double> p, std::span<const double> y, double eps = kDefaultClampEps) {
  if (p.size() != y.size()) throw Error(ErrorKind::shape_mismatch, "bce_loss: length mismatch");
  if (p.empty()) throw Error(ErrorKind::empty_dataset, "bce_loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_prob(p[i], eps);
    sum -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  return sum / static_cast<double>(p.size());
}

inline double log_pred_distance(double logp_b, double logp) noexcept { return std::abs(logp_b - logp); }

/// lambda * mean over batch rows of the member-averaged log-prediction distance.
inline double stability_penalty(const PenaltyContext& ctx, std::span<const double> logp_target) {
  if (logp_target.size() != ctx.batch_size())
    throw Error(ErrorKind::misaligned_context, "penalty context columns differ from target length");
  if (ctx.lambda == 0.0) return 0.0;
  if (ctx.members_used() == 0) throw Error(ErrorKind::misaligned_context, "penalty context selects no members");
  const double inv_m = 1.0 / static_cast<double>(ctx.members_used());
  double sum = 0.0;
  for (std::size_t i = 0; i < logp_target.size(); ++i) {
    double row = 0.0;
    for (std::size_t m = 0; m < ctx.members_used(); ++m)
      row += log_pred_distance(ctx.cached_logp(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(i)),
                               logp_target[i]);
    sum += row * inv_m;
  }
  return ctx.lambda * sum / static_cast<double>(logp_target.size());
}

// ---------------------------------------------------------------------------
// Bootstrap pool

struct BootstrapPool {
  std::vector<ModelParams> models;
  std::vector<BootstrapIndex> indices;
  Matrix cached_logp;  // pool_size x train rows, log clamp(f_m(x_i))
  std::vector<std::uint64_t> init_seeds;
  std::vector<std::uint64_t> shuffle_seeds;
  double clamp_eps = kDefaultClampEps;

  std::size_t size() const noexcept { return models.size(); }
  std::size_t train_rows() const noexcept { return static_cast<std::size_t>(cached_logp.cols()); }
};

struct FitResult {
  ModelParams params;
  std::vector<double> epoch_objective;  // mean batch objective per epoch
  std::vector<std::string> warnings;
};

namespace detail {

inline void gather_batch(const Matrix& X, const Vector& y, std::span<const std::size_t> rows, Matrix& Xb, Vector& yb) {
  const auto b = static_cast<Eigen::Index>(rows.size());
  Xb.resize(b, X.cols());
  yb.resize(b);
  for (Eigen::Index k = 0; k < b; ++k) {
    const auto src = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(k)]);
    Xb.row(k) = X.row(src);
    yb[k] = y[src];
  }
}

/// Mini-batch Adam over shuffled epochs. With a pool, every step draws a
/// fresh subsample of members and reads their cached log-predictions.
inline FitResult fit(const Matrix& X, const Vector& y, const TrainConfig& cfg, std::uint64_t init_seed,
                     std::uint64_t shuffle_seed, const BootstrapPool* pool = nullptr, std::uint64_t subsample_seed = 0) {
  const auto n = static_cast<std::size_t>(X.rows());
  if (n == 0) throw Error(ErrorKind::empty_dataset, "cannot train on zero rows");
  FitResult result;
  result.params = init_params(cfg.architecture(static_cast<std::size_t>(X.cols())), init_seed);
  {
    double pos = y.sum();
    if (pos == 0.0 || pos == static_cast<double>(n)) result.warnings.push_back("training labels contain a single class");
  }
  AdamState adam = AdamState::zeros_like(result.params, cfg.adam);
  Rng shuffle_rng(shuffle_seed);
  Rng subsample_rng(subsample_seed);
  const bool penalised = pool != nullptr && cfg.lambda > 0.0 && cfg.subsample_size > 0;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Matrix Xb;
  Vector yb;
  PenaltyContext ctx;
  ctx.lambda = cfg.lambda;
  ctx.clamp_eps = cfg.clamp_eps;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double objective = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      gather_batch(X, y, rows, Xb, yb);
      const PenaltyContext* ctx_ptr = nullptr;
      if (penalised) {
        ctx.members = subsample_rng.sample_without_replacement(pool->size(), cfg.subsample_size);
        ctx.cached_logp.resize(static_cast<Eigen::Index>(ctx.members.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t m = 0; m < ctx.members.size(); ++m)
          for (std::size_t k = 0; k < rows.size(); ++k)
            ctx.cached_logp(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) =
                pool->cached_logp(static_cast<Eigen::Index>(ctx.members[m]), static_cast<Eigen::Index>(rows[k]));
        ctx_ptr = &ctx;
      }
      LossGrad lg;
      try {
        lg = grad_loss(result.params, Xb, yb, ctx_ptr);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::non_finite) throw;
        throw Error(ErrorKind::divergence, "epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(lg.loss))
        throw Error(ErrorKind::divergence, "non-finite loss at epoch " + std::to_string(epoch));
      adam_update(result.params, lg.grad, adam);
      objective += lg.loss;
      ++steps;
    }
    result.epoch_objective.push_back(objective / static_cast<double>(steps));
  }
  if (!result.params.all_finite()) throw Error(ErrorKind::divergence, "parameters became non-finite");
  return result;
}

}  // namespace detail

/// Child seeds of the target (standard/stable) model; shared by both so that
/// lambda=0 reproduces the standard model exactly.
struct TargetSeeds {
  std::uint64_t init;
  std::uint64_t shuffle;
  std::uint64_t subsample;

  static TargetSeeds from(const TrainConfig& cfg) {
    const SeedFamily seeds{cfg.seed};
    return {seeds.child("target-init"), seeds.child("target-shuffle"), seeds.child("stable-subsample")};
  }
};

/// Minimises mean BCE only; cfg.lambda is ignored.
inline FitResult fit_standard(const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  const auto seeds = TargetSeeds::from(cfg);
  return detail::fit(train.features, train.labels, cfg, seeds.init, seeds.shuffle);
}

inline ModelParams train_standard(const Dataset& train, const TrainConfig& cfg) {
  return fit_standard(train, cfg).params;
}

inline FitResult fit_stable(const Dataset& train, const BootstrapPool& pool, const TrainConfig& cfg) {
  cfg.validate();
  if (pool.train_rows() != train.rows())
    throw Error(ErrorKind::shape_mismatch, "pool cache covers " + std::to_string(pool.train_rows()) +
                                               " rows, train set has " + std::to_string(train.rows()));
  if (cfg.subsample_size > pool.size())
    throw Error(ErrorKind::invalid_config, "subsample_size exceeds the number of pooled models");
  if (cfg.lambda > 0.0 && cfg.subsample_size == 0)
    throw Error(ErrorKind::invalid_config, "a positive lambda needs subsample_size >= 1");
  const auto seeds = TargetSeeds::from(cfg);
  return detail::fit(train.features, train.labels, cfg, seeds.init, seeds.shuffle, &pool, seeds.subsample);
}

inline ModelParams train_stable(const Dataset& train, const BootstrapPool& pool, const TrainConfig& cfg) {
  return fit_stable(train, pool, cfg).params;
}

inline Vector cached_log_predictions(const ModelParams& model, const Matrix& X, double eps) {
  Vector z = forward_logits(model, X);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = clamped_log_prob(z[i], eps);
  return z;
}

/// Member m: bootstrap seed child("bootstrap", m), init child("member-init", m),
/// shuffle child("member-shuffle", m). Members train concurrently; each writes
/// only its own slot so the result does not depend on scheduling.
inline BootstrapPool build_pool(const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  train.validate();
  if (cfg.pool_size < 1) throw Error(ErrorKind::invalid_config, "pool_size must be >= 1");
  const SeedFamily seeds{cfg.seed};
  const std::size_t m_pool = cfg.pool_size;
  BootstrapPool pool;
  pool.clamp_eps = cfg.clamp_eps;
  pool.models.resize(m_pool);
  pool.indices.resize(m_pool);
  pool.init_seeds.resize(m_pool);
  pool.shuffle_seeds.resize(m_pool);
  pool.cached_logp.resize(static_cast<Eigen::Index>(m_pool), train.features.rows());

  std::vector<std::exception_ptr> failures(m_pool);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t m = next.fetch_add(1);
      if (m >= m_pool) return;
      try {
        pool.indices[m] = draw_bootstrap(train, seeds.child("bootstrap", m));
        pool.init_seeds[m] = seeds.child("member-init", m);
        pool.shuffle_seeds[m] = seeds.child("member-shuffle", m);
        Matrix Xb;
        Vector yb;
        detail::gather_batch(train.features, train.labels, pool.indices[m].indices, Xb, yb);
        try {
          pool.models[m] = detail::fit(Xb, yb, cfg, pool.init_seeds[m], pool.shuffle_seeds[m]).params;
        } catch (const Error& e) {
          throw Error(ErrorKind::divergence, "pool member " + std::to_string(m) + " (bootstrap seed " +
                                                 std::to_string(pool.indices[m].seed) + ") failed: " + e.what());
        }
        pool.cached_logp.row(static_cast<Eigen::Index>(m)) =
            cached_log_predictions(pool.models[m], train.features, cfg.clamp_eps).transpose();
      } catch (...) {
        failures[m] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(cfg.resolved_workers(), m_pool);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  }
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);
  return pool;
}

// ---------------------------------------------------------------------------
// Ensemble

struct EnsembleModel {
  std::vector<ModelParams> members;

  /// Arithmetic mean of member probabilities, summed in member order.
  Vector predict(const Matrix& X) const {
    if (members.empty()) throw Error(ErrorKind::empty_dataset, "ensemble has no members");
    Vector sum = Vector::Zero(X.rows());
    for (const auto& m : members) sum += forward_batch(m, X);
    return sum / static_cast<double>(members.size());
  }
};

inline EnsembleModel train_ensemble(const BootstrapPool& pool) {
  if (pool.size() == 0) throw Error(ErrorKind::empty_dataset, "cannot build an ensemble from an empty pool");
  return {pool.models};
}

// ---------------------------------------------------------------------------
// Pool persistence: member_NNN.json, cache.csv (one row per member),
// bootstrap_indices.csv and manifest.json.

inline std::string member_filename(std::size_t m) {
  std::string digits = std::to_string(m);
  while (digits.size() < 3) digits.insert(digits.begin(), '0');
  return "member_" + digits + ".json";
}

inline void save_pool(const BootstrapPool& pool, const std::filesystem::path& dir, const io::Json& config) {
  std::filesystem::create_directories(dir);
  std::string cache;
  std::string indices;
  for (std::size_t m = 0; m < pool.size(); ++m) {
    ModelDocument doc{pool.models[m], std::nullopt,
                      {{"role", "pool-member"},
                       {"member", m},
                       {"bootstrap_seed", pool.indices[m].seed},
                       {"init_seed", pool.init_seeds[m]},
                       {"shuffle_seed", pool.shuffle_seeds[m]}}};
    io::write_json(dir / member_filename(m), model_to_json(doc));
    for (Eigen::Index i = 0; i < pool.cached_logp.cols(); ++i) {
      if (i > 0) cache += ',';
      cache += io::format_double(pool.cached_logp(static_cast<Eigen::Index>(m), i));
    }
    cache += '\n';
    for (std::size_t i = 0; i < pool.indices[m].indices.size(); ++i) {
      if (i > 0) indices += ',';
      indices += std::to_string(pool.indices[m].indices[i]);
    }
    indices += '\n';
  }
  io::write_text(dir / "cache.csv", cache);
  io::write_text(dir / "bootstrap_indices.csv", indices);
  io::Json manifest;
  manifest["format"] = "stabreg-pool";
  manifest["version"] = 1;
  manifest["members"] = pool.size();
  manifest["train_rows"] = pool.train_rows();
  manifest["clamp_eps"] = pool.clamp_eps;
  manifest["config_hash"] = io::hash_json(config);
  io::Json seeds = io::Json::array();
  for (std::size_t m = 0; m < pool.size(); ++m)
    seeds.push_back({{"bootstrap", pool.indices[m].seed}, {"init", pool.init_seeds[m]}, {"shuffle", pool.shuffle_seeds[m]}});
  manifest["seeds"] = std::move(seeds);
  io::write_json(dir / "manifest.json", manifest);
}

inline BootstrapPool load_pool(const std::filesystem::path& dir) {
  const io::Json manifest = io::read_json(dir / "manifest.json");
  if (manifest.value("format", "") != "stabreg-pool") throw Error(ErrorKind::parse_error, "not a pool manifest");
  const auto members = manifest.at("members").get<std::size_t>();
  const auto rows = manifest.at("train_rows").get<std::size_t>();
  BootstrapPool pool;
  pool.clamp_eps = manifest.at("clamp_eps").get<double>();
  pool.cached_logp.resize(static_cast<Eigen::Index>(members), static_cast<Eigen::Index>(rows));
  const std::string cache = io::read_text(dir / "cache.csv");
  const std::string indices = io::read_text(dir / "bootstrap_indices.csv");
  std::size_t cache_pos = 0;
  std::size_t index_pos = 0;
  auto next_line = [](const std::string& text, std::size_t& pos) {
    const std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) throw Error(ErrorKind::parse_error, "truncated pool file");
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    return line;
  };
  for (std::size_t m = 0; m < members; ++m) {
    ModelDocument doc = model_from_json(io::read_json(dir / member_filename(m)));
    pool.models.push_back(std::move(doc.params));
    const auto& s = manifest.at("seeds").at(m);
    pool.init_seeds.push_back(s.at("init").get<std::uint64_t>());
    pool.shuffle_seeds.push_back(s.at("shuffle").get<std::uint64_t>());
    const auto cache_fields = io::split_csv_line(next_line(cache, cache_pos));
    const auto index_fields = io::split_csv_line(next_line(indices, index_pos));
    if (cache_fields.size() != rows || index_fields.size() != rows)
      throw Error(ErrorKind::parse_error, "pool row " + std::to_string(m) + " has the wrong width");
    BootstrapIndex b;
    b.seed = s.at("bootstrap").get<std::uint64_t>();
    for (std::size_t i = 0; i < rows; ++i) {
      const auto v = io::parse_double(cache_fields[i]);
      if (!v) throw Error(ErrorKind::parse_error, "bad cache value");
      pool.cached_logp(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(i)) = *v;
      b.indices.push_back(static_cast<std::size_t>(std::stoull(index_fields[i])));
    }
    pool.indices.push_back(std::move(b));
  }
  return pool;
}

}  // namespace stabreg
