#pragma once

// Fixed-architecture MLP for binary risk prediction: rectifier hidden layers,
// one logistic output unit. Forward pass, backpropagation and Adam are coded
// by hand on top of Eigen's dense matrix products.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stabreg/data.hpp"
#include "stabreg/error.hpp"
#include "stabreg/io.hpp"
#include "stabreg/rng.hpp"

namespace stabreg {

inline constexpr double kDefaultClampEps = 1e-7;

inline double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) noexcept { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double clamp_prob(double p, double eps = kDefaultClampEps) noexcept { return std::clamp(p, eps, 1.0 - eps); }

/// log(clamp(sigmoid(z))): the log-prediction fed to the stability distance.
inline double clamped_log_prob(double logit, double eps = kDefaultClampEps) noexcept {
  return std::log(clamp_prob(sigmoid(logit), eps));
}

struct Architecture {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims{64, 32};

  void validate() const {
    if (input_dim < 1) throw Error(ErrorKind::invalid_config, "input_dim must be >= 1");
    for (std::size_t w : hidden_dims)
      if (w < 1) throw Error(ErrorKind::invalid_config, "hidden widths must be >= 1");
  }

  /// Widths of every layer's input and output, input first, 1 last.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
    w.push_back(1);
    return w;
  }

  std::size_t parameter_count() const {
    const auto w = widths();
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) total += w[l] * w[l + 1] + w[l + 1];
    return total;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct ModelParams {
  Architecture arch;
  std::vector<Layer> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }

  static ModelParams zeros(const Architecture& arch) {
    arch.validate();
    ModelParams p;
    p.arch = arch;
    const auto w = arch.widths();
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      const auto in = static_cast<Eigen::Index>(w[l]);
      const auto out = static_cast<Eigen::Index>(w[l + 1]);
      p.layers.push_back({Matrix::Zero(out, in), Vector::Zero(out)});
    }
    return p;
  }

  /// Weights row-major per layer, each followed by its bias.
  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& l : layers) {
      flat.insert(flat.end(), l.weight.data(), l.weight.data() + l.weight.size());
      flat.insert(flat.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return flat;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw Error(ErrorKind::shape_mismatch, "flat parameter length mismatch");
    std::size_t k = 0;
    for (auto& l : layers) {
      std::copy_n(flat.data() + k, l.weight.size(), l.weight.data());
      k += static_cast<std::size_t>(l.weight.size());
      std::copy_n(flat.data() + k, l.bias.size(), l.bias.data());
      k += static_cast<std::size_t>(l.bias.size());
    }
  }

  bool same_shape(const ModelParams& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].weight.rows() != other.layers[l].weight.rows() ||
          layers[l].weight.cols() != other.layers[l].weight.cols() ||
          layers[l].bias.size() != other.layers[l].bias.size())
        return false;
    }
    return true;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.arch == b.arch) || !a.same_shape(b)) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      if (a.layers[l].weight != b.layers[l].weight || a.layers[l].bias != b.layers[l].bias) return false;
    return true;
  }
};

/// Weights ~ Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn layer by layer in
/// row-major order from one stream; biases are zero.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(arch);
  Rng rng(seed);
  for (auto& l : p.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.cols()));
    for (Eigen::Index k = 0; k < l.weight.size(); ++k) l.weight.data()[k] = rng.uniform(-bound, bound);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

inline void check_input(const ModelParams& params, const Matrix& X) {
  if (static_cast<std::size_t>(X.cols()) != params.arch.input_dim && X.rows() > 0)
    throw Error(ErrorKind::shape_mismatch, "input has " + std::to_string(X.cols()) + " columns, model expects " +
                                               std::to_string(params.arch.input_dim));
}

/// Raw output logits, one per row.
inline Vector forward_logits(const ModelParams& params, const Matrix& X) {
  check_input(params, X);
  if (X.rows() == 0) return Vector(0);
  Matrix h = X;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t l = 0; l < last; ++l) {
    const auto& layer = params.layers[l];
    Matrix next = h * layer.weight.transpose();
    next.rowwise() += layer.bias.transpose();
    h = next.cwiseMax(0.0);
  }
  const auto& out = params.layers[last];
  Vector z = h * out.weight.row(0).transpose();
  z.array() += out.bias[0];
  return z;
}

inline Vector forward_batch(const ModelParams& params, const Matrix& X) {
  if (!X.allFinite()) throw Error(ErrorKind::non_finite, "non-finite model input");
  Vector z = forward_logits(params, X);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = sigmoid(z[i]);
  return z;
}

inline double forward_logit(const ModelParams& params, std::span<const double> x) {
  if (x.size() != params.arch.input_dim) throw Error(ErrorKind::shape_mismatch, "feature vector length mismatch");
  Matrix row = Eigen::Map<const Matrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  return forward_logits(params, row)[0];
}

inline double forward(const ModelParams& params, std::span<const double> x) {
  for (double v : x)
    if (!std::isfinite(v)) throw Error(ErrorKind::non_finite, "non-finite model input");
  return sigmoid(forward_logit(params, x));
}

// ---------------------------------------------------------------------------
// Loss and gradient

/// Cached bootstrap log-predictions for one mini-batch: rows are the selected
/// pool members, columns align with the batch rows.
struct PenaltyContext {
  Matrix cached_logp;
  std::vector<std::size_t> members;
  double lambda = 0.0;
  double clamp_eps = kDefaultClampEps;

  std::size_t members_used() const noexcept { return static_cast<std::size_t>(cached_logp.rows()); }
  std::size_t batch_size() const noexcept { return static_cast<std::size_t>(cached_logp.cols()); }
};

struct LossGrad {
  double loss = 0.0;
  double bce = 0.0;
  double penalty = 0.0;
  ModelParams grad;
};

namespace detail {

inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Batch objective: mean softplus-form BCE plus, when a context is given,
/// lambda * mean_i (1/M) sum_m |cached[m][i] - log clamp(f(x_i))|, together
/// with its exact (sub)gradient. |.| at 0 and the clamp plateaus have
/// derivative 0.
inline LossGrad grad_loss(const ModelParams& params, const Matrix& X, const Vector& y,
                          const PenaltyContext* penalty = nullptr) {
  check_input(params, X);
  const Eigen::Index batch = X.rows();
  if (batch == 0) throw Error(ErrorKind::empty_dataset, "empty batch");
  if (y.size() != batch) throw Error(ErrorKind::shape_mismatch, "label count differs from batch rows");
  if (penalty && penalty->lambda > 0.0) {
    if (static_cast<Eigen::Index>(penalty->batch_size()) != batch)
      throw Error(ErrorKind::misaligned_context, "penalty context columns differ from batch rows");
    if (penalty->members_used() == 0)
      throw Error(ErrorKind::misaligned_context, "penalty context selects no pool members");
  }

  const std::size_t n_layers = params.layers.size();
  // acts[l] is the input to layer l; pre[l] its pre-activation for hidden layers.
  std::vector<Matrix> acts(n_layers);
  std::vector<Matrix> pre(n_layers);
  acts[0] = X;
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    const auto& layer = params.layers[l];
    pre[l] = acts[l] * layer.weight.transpose();
    pre[l].rowwise() += layer.bias.transpose();
    if (!pre[l].allFinite()) throw Error(ErrorKind::non_finite, "non-finite activation at layer " + std::to_string(l));
    acts[l + 1] = pre[l].cwiseMax(0.0);
  }
  const auto& out = params.layers[n_layers - 1];
  Vector z = acts[n_layers - 1] * out.weight.row(0).transpose();
  z.array() += out.bias[0];
  if (!z.allFinite())
    throw Error(ErrorKind::non_finite, "non-finite logit at layer " + std::to_string(n_layers - 1));

  const double inv_b = 1.0 / static_cast<double>(batch);
  LossGrad result;
  Vector dz(batch);
  double bce_sum = 0.0;
  for (Eigen::Index i = 0; i < batch; ++i) {
    bce_sum += softplus(z[i]) - y[i] * z[i];
    dz[i] = (sigmoid(z[i]) - y[i]) * inv_b;
  }
  result.bce = bce_sum * inv_b;

  if (penalty && penalty->lambda > 0.0) {
    const double eps = penalty->clamp_eps;
    const auto members = static_cast<Eigen::Index>(penalty->members_used());
    const double inv_m = 1.0 / static_cast<double>(members);
    double pen_sum = 0.0;
    for (Eigen::Index i = 0; i < batch; ++i) {
      const double p = sigmoid(z[i]);
      const bool clamped = p < eps || p > 1.0 - eps;
      const double logp = std::log(clamp_prob(p, eps));
      double dist = 0.0;
      double sign_sum = 0.0;
      for (Eigen::Index m = 0; m < members; ++m) {
        const double diff = logp - penalty->cached_logp(m, i);
        dist += std::abs(diff);
        sign_sum += detail::sign(diff);
      }
      pen_sum += dist * inv_m;
      // d log sigmoid(z) / dz = 1 - sigmoid(z)
      if (!clamped) dz[i] += penalty->lambda * inv_b * inv_m * sign_sum * (1.0 - p);
    }
    result.penalty = penalty->lambda * pen_sum * inv_b;
  }
  result.loss = result.bce + result.penalty;

  result.grad = ModelParams::zeros(params.arch);
  // Output layer.
  result.grad.layers[n_layers - 1].weight.row(0) = (acts[n_layers - 1].transpose() * dz).transpose();
  result.grad.layers[n_layers - 1].bias[0] = dz.sum();
  Matrix delta = dz * out.weight.row(0);  // batch x width of last hidden layer
  for (std::size_t l = n_layers - 1; l-- > 0;) {
    delta = delta.cwiseProduct((pre[l].array() > 0.0).cast<double>().matrix());
    result.grad.layers[l].weight = delta.transpose() * acts[l];
    result.grad.layers[l].bias = delta.colwise().sum().transpose();
    if (l > 0) delta = delta * params.layers[l].weight;
  }
  if (!result.grad.all_finite()) throw Error(ErrorKind::non_finite, "non-finite gradient");
  return result;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  ModelParams first_moment;
  ModelParams second_moment;
  std::uint64_t step = 0;
  AdamConfig config;

  static AdamState zeros_like(const ModelParams& params, AdamConfig config = {}) {
    return {ModelParams::zeros(params.arch), ModelParams::zeros(params.arch), 0, config};
  }
};

/// In-place bias-corrected Adam update.
inline void adam_update(ModelParams& params, const ModelParams& grad, AdamState& state) {
  if (!params.same_shape(grad) || !params.same_shape(state.first_moment) || !params.same_shape(state.second_moment))
    throw Error(ErrorKind::shape_mismatch, "adam operands differ in shape");
  if (!grad.all_finite()) throw Error(ErrorKind::non_finite, "non-finite gradient passed to adam");
  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  auto update = [&](auto& theta, const auto& g, auto& m, auto& v) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    theta.array() -= c.learning_rate * (m.array() / correct1) / ((v.array() / correct2).sqrt() + c.epsilon);
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight, grad.layers[l].weight, state.first_moment.layers[l].weight,
           state.second_moment.layers[l].weight);
    update(params.layers[l].bias, grad.layers[l].bias, state.first_moment.layers[l].bias,
           state.second_moment.layers[l].bias);
  }
}

inline std::pair<ModelParams, AdamState> adam_step(ModelParams params, const ModelParams& grad, AdamState state) {
  adam_update(params, grad, state);
  return {std::move(params), std::move(state)};
}

// ---------------------------------------------------------------------------
// Serialisation

inline io::Json architecture_to_json(const Architecture& arch) {
  return {{"input_dim", arch.input_dim}, {"hidden_dims", arch.hidden_dims}, {"activation", "relu"},
          {"output", "sigmoid"}};
}

inline Architecture architecture_from_json(const io::Json& j) {
  Architecture a;
  a.input_dim = j.at("input_dim").get<std::size_t>();
  a.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  a.validate();
  return a;
}

struct ModelDocument {
  ModelParams params;
  std::optional<Standardisation> standardisation;
  io::Json provenance = io::Json::object();
};

inline constexpr int kModelFormatVersion = 1;

inline io::Json model_to_json(const ModelDocument& doc) {
  io::Json j;
  j["format"] = "stabreg-model";
  j["version"] = kModelFormatVersion;
  j["architecture"] = architecture_to_json(doc.params.arch);
  io::Json layers = io::Json::array();
  for (const auto& l : doc.params.layers) {
    io::Json lj;
    lj["rows"] = l.weight.rows();
    lj["cols"] = l.weight.cols();
    lj["weight"] = std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size());
    lj["bias"] = std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  j["standardisation"] = doc.standardisation ? standardisation_to_json(*doc.standardisation) : io::Json(nullptr);
  j["provenance"] = doc.provenance;
  return j;
}

inline ModelDocument model_from_json(const io::Json& j) {
  if (j.value("format", "") != "stabreg-model") throw Error(ErrorKind::parse_error, "not a stabreg model document");
  if (j.at("version").get<int>() != kModelFormatVersion)
    throw Error(ErrorKind::parse_error, "unsupported model format version");
  ModelDocument doc;
  doc.params = ModelParams::zeros(architecture_from_json(j.at("architecture")));
  const auto& layers = j.at("layers");
  if (layers.size() != doc.params.layers.size()) throw Error(ErrorKind::parse_error, "layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& dst = doc.params.layers[l];
    const auto w = layers[l].at("weight").get<std::vector<double>>();
    const auto b = layers[l].at("bias").get<std::vector<double>>();
    if (w.size() != static_cast<std::size_t>(dst.weight.size()) || b.size() != static_cast<std::size_t>(dst.bias.size()))
      throw Error(ErrorKind::parse_error, "layer " + std::to_string(l) + " has the wrong size");
    std::copy(w.begin(), w.end(), dst.weight.data());
    std::copy(b.begin(), b.end(), dst.bias.data());
  }
  if (!j.at("standardisation").is_null()) doc.standardisation = standardisation_from_json(j.at("standardisation"));
  doc.provenance = j.at("provenance");
  return doc;
}

}  // namespace stabreg
