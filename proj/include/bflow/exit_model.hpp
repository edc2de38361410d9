// Exit-probability classifier F: state -> probability of leaving the domain
// within one observation interval, fit by BCE to the exit indicators.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "bflow/dataset.hpp"
#include "bflow/neural.hpp"

namespace bflow {

inline constexpr std::uint32_t kExitCheckpointKind = 1;
inline constexpr double kKlFloor = 1e-8;

struct ExitModelConfig {
  std::vector<std::size_t> hidden{256, 256, 256};
  Activation activation = Activation::LeakyReLU;
  double leaky_slope = 0.01;
  double dropout = 0.2;
  double lr = 5e-3;
  double weight_decay = 1e-5;
  std::size_t epochs = 100;
  std::size_t batch_size = 1024;
  bool cosine_decay = false;

  void validate() const {
    if (hidden.empty()) throw ConfigError("exit model: need at least one hidden layer");
    if (epochs == 0) throw ConfigError("exit model: epochs must be positive");
    if (batch_size == 0) throw ConfigError("exit model: batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("exit model: lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("exit model: weight_decay must be non-negative");
  }
};

struct ExitModel {
  MlpModel net;
  FeatureScaler scaler;
  double dt_obs = 0;

  std::size_t dims() const { return scaler.dims(); }

  /// Column-per-sample normalized inputs from flat row-major states.
  Matrix normalized(std::span<const double> rows) const {
    const std::size_t d = dims();
    const std::size_t n = rows.size() / d;
    Matrix X(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k)
        X(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = scaler.forward(k, rows[i * d + k]);
    return X;
  }
};

struct ExitTrainResult {
  ExitModel model;
  TrainingCurve curve;
};

/// Fits F on every triple (x_m, gamma_m). Refuses empty or single-class data,
/// whose BCE minimizer is a degenerate constant.
inline ExitTrainResult train_exit(const ObservationSet& obs, const ExitModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (obs.size() == 0) throw ConfigError("train_exit: observation set is empty");
  const std::size_t exits = obs.n_exits();
  if (exits == 0 || exits == obs.size())
    throw ConfigError("train_exit: dataset holds a single class (" + std::to_string(exits) + " exits in " +
                      std::to_string(obs.size()) + " rows); the fitted probability would be a constant");
  ExitModel model;
  model.dt_obs = obs.dt_obs;
  model.scaler = FeatureScaler::fit(obs.x, obs.dims);
  MlpSpec spec;
  spec.layer_sizes.push_back(obs.dims);
  spec.layer_sizes.insert(spec.layer_sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  spec.layer_sizes.push_back(1);
  spec.hidden = cfg.activation;
  spec.output = Activation::Sigmoid;
  spec.leaky_slope = cfg.leaky_slope;
  spec.dropout = cfg.dropout;
  model.net = make_mlp(spec, derive_seed(seed, "exit-init"));

  const Matrix X = model.normalized(obs.x);
  Matrix Y(1, static_cast<Eigen::Index>(obs.size()));
  for (std::size_t m = 0; m < obs.size(); ++m) Y(0, static_cast<Eigen::Index>(m)) = obs.gamma[m];
  TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.cosine_decay = cfg.cosine_decay;
  opt.seed = derive_seed(seed, "exit-train");
  ExitTrainResult res{std::move(model), {}};
  res.curve = train_mlp(res.model.net, X, Y, LossKind::BinaryCrossEntropy, opt);
  return res;
}

/// Eval-mode exit probabilities for flat row-major states.
inline std::vector<double> predict_exit(const ExitModel& m, std::span<const double> rows) {
  if (m.dims() == 0 || rows.size() % m.dims()) throw ShapeError("predict_exit: state width mismatch");
  const Matrix out = predict(m.net, m.normalized(rows));
  return std::vector<double>(out.data(), out.data() + out.size());
}

inline double predict_exit_one(const ExitModel& m, std::span<const double> x) {
  if (x.size() != m.dims()) throw ShapeError("predict_exit: state width mismatch");
  return predict_exit(m, x).front();
}

/// sum_i w_i p_i log(p_i / q_i) with both arguments floored at 1e-8.
/// Empty weights mean unit weights.
inline double kl_divergence(std::span<const double> p_ref, std::span<const double> p_model,
                            std::span<const double> weights = {}) {
  if (p_ref.size() != p_model.size()) throw ShapeError("kl_divergence: grids differ in size");
  if (!weights.empty() && weights.size() != p_ref.size()) throw ShapeError("kl_divergence: weights differ in size");
  double kl = 0;
  for (std::size_t i = 0; i < p_ref.size(); ++i) {
    if (!(p_ref[i] >= 0.0 && p_ref[i] <= 1.0)) throw DomainError("kl_divergence: reference value outside [0, 1]");
    const double p = std::max(p_ref[i], kKlFloor);
    const double q = std::max(p_model[i], kKlFloor);
    kl += (weights.empty() ? 1.0 : weights[i]) * p * std::log(p / q);
  }
  return kl;
}

// Extra block: [dims, dt_obs, mean[d], scale[d]]
inline void save_exit_model(const ExitModel& m, const std::string& path) {
  Checkpoint c{m.net, kExitCheckpointKind, {static_cast<double>(m.dims()), m.dt_obs}};
  m.scaler.append_to(c.extra);
  save_checkpoint(c, path);
}

inline ExitModel load_exit_model(const std::string& path, std::optional<std::size_t> expected_dims = {}) {
  Checkpoint c = load_checkpoint(path, kExitCheckpointKind);
  if (c.extra.size() < 2) throw LoadError(path + ": exit checkpoint lacks its normalization block");
  ExitModel m;
  const auto d = static_cast<std::size_t>(c.extra[0]);
  if (d != c.model.input_dim()) throw LoadError(path + ": field 'dims' disagrees with the network input width");
  if (expected_dims && *expected_dims != d)
    throw LoadError(path + ": dims is " + std::to_string(d) + " but configuration expects " +
                    std::to_string(*expected_dims));
  m.dt_obs = c.extra[1];
  std::size_t pos = 2;
  m.scaler = FeatureScaler::read_from(c.extra, pos, d);
  m.net = std::move(c.model);
  if (m.net.spec.output != Activation::Sigmoid || m.net.output_dim() != 1)
    throw LoadError(path + ": exit checkpoint must have one sigmoid output");
  return m;
}

}  // namespace bflow
