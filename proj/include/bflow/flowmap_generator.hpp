// One-step generator G(x, z) -> increment, trained on reverse-ODE labels, and
// the hybrid sampler that lets the exit model decide termination.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bflow/dataset.hpp"
#include "bflow/exit_model.hpp"
#include "bflow/neural.hpp"
#include "bflow/parallel.hpp"
#include "bflow/sde.hpp"

namespace bflow {

inline constexpr std::uint32_t kGeneratorCheckpointKind = 2;

struct GeneratorConfig {
  std::vector<std::size_t> hidden{128};
  Activation activation = Activation::ReLU;
  double leaky_slope = 0.01;
  double lr = 1e-3;
  double weight_decay = 0;
  std::size_t epochs = 5000;
  std::size_t batch_size = 1024;
  bool cosine_decay = false;

  void validate() const {
    if (hidden.empty()) throw ConfigError("generator: need at least one hidden layer");
    if (epochs == 0) throw ConfigError("generator: epochs must be positive");
    if (batch_size == 0) throw ConfigError("generator: batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("generator: lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("generator: weight_decay must be non-negative");
  }
};

/// Input is (normalized x, raw z); the network predicts normalized increments.
struct GeneratorModel {
  MlpModel net;
  FeatureScaler x_scaler;
  FeatureScaler y_scaler;
  double dt_obs = 0;

  std::size_t dims() const { return x_scaler.dims(); }

  Matrix inputs(std::span<const double> x_rows, std::span<const double> z_rows) const {
    const std::size_t d = dims();
    if (x_rows.size() != z_rows.size() || x_rows.size() % d) throw ShapeError("generator: x/z row mismatch");
    const std::size_t n = x_rows.size() / d;
    Matrix X(static_cast<Eigen::Index>(2 * d), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        X(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = x_scaler.forward(k, x_rows[i * d + k]);
        X(static_cast<Eigen::Index>(d + k), static_cast<Eigen::Index>(i)) = z_rows[i * d + k];
      }
    return X;
  }
};

struct GeneratorTrainResult {
  GeneratorModel model;
  TrainingCurve curve;
};

inline GeneratorTrainResult train_generator(const LabeledSet& data, const GeneratorConfig& cfg, std::uint64_t seed,
                                            const std::function<void(std::size_t, double)>& on_epoch = {}) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("train_generator: labeled set is empty");
  const std::size_t d = data.dims;
  GeneratorModel g;
  g.dt_obs = data.dt_obs;
  g.x_scaler = FeatureScaler::fit(data.x, d);
  g.y_scaler = FeatureScaler::fit(data.y, d);
  MlpSpec spec;
  spec.layer_sizes.push_back(2 * d);
  spec.layer_sizes.insert(spec.layer_sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  spec.layer_sizes.push_back(d);
  spec.hidden = cfg.activation;
  spec.output = Activation::Identity;
  spec.leaky_slope = cfg.leaky_slope;
  g.net = make_mlp(spec, derive_seed(seed, "gen-init"));

  const Matrix X = g.inputs(data.x, data.z);
  Matrix Y(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t k = 0; k < d; ++k)
      Y(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = g.y_scaler.forward(k, data.y[i * d + k]);
  TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.cosine_decay = cfg.cosine_decay;
  opt.seed = derive_seed(seed, "gen-train");
  GeneratorTrainResult res{std::move(g), {}};
  res.curve = train_mlp(res.model.net, X, Y, LossKind::MeanSquared, opt, on_epoch);
  return res;
}

/// Increments G(x, z) for flat row-major x and z.
inline std::vector<double> predict_increment(const GeneratorModel& g, std::span<const double> x_rows,
                                             std::span<const double> z_rows) {
  const Matrix out = predict(g.net, g.inputs(x_rows, z_rows));
  const std::size_t d = g.dims(), n = static_cast<std::size_t>(out.cols());
  std::vector<double> dx(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k)
      dx[i * d + k] = g.y_scaler.inverse(k, out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)));
  return dx;
}

// Extra block: [dims, dt_obs, x mean[d], x scale[d], y mean[d], y scale[d]]
inline void save_generator(const GeneratorModel& g, const std::string& path) {
  Checkpoint c{g.net, kGeneratorCheckpointKind, {static_cast<double>(g.dims()), g.dt_obs}};
  g.x_scaler.append_to(c.extra);
  g.y_scaler.append_to(c.extra);
  save_checkpoint(c, path);
}

inline GeneratorModel load_generator(const std::string& path, std::optional<std::size_t> expected_dims = {}) {
  Checkpoint c = load_checkpoint(path, kGeneratorCheckpointKind);
  if (c.extra.size() < 2) throw LoadError(path + ": generator checkpoint lacks its normalization block");
  const auto d = static_cast<std::size_t>(c.extra[0]);
  if (2 * d != c.model.input_dim() || d != c.model.output_dim())
    throw LoadError(path + ": field 'dims' disagrees with the network shape");
  if (expected_dims && *expected_dims != d)
    throw LoadError(path + ": dims is " + std::to_string(d) + " but configuration expects " +
                    std::to_string(*expected_dims));
  GeneratorModel g;
  g.dt_obs = c.extra[1];
  std::size_t pos = 2;
  g.x_scaler = FeatureScaler::read_from(c.extra, pos, d);
  g.y_scaler = FeatureScaler::read_from(c.extra, pos, d);
  g.net = std::move(c.model);
  return g;
}

// ---------------------------------------------------------------------------
// Sampling

/// Batched exit probability: rows (n x d) -> p (n).
using ExitFn = std::function<void(std::span<const double>, std::span<double>)>;
/// Batched increments: rows (n x d), z (n x d) -> dx (n x d).
using StepFn = std::function<void(std::span<const double>, std::span<const double>, std::span<double>)>;

inline ExitFn exit_fn(const ExitModel& f) {
  return [&f](std::span<const double> rows, std::span<double> p) {
    const auto v = predict_exit(f, rows);
    std::copy(v.begin(), v.end(), p.begin());
  };
}

inline ExitFn constant_exit_fn(double p) {
  return [p](std::span<const double>, std::span<double> out) { std::fill(out.begin(), out.end(), p); };
}

inline StepFn step_fn(const GeneratorModel& g) {
  return [&g](std::span<const double> x, std::span<const double> z, std::span<double> dx) {
    const auto v = predict_increment(g, x, z);
    std::copy(v.begin(), v.end(), dx.begin());
  };
}

/// Hybrid: the exit model alone terminates and proposals past absorbing
/// bounds are folded back. GeometricOnly: no exit model; a particle exits
/// when its generated state leaves the domain.
enum class ExitMode { Hybrid, GeometricOnly };

struct GenerateOptions {
  std::size_t n_steps_max = 0;
  ExitMode mode = ExitMode::Hybrid;
  std::size_t chunk = 1024;
  /// Applied to each generated state after boundary handling.
  std::function<void(std::span<double>)> project;
};

struct GenerationStats {
  std::size_t generator_evals = 0;
  std::size_t exit_evals = 0;
  std::size_t clamp_events = 0;
};

/// Trajectory i draws its initial state, then per step one uniform (hybrid
/// mode) and d normals, from RngStream(seed, i). Chunks are fixed index
/// ranges, so output does not depend on the worker count.
inline std::vector<Trajectory> generate_ensemble(const ExitFn& F, const StepFn& G, const DomainSpec& domain,
                                                 double dt_obs, const InitialSampler& x0_sampler, std::size_t n_traj,
                                                 const GenerateOptions& opt, std::uint64_t seed,
                                                 GenerationStats* stats = nullptr) {
  if (n_traj == 0) throw ConfigError("generate_ensemble: n_traj must be at least 1");
  if (opt.n_steps_max == 0) throw ConfigError("generate_ensemble: n_steps_max must be positive");
  if (opt.mode == ExitMode::Hybrid && !F) throw ConfigError("generate_ensemble: hybrid mode needs an exit model");
  domain.validate();
  const std::size_t d = domain.dims(), chunk = std::max<std::size_t>(opt.chunk, 1);
  std::vector<Trajectory> out(n_traj);
  std::atomic<std::size_t> gen_evals{0}, exit_evals{0}, clamps{0};

  parallel_for((n_traj + chunk - 1) / chunk, 1, [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const std::size_t begin = c * chunk, end = std::min(n_traj, begin + chunk);
      std::vector<RngStream> rngs;
      std::vector<std::size_t> active;
      std::vector<double> x, z, dx, p;
      for (std::size_t i = begin; i < end; ++i) {
        rngs.emplace_back(seed, i);
        Trajectory& t = out[i];
        t.dims = d;
        t.dt_obs = dt_obs;
        t.states.resize(d);
        x0_sampler(rngs.back(), t.states);
        if (!domain.inside(t.state(0)))
          throw DomainError("generate_ensemble: initial state outside domain " + format_state(t.state(0)));
        t.states.reserve((opt.n_steps_max + 1) * d);
        active.push_back(i);
      }
      std::size_t local_gen = 0, local_exit = 0, local_clamp = 0;
      for (std::size_t n = 0; n < opt.n_steps_max && !active.empty(); ++n) {
        const std::size_t na = active.size();
        x.resize(na * d);
        for (std::size_t a = 0; a < na; ++a) {
          const Trajectory& t = out[active[a]];
          std::copy_n(t.states.end() - static_cast<std::ptrdiff_t>(d), d, x.begin() + static_cast<std::ptrdiff_t>(a * d));
        }
        std::vector<std::size_t> cont;
        cont.reserve(na);
        if (opt.mode == ExitMode::Hybrid) {
          p.resize(na);
          F(x, p);
          local_exit += na;
          for (std::size_t a = 0; a < na; ++a) {
            Trajectory& t = out[active[a]];
            if (rngs[active[a] - begin].uniform() < p[a]) {
              t.exited = true;
              t.final_index = n + 1;
            } else {
              cont.push_back(a);
            }
          }
        } else {
          for (std::size_t a = 0; a < na; ++a) cont.push_back(a);
        }
        const std::size_t nc = cont.size();
        if (nc == 0) {
          active.clear();
          break;
        }
        std::vector<double> xc(nc * d);
        z.resize(nc * d);
        dx.resize(nc * d);
        for (std::size_t j = 0; j < nc; ++j) {
          std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(cont[j] * d), d, xc.begin() + static_cast<std::ptrdiff_t>(j * d));
          RngStream& r = rngs[active[cont[j]] - begin];
          for (std::size_t k = 0; k < d; ++k) z[j * d + k] = r.normal();
        }
        G(xc, z, dx);
        local_gen += nc;
        std::vector<std::size_t> next;
        next.reserve(nc);
        for (std::size_t j = 0; j < nc; ++j) {
          const std::size_t i = active[cont[j]];
          Trajectory& t = out[i];
          std::array<double, kMaxStateDims> s{};
          for (std::size_t k = 0; k < d; ++k) s[k] = xc[j * d + k] + dx[j * d + k];
          const std::span<double> ss(s.data(), d);
          if (!all_finite(ss))
            throw NumericError("generate: non-finite state in trajectory " + std::to_string(i) + " at step " +
                               std::to_string(n) + " from " + format_state(std::span<const double>(xc).subspan(j * d, d)));
          domain.apply_non_absorbing(ss);
          if (opt.project) opt.project(ss);
          if (opt.mode == ExitMode::Hybrid) {
            if (domain.fold_into_absorbing(ss)) ++local_clamp;
          } else if (domain.violates_absorbing(ss)) {
            t.states.insert(t.states.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(d));
            t.exited = true;
            t.final_index = n + 1;
            continue;
          }
          t.states.insert(t.states.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(d));
          next.push_back(i);
        }
        active = std::move(next);
      }
      for (std::size_t i : active) out[i].final_index = opt.n_steps_max;
      gen_evals += local_gen;
      exit_evals += local_exit;
      clamps += local_clamp;
    }
  });
  if (stats) {
    stats->generator_evals += gen_evals;
    stats->exit_evals += exit_evals;
    stats->clamp_events += clamps;
  }
  return out;
}

inline Trajectory generate_trajectory(const ExitFn& F, const StepFn& G, const DomainSpec& domain, double dt_obs,
                                      std::span<const double> x0, const GenerateOptions& opt, std::uint64_t seed,
                                      GenerationStats* stats = nullptr) {
  auto one = generate_ensemble(F, G, domain, dt_obs, point_sampler(std::vector<double>(x0.begin(), x0.end())), 1, opt,
                               seed, stats);
  return std::move(one.front());
}

}  // namespace bflow
