// Training-free conditional diffusion labels: a nearest-neighbor Gaussian
// mixture score and a deterministic reverse ODE that maps latent z to an
// increment sample y conditioned on the state x.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bflow/dataset.hpp"
#include "bflow/knn.hpp"
#include "bflow/neural.hpp"
#include "bflow/parallel.hpp"
#include "bflow/rng.hpp"

namespace bflow {

struct ScheduleCoeffs {
  double alpha, beta2, b, sigma2;
};

/// alpha = 1 - tau, beta^2 = tau on [eps_clip, 1 - eps_clip].
struct NoiseSchedule {
  double eps_clip = 1e-4;

  void validate() const {
    if (!(eps_clip > 0 && eps_clip < 0.5)) throw ConfigError("NoiseSchedule: eps_clip must lie in (0, 0.5)");
  }

  static double alpha(double tau) { return 1.0 - tau; }
  static double beta2(double tau) { return tau; }
  static double drift(double tau) { return -1.0 / (1.0 - tau); }
  static double sigma2(double tau) { return (1.0 + tau) / (1.0 - tau); }

  ScheduleCoeffs coeffs(double tau) const {
    if (!(tau >= eps_clip && tau <= 1.0 - eps_clip))
      throw DomainError("schedule_coeffs: tau=" + std::to_string(tau) + " outside [" + std::to_string(eps_clip) +
                        ", " + std::to_string(1.0 - eps_clip) + "]");
    return {alpha(tau), beta2(tau), drift(tau), sigma2(tau)};
  }
};

inline ScheduleCoeffs schedule_coeffs(double tau, const NoiseSchedule& s = {}) { return s.coeffs(tau); }

/// Increments of the neighbors of one query state, row-major k x d.
struct ScoreContext {
  std::size_t dims = 0;
  std::vector<double> dx;

  std::size_t size() const { return dims ? dx.size() / dims : 0; }
};

inline ScoreContext make_context(std::span<const double> dx_rows, std::size_t dims) {
  if (dims == 0 || dx_rows.size() % dims) throw ShapeError("ScoreContext: row width mismatch");
  return {dims, std::vector<double>(dx_rows.begin(), dx_rows.end())};
}

namespace detail {

// Writes the mixture score into `out`; `w` is scratch of size k.
inline void mixture_score(const ScoreContext& ctx, const double* z, double alpha, double beta2, double* out,
                          std::vector<double>& w) {
  const std::size_t d = ctx.dims, k = ctx.size();
  w.resize(k);
  const double* dx = ctx.dx.data();
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = z[c] - alpha * dx[j * d + c];
      s += v * v;
    }
    w[j] = -s / (2.0 * beta2);
    best = std::max(best, w[j]);
  }
  double total = 0;
  for (std::size_t j = 0; j < k; ++j) {
    w[j] = std::exp(w[j] - best);
    total += w[j];
  }
  if (!(total > 0) || !std::isfinite(total)) throw NumericError("estimate_score: mixture weights vanished");
  std::array<double, kMaxStateDims> mean{};
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < d; ++c) mean[c] += w[j] * dx[j * d + c];
  for (std::size_t c = 0; c < d; ++c) out[c] = (alpha * mean[c] / total - z[c]) / beta2;
}

}  // namespace detail

/// Score of the noised neighbor mixture at (z, tau).
inline std::vector<double> estimate_score(const ScoreContext& ctx, std::span<const double> z, double tau,
                                          const NoiseSchedule& sched = {}) {
  if (ctx.size() == 0) throw ConfigError("estimate_score: empty neighbor set");
  if (z.size() != ctx.dims) throw ShapeError("estimate_score: z width mismatch");
  const auto c = sched.coeffs(tau);
  std::vector<double> out(ctx.dims), w;
  detail::mixture_score(ctx, z.data(), c.alpha, c.beta2, out.data(), w);
  return out;
}

/// Time grid of the explicit Euler solver. UniformTau takes equal steps in
/// tau; SqrtTau takes equal steps in s = sqrt(tau), which resolves the
/// sqrt(tau) behavior of the flow near tau = 0 with far fewer steps.
enum class OdeGrid { UniformTau, SqrtTau };

inline std::string to_string(OdeGrid g) { return g == OdeGrid::UniformTau ? "uniform_tau" : "sqrt_tau"; }

inline OdeGrid ode_grid_from_string(const std::string& s) {
  if (s == "uniform_tau") return OdeGrid::UniformTau;
  if (s == "sqrt_tau") return OdeGrid::SqrtTau;
  throw ConfigError("unknown ODE grid '" + s + "' (expected uniform_tau or sqrt_tau)");
}

namespace detail {

inline void reverse_ode_into(const ScoreContext& ctx, const double* z1, std::size_t k_steps, const NoiseSchedule& sched,
                             OdeGrid grid, double* out, std::vector<double>& scratch) {
  const std::size_t d = ctx.dims;
  const double lo = sched.eps_clip, hi = 1.0 - sched.eps_clip;
  std::array<double, kMaxStateDims> Z{}, S{};
  std::copy(z1, z1 + d, Z.begin());
  const double s_hi = std::sqrt(hi), s_lo = std::sqrt(lo);
  const double h = grid == OdeGrid::UniformTau ? (hi - lo) / static_cast<double>(k_steps)
                                                : (s_hi - s_lo) / static_cast<double>(k_steps);
  for (std::size_t k = 0; k < k_steps; ++k) {
    double tau, dt;
    if (grid == OdeGrid::UniformTau) {
      tau = hi - static_cast<double>(k) * h;
      dt = h;
    } else {
      const double s = s_hi - static_cast<double>(k) * h;
      tau = s * s;
      dt = 2.0 * s * h;  // dtau = 2 s ds
    }
    const double alpha = NoiseSchedule::alpha(tau), beta2 = NoiseSchedule::beta2(tau);
    const double b = NoiseSchedule::drift(tau), sig2 = NoiseSchedule::sigma2(tau);
    mixture_score(ctx, Z.data(), alpha, beta2, S.data(), scratch);
    for (std::size_t c = 0; c < d; ++c) Z[c] -= dt * (b * Z[c] - 0.5 * sig2 * S[c]);
    for (std::size_t c = 0; c < d; ++c)
      if (!std::isfinite(Z[c]))
        throw NumericError("reverse_ode_solve: non-finite state at tau=" + std::to_string(tau) + ", step " +
                           std::to_string(k));
  }
  std::copy(Z.begin(), Z.begin() + static_cast<std::ptrdiff_t>(d), out);
}

}  // namespace detail

/// Integrates the probability-flow ODE from tau = 1 - eps to tau = eps.
inline std::vector<double> reverse_ode_solve(const ScoreContext& ctx, std::span<const double> z1, std::size_t k_steps,
                                             const NoiseSchedule& sched = {}, OdeGrid grid = OdeGrid::UniformTau) {
  sched.validate();
  if (ctx.size() == 0) throw ConfigError("reverse_ode_solve: empty neighbor set");
  if (z1.size() != ctx.dims) throw ShapeError("reverse_ode_solve: z width mismatch");
  if (k_steps == 0) throw ConfigError("reverse_ode_solve: K_steps must be positive");
  if (!all_finite(z1)) throw NumericError("reverse_ode_solve: non-finite initial state " + format_state(z1));
  std::vector<double> out(ctx.dims), scratch;
  detail::reverse_ode_into(ctx, z1.data(), k_steps, sched, grid, out.data(), scratch);
  return out;
}

struct LabelerConfig {
  std::size_t k_nn = 2048;
  std::size_t k_steps = 5000;
  double eps_clip = 1e-4;
  std::size_t labels_per_x = 1;
  OdeGrid grid = OdeGrid::UniformTau;
  /// Label at most this many rows, drawn without replacement. 0 labels all.
  std::size_t max_rows = 0;
  /// Ablation: pool and label exiting rows too.
  bool include_exits = false;

  void validate() const {
    if (k_nn == 0) throw ConfigError("labeler: K_nn must be positive");
    if (k_steps == 0) throw ConfigError("labeler: K_steps must be positive");
    if (labels_per_x == 0) throw ConfigError("labeler: labels_per_x must be positive");
    NoiseSchedule{eps_clip}.validate();
  }
};

struct LabelResult {
  LabeledSet set;
  std::size_t pool_size = 0;
  std::size_t neighbors = 0;
  std::vector<std::string> warnings;
};

/// Nearest-neighbor lookup over the labeler's pool in std-normalized
/// coordinates, with minimal images along periodic dimensions.
class NeighborIndex {
 public:
  NeighborIndex(const ObservationSet& obs, std::vector<std::size_t> pool, const DomainSpec* domain)
      : obs_(&obs), pool_(std::move(pool)) {
    const std::size_t d = obs.dims;
    std::vector<double> rows(pool_.size() * d);
    for (std::size_t i = 0; i < pool_.size(); ++i)
      std::copy_n(obs.x.begin() + static_cast<std::ptrdiff_t>(pool_[i] * d), d,
                  rows.begin() + static_cast<std::ptrdiff_t>(i * d));
    const FeatureScaler sc = FeatureScaler::fit(rows, d);
    std::vector<double> period(d, 0.0);
    if (domain) {
      if (domain->dims() != d) throw ShapeError("NeighborIndex: domain dimension mismatch");
      for (std::size_t k = 0; k < d; ++k)
        if (domain->behavior[k] == Boundary::Periodic) period[k] = domain->period(k);
    }
    tree_ = KdTree(rows, d, sc.scale, period);
  }

  std::size_t pool_size() const { return pool_.size(); }

  ScoreContext context(std::span<const double> x, std::size_t k) const {
    const std::size_t d = obs_->dims;
    const auto nb = tree_.query(x, k);
    ScoreContext ctx{d, std::vector<double>(nb.size() * d)};
    for (std::size_t j = 0; j < nb.size(); ++j) {
      const auto row = obs_->dx_row(pool_[nb[j].index]);
      std::copy(row.begin(), row.end(), ctx.dx.begin() + static_cast<std::ptrdiff_t>(j * d));
    }
    return ctx;
  }

 private:
  const ObservationSet* obs_;
  std::vector<std::size_t> pool_;
  KdTree tree_;
};

/// Labels (x, z, y) for the non-exiting rows of `obs`. The latent z of row m
/// comes from its own stream, so results do not depend on thread count or on
/// which other rows were selected.
inline LabelResult build_labeled_set(const ObservationSet& obs, const LabelerConfig& cfg, std::uint64_t seed,
                                     const DomainSpec* domain = nullptr) {
  cfg.validate();
  const std::size_t d = obs.dims;
  std::vector<std::size_t> pool;
  for (std::size_t m = 0; m < obs.size(); ++m)
    if (cfg.include_exits || obs.gamma[m] == 0) pool.push_back(m);
  if (pool.empty()) throw ConfigError("build_labeled_set: no non-exiting rows to label");

  LabelResult res;
  res.pool_size = pool.size();
  res.neighbors = std::min(cfg.k_nn, pool.size());
  if (res.neighbors < cfg.k_nn)
    res.warnings.push_back("only " + std::to_string(pool.size()) + " pool rows; using " +
                           std::to_string(res.neighbors) + " neighbors instead of " + std::to_string(cfg.k_nn));

  std::vector<std::size_t> rows = pool;
  if (cfg.max_rows > 0 && cfg.max_rows < rows.size()) {
    RngStream pick(derive_seed(seed, "label-subsample"), 0);
    for (std::size_t i = 0; i < cfg.max_rows; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(pick() % (rows.size() - i));
      std::swap(rows[i], rows[j]);
    }
    rows.resize(cfg.max_rows);
    std::sort(rows.begin(), rows.end());
  }

  const NeighborIndex index(obs, std::move(pool), domain);
  const NoiseSchedule sched{cfg.eps_clip};
  const std::size_t L = cfg.labels_per_x, n_out = rows.size() * L;
  LabeledSet& out = res.set;
  out.dims = d;
  out.dt_obs = obs.dt_obs;
  out.x.resize(n_out * d);
  out.z.resize(n_out * d);
  out.y.resize(n_out * d);
  const std::uint64_t zseed = derive_seed(seed, "label-z");
  parallel_for(rows.size(), 16, [&](std::size_t begin, std::size_t end) {
    std::vector<double> scratch;
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t m = rows[i];
      const auto x = obs.x_row(m);
      const ScoreContext ctx = index.context(x, res.neighbors);
      RngStream rng(zseed, m);
      for (std::size_t j = 0; j < L; ++j) {
        const std::size_t r = (i * L + j) * d;
        std::copy(x.begin(), x.end(), out.x.begin() + static_cast<std::ptrdiff_t>(r));
        for (std::size_t c = 0; c < d; ++c) out.z[r + c] = rng.normal();
        detail::reverse_ode_into(ctx, out.z.data() + r, cfg.k_steps, sched, cfg.grid, out.y.data() + r, scratch);
      }
    }
  });
  return res;
}

}  // namespace bflow
