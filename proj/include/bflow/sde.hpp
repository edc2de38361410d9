// Euler-Maruyama simulation of autonomous diagonal-noise SDEs in boxes with
// per-dimension boundary behavior and first-exit termination.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bflow/core.hpp"
#include "bflow/parallel.hpp"
#include "bflow/rng.hpp"

namespace bflow {

inline constexpr std::size_t kMaxStateDims = 8;

/// Boundary behavior of one coordinate.
///
/// AbsorbingUpper absorbs at `upper` and reflects at `lower`; AbsorbingLower is
/// the mirror image. Free ignores the bounds entirely.
enum class Boundary { AbsorbingBoth, AbsorbingUpper, AbsorbingLower, Reflecting, Periodic, Free };

inline bool absorbs_lower(Boundary b) {
  return b == Boundary::AbsorbingBoth || b == Boundary::AbsorbingLower;
}
inline bool absorbs_upper(Boundary b) {
  return b == Boundary::AbsorbingBoth || b == Boundary::AbsorbingUpper;
}
inline bool reflects_lower(Boundary b) {
  return b == Boundary::Reflecting || b == Boundary::AbsorbingUpper;
}
inline bool reflects_upper(Boundary b) {
  return b == Boundary::Reflecting || b == Boundary::AbsorbingLower;
}

inline std::string to_string(Boundary b) {
  switch (b) {
    case Boundary::AbsorbingBoth: return "absorbing";
    case Boundary::AbsorbingUpper: return "absorbing_upper";
    case Boundary::AbsorbingLower: return "absorbing_lower";
    case Boundary::Reflecting: return "reflecting";
    case Boundary::Periodic: return "periodic";
    case Boundary::Free: return "free";
  }
  return "?";
}

/// Axis-aligned domain. Absorbing bounds are open: a state exits once it
/// reaches or passes them.
struct DomainSpec {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<Boundary> behavior;

  std::size_t dims() const { return behavior.size(); }

  void validate(bool require_absorbing = false) const {
    if (lower.size() != dims() || upper.size() != dims())
      throw ShapeError("DomainSpec: lower/upper/behavior sizes differ");
    if (dims() == 0 || dims() > kMaxStateDims)
      throw ConfigError("DomainSpec: dimension must be in [1, " + std::to_string(kMaxStateDims) + "]");
    for (std::size_t i = 0; i < dims(); ++i) {
      if (behavior[i] == Boundary::Free) continue;
      if (!(std::isfinite(lower[i]) && std::isfinite(upper[i]) && lower[i] < upper[i]))
        throw ConfigError("DomainSpec: dimension " + std::to_string(i) + " needs finite lower < upper");
    }
    if (require_absorbing && !has_absorbing())
      throw ConfigError("DomainSpec: exit statistics need at least one absorbing bound");
  }

  bool has_absorbing() const {
    return std::any_of(behavior.begin(), behavior.end(),
                       [](Boundary b) { return absorbs_lower(b) || absorbs_upper(b); });
  }

  double period(std::size_t i) const { return upper[i] - lower[i]; }

  /// True when `x` reached or crossed any absorbing bound.
  bool violates_absorbing(std::span<const double> x) const {
    for (std::size_t i = 0; i < dims(); ++i) {
      if (absorbs_lower(behavior[i]) && !(x[i] > lower[i])) return true;
      if (absorbs_upper(behavior[i]) && !(x[i] < upper[i])) return true;
    }
    return false;
  }

  /// Strictly inside absorbing bounds and within closed reflecting bounds.
  bool inside(std::span<const double> x) const {
    if (x.size() != dims()) return false;
    if (!all_finite(x) || violates_absorbing(x)) return false;
    for (std::size_t i = 0; i < dims(); ++i) {
      if (reflects_lower(behavior[i]) && x[i] < lower[i]) return false;
      if (reflects_upper(behavior[i]) && x[i] > upper[i]) return false;
    }
    return true;
  }

  /// Periodic wrap into [lower, upper) and fold-back at reflecting sides.
  /// Absorbing sides are left untouched.
  void apply_non_absorbing(std::span<double> x) const {
    for (std::size_t i = 0; i < dims(); ++i) {
      const Boundary b = behavior[i];
      if (b == Boundary::Periodic) {
        x[i] = wrap_periodic(x[i], lower[i], upper[i]);
        continue;
      }
      const bool lo = reflects_lower(b), hi = reflects_upper(b);
      if (!lo && !hi) continue;
      // Repeated folding handles overshoots larger than the interval.
      for (int guard = 0; guard < 64; ++guard) {
        if (lo && x[i] < lower[i]) {
          x[i] = 2.0 * lower[i] - x[i];
        } else if (hi && x[i] > upper[i]) {
          x[i] = 2.0 * upper[i] - x[i];
        } else {
          break;
        }
      }
    }
  }

  /// Fold back through absorbing bounds as if they reflected. Used where exit
  /// is decided elsewhere and a proposed state must stay inside.
  /// Returns true when any coordinate was moved.
  bool fold_into_absorbing(std::span<double> x) const {
    bool moved = false;
    for (std::size_t i = 0; i < dims(); ++i) {
      const Boundary b = behavior[i];
      const bool lo = absorbs_lower(b), hi = absorbs_upper(b);
      if (!lo && !hi) continue;
      const double width = upper[i] - lower[i];
      const double margin = 1e-9 * width;
      for (int guard = 0; guard < 64; ++guard) {
        if (lo && !(x[i] > lower[i])) {
          x[i] = 2.0 * lower[i] - x[i];
          moved = true;
        } else if (hi && !(x[i] < upper[i])) {
          x[i] = 2.0 * upper[i] - x[i];
          moved = true;
        } else {
          break;
        }
      }
      // A state sitting exactly on the bound folds onto itself.
      if (lo && !(x[i] > lower[i])) x[i] = lower[i] + margin;
      if (hi && !(x[i] < upper[i])) x[i] = upper[i] - margin;
      if (b != Boundary::AbsorbingBoth) {
        // the other side reflects
        if (reflects_lower(b) && x[i] < lower[i]) x[i] = 2.0 * lower[i] - x[i];
        if (reflects_upper(b) && x[i] > upper[i]) x[i] = 2.0 * upper[i] - x[i];
      }
    }
    return moved;
  }

  static double wrap_periodic(double v, double lo, double hi) {
    const double p = hi - lo;
    double r = std::fmod(v - lo, p);
    if (r < 0) r += p;
    if (r >= p) r = 0;  // fmod rounding at the seam
    return lo + r;
  }

  /// Minimal-image difference b - a for periodic coordinates, in [-P/2, P/2).
  double increment(std::size_t i, double a, double b) const {
    const double d = b - a;
    if (behavior[i] != Boundary::Periodic) return d;
    const double p = period(i);
    double r = std::fmod(d + 0.5 * p, p);
    if (r < 0) r += p;
    return r - 0.5 * p;
  }
};

/// Any type exposing drift, diagonal diffusion, and a domain.
template <class S>
concept SdeModel = requires(const S& s, std::span<const double> x, std::span<double> out) {
  { s.dims() } -> std::convertible_to<std::size_t>;
  s.drift(x, out);
  s.diffusion(x, out);
  { s.domain() } -> std::convertible_to<const DomainSpec&>;
};

/// Type-erased SDE with diagonal diffusion, for systems defined at run time.
struct SdeSystem {
  using Field = std::function<void(std::span<const double>, std::span<double>)>;

  Field drift_fn;
  Field diffusion_fn;
  DomainSpec domain_spec;

  std::size_t dims() const { return domain_spec.dims(); }
  void drift(std::span<const double> x, std::span<double> out) const { drift_fn(x, out); }
  void diffusion(std::span<const double> x, std::span<double> out) const { diffusion_fn(x, out); }
  const DomainSpec& domain() const { return domain_spec; }
};

struct StepOutcome {
  bool exited = false;
};

/// x' = x + a(x) dt + b(x) sqrt(dt) noise, then periodic wrap and reflection.
/// When an absorbing bound is crossed the raw crossing state is returned.
template <SdeModel System>
StepOutcome step_euler_maruyama(const System& sys, std::span<const double> x, double dt,
                                std::span<const double> noise, std::span<double> out) {
  const std::size_t d = sys.dims();
  if (x.size() != d || noise.size() != d || out.size() != d)
    throw ShapeError("step_euler_maruyama: state/noise/out width must equal system dimension");
  if (!(dt > 0)) throw DomainError("step_euler_maruyama: dt must be positive");
  std::array<double, kMaxStateDims> a{}, b{};
  sys.drift(x, std::span<double>(a.data(), d));
  sys.diffusion(x, std::span<double>(b.data(), d));
  for (std::size_t i = 0; i < d; ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i]))
      throw NumericError("non-finite drift/diffusion at state " + format_state(x));
  }
  const double sq = std::sqrt(dt);
  for (std::size_t i = 0; i < d; ++i) out[i] = x[i] + a[i] * dt + b[i] * sq * noise[i];
  const DomainSpec& dom = sys.domain();
  sys.domain().apply_non_absorbing(out);
  return {dom.violates_absorbing(out)};
}

/// Uniform observation mesh with an integer number of simulation substeps per
/// observation interval.
struct TimeMesh {
  double dt_sim = 5e-4;
  double dt_obs = 0.05;
  double t_max = 1.0;

  std::size_t substeps() const {
    validate();
    return static_cast<std::size_t>(std::llround(dt_obs / dt_sim));
  }
  std::size_t n_obs() const {
    validate();
    return static_cast<std::size_t>(std::llround(t_max / dt_obs));
  }

  void validate() const {
    if (!(dt_sim > 0) || !(dt_obs > 0) || !(t_max > 0))
      throw ConfigError("TimeMesh: dt_sim, dt_obs and t_max must be positive");
    const double ratio = dt_obs / dt_sim;
    if (ratio < 0.5 || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
      throw ConfigError("TimeMesh: dt_obs must be an integer multiple of dt_sim");
    const double n = t_max / dt_obs;
    if (n < 0.5 || std::abs(n - std::round(n)) > 1e-9 * n)
      throw ConfigError("TimeMesh: t_max must be an integer multiple of dt_obs");
  }
};

/// How absorbing bounds are monitored between substeps.
///
/// Discrete checks only post-step states. BrownianBridge additionally kills
/// the particle with the conditional crossing probability of a Brownian
/// bridge with the start-point diffusion, exp(-2 (x-a)(x'-a) / (b^2 dt)),
/// which removes the O(sqrt(dt)) discrete-monitoring bias.
enum class ExitDetection { Discrete, BrownianBridge };

struct SimulationOptions {
  ExitDetection detection = ExitDetection::Discrete;
};

/// Observed path of one particle.
///
/// `states` holds x_0..x_{L-1} plus, when available, the state at which the
/// exit happened (Monte Carlo) or x_L for a confined path. Generated paths
/// that exit have no crossing state, so their `states` has exactly L rows.
struct Trajectory {
  std::size_t dims = 0;
  double dt_obs = 0;
  std::vector<double> states;
  bool exited = false;
  std::size_t final_index = 0;

  std::size_t n_states() const { return dims ? states.size() / dims : 0; }
  std::span<const double> state(std::size_t i) const {
    return std::span<const double>(states).subspan(i * dims, dims);
  }
  std::span<double> state(std::size_t i) { return std::span<double>(states).subspan(i * dims, dims); }
  bool has_crossing_state() const { return exited && n_states() == final_index + 1; }
  /// Still in the domain at observation time t_k.
  bool confined_at(std::size_t k) const { return !exited || k < final_index; }
  /// State at observation index k, valid when confined_at(k).
  std::span<const double> state_at(std::size_t k) const { return state(k); }
};

namespace detail {

inline double bridge_crossing_probability(double x, double x_new, double bound, double b, double dt) {
  const double var = b * b * dt;
  if (!(var > 0)) return 0.0;
  return std::exp(-2.0 * (x - bound) * (x_new - bound) / var);
}

}  // namespace detail

/// Euler-Maruyama at dt_sim, recording every dt_obs until first exit or t_max.
template <SdeModel System>
Trajectory simulate_trajectory(const System& sys, std::span<const double> x0, const TimeMesh& mesh,
                               RngStream& rng, const SimulationOptions& opts = {}) {
  const DomainSpec& dom = sys.domain();
  const std::size_t d = sys.dims();
  if (x0.size() != d) throw ShapeError("simulate_trajectory: x0 width mismatch");
  if (!dom.inside(x0)) throw DomainError("simulate_trajectory: x0 outside domain " + format_state(x0));
  const std::size_t substeps = mesh.substeps();
  const std::size_t n_obs = mesh.n_obs();
  const double dt = mesh.dt_sim;

  Trajectory traj;
  traj.dims = d;
  traj.dt_obs = mesh.dt_obs;
  traj.states.reserve((n_obs + 1) * d);
  traj.states.insert(traj.states.end(), x0.begin(), x0.end());

  std::array<double, kMaxStateDims> x{}, next{}, noise{}, b{};
  std::copy(x0.begin(), x0.end(), x.begin());
  const std::span<double> xs(x.data(), d), ns(next.data(), d), zs(noise.data(), d);
  const bool bridge = opts.detection == ExitDetection::BrownianBridge;

  for (std::size_t k = 1; k <= n_obs; ++k) {
    for (std::size_t s = 0; s < substeps; ++s) {
      for (std::size_t i = 0; i < d; ++i) noise[i] = rng.normal();
      const StepOutcome out = step_euler_maruyama(sys, xs, dt, zs, ns);
      bool exited = out.exited;
      if (!exited && bridge) {
        sys.diffusion(xs, std::span<double>(b.data(), d));
        for (std::size_t i = 0; i < d && !exited; ++i) {
          const Boundary bh = dom.behavior[i];
          double p = 0;
          if (absorbs_lower(bh))
            p = detail::bridge_crossing_probability(x[i], next[i], dom.lower[i], b[i], dt);
          if (absorbs_upper(bh))
            p = 1.0 - (1.0 - p) * (1.0 - detail::bridge_crossing_probability(x[i], next[i], dom.upper[i], b[i], dt));
          if (p > 0 && rng.uniform() < p) exited = true;
        }
      }
      if (exited) {
        traj.states.insert(traj.states.end(), next.begin(), next.begin() + static_cast<std::ptrdiff_t>(d));
        traj.exited = true;
        traj.final_index = k;
        return traj;
      }
      std::swap(x, next);
    }
    traj.states.insert(traj.states.end(), x.begin(), x.begin() + static_cast<std::ptrdiff_t>(d));
  }
  traj.final_index = n_obs;
  return traj;
}

template <SdeModel System>
Trajectory simulate_trajectory(const System& sys, std::span<const double> x0, const TimeMesh& mesh,
                               std::uint64_t seed, std::uint64_t stream = 0,
                               const SimulationOptions& opts = {}) {
  RngStream rng(seed, stream);
  return simulate_trajectory(sys, x0, mesh, rng, opts);
}

/// Draws an initial state into `x0` from the trajectory's own stream.
using InitialSampler = std::function<void(RngStream&, std::span<double>)>;

inline InitialSampler point_sampler(std::vector<double> x0) {
  return [x0 = std::move(x0)](RngStream&, std::span<double> out) {
    std::copy(x0.begin(), x0.end(), out.begin());
  };
}

/// `n_traj` independent trajectories. Trajectory i uses RngStream(seed, i)
/// for both its initial state and its noise, so output is identical for any
/// worker count.
template <SdeModel System>
std::vector<Trajectory> simulate_ensemble(const System& sys, const InitialSampler& sampler,
                                          std::size_t n_traj, const TimeMesh& mesh, std::uint64_t seed,
                                          const SimulationOptions& opts = {}) {
  if (n_traj == 0) throw ConfigError("simulate_ensemble: n_traj must be at least 1");
  mesh.validate();
  sys.domain().validate();
  std::vector<Trajectory> out(n_traj);
  parallel_for(n_traj, 256, [&](std::size_t begin, std::size_t end) {
    std::array<double, kMaxStateDims> x0{};
    const std::span<double> xs(x0.data(), sys.dims());
    for (std::size_t i = begin; i < end; ++i) {
      RngStream rng(seed, i);
      sampler(rng, xs);
      out[i] = simulate_trajectory(sys, xs, mesh, rng, opts);
    }
  });
  return out;
}

/// Fraction of trajectories still confined at observation index k.
inline double confined_fraction(std::span<const Trajectory> trajs, std::size_t k) {
  if (trajs.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& t : trajs) n += t.confined_at(k) ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(trajs.size());
}

}  // namespace bflow
