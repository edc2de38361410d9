// The three benchmark systems: absorbed Brownian motion on an interval, a
// cellular advection-diffusion flow in a periodic channel, and the
// momentum/pitch/radius runaway-electron model.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bflow/core.hpp"
#include "bflow/rng.hpp"
#include "bflow/sde.hpp"

namespace bflow {

/// Coordinates the learned models operate in, plus the inverse map and an
/// optional projection that keeps generated states physically admissible.
/// Empty maps mean the identity.
struct LearningCoordinates {
  DomainSpec domain;
  std::function<void(std::span<const double>, std::span<double>)> to_learning;
  std::function<void(std::span<const double>, std::span<double>)> from_learning;
  std::function<void(std::span<double>)> project;

  bool identity() const { return !to_learning; }
};

/// Applies `map` to every stored state of every trajectory.
inline std::vector<Trajectory> map_trajectories(
    std::span<const Trajectory> in,
    const std::function<void(std::span<const double>, std::span<double>)>& map) {
  std::vector<Trajectory> out(in.begin(), in.end());
  if (!map) return out;
  for (auto& t : out) {
    std::vector<double> buf(t.dims);
    for (std::size_t i = 0; i < t.n_states(); ++i) {
      map(t.state(i), buf);
      std::copy(buf.begin(), buf.end(), t.state(i).begin());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1D absorbed Brownian motion

struct Brownian1D {
  double L = 6.0;
  double t_max = 3.0;
  double dt_sim = 5e-4;
  double dt_obs = 0.05;
  double x0 = 1.0;

  DomainSpec domain_spec() const { return {{0.0}, {L}, {Boundary::AbsorbingBoth}}; }

  void validate() const {
    if (!(L > 0)) throw ConfigError("brownian1d: L must be positive");
    if (!(x0 > 0 && x0 < L)) throw ConfigError("brownian1d: x0 must lie in (0, L)");
    mesh().validate();
  }

  TimeMesh mesh() const { return {dt_sim, dt_obs, t_max}; }
};

class Brownian1DSystem {
 public:
  explicit Brownian1DSystem(const Brownian1D& p) : domain_(p.domain_spec()) {}
  std::size_t dims() const { return 1; }
  void drift(std::span<const double>, std::span<double> out) const { out[0] = 0.0; }
  void diffusion(std::span<const double>, std::span<double> out) const { out[0] = 1.0; }
  const DomainSpec& domain() const { return domain_; }

 private:
  DomainSpec domain_;
};

/// Probability that Brownian motion started at x leaves (0, L) within dt,
/// from the eigenfunction series of the heat equation with Dirichlet ends.
inline double exit_prob_series_1d(double x, double dt, double L, std::size_t n_terms = 400) {
  if (!(L > 0)) throw DomainError("exit_prob_series_1d: L must be positive");
  if (!(x >= 0.0 && x <= L)) throw DomainError("exit_prob_series_1d: x outside [0, L]");
  if (!(dt > 0)) throw DomainError("exit_prob_series_1d: dt must be positive");
  if (n_terms < 1) throw DomainError("exit_prob_series_1d: n_terms must be >= 1");
  if (x == 0.0 || x == L) return 1.0;
  double survival = 0.0;
  for (std::size_t k = 0; k < n_terms; ++k) {
    const double m = static_cast<double>(2 * k + 1);
    const double w = m * kPi / L;
    survival += 4.0 / (m * kPi) * std::sin(w * x) * std::exp(-0.5 * w * w * dt);
  }
  return std::clamp(1.0 - survival, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// 2D cellular flow

struct CellularFlow2D {
  double Pe = 5.0;
  int n = 2;
  double L = 2.0;
  double t_max = 1.0;
  double dt_sim = 5e-4;
  double dt_obs = 0.05;

  DomainSpec domain_spec() const {
    return {{-kPi, 0.0}, {kPi, L}, {Boundary::Periodic, Boundary::AbsorbingBoth}};
  }

  void validate() const {
    if (!(Pe > 0)) throw ConfigError("cellular2d: Pe must be positive");
    if (n < 1) throw ConfigError("cellular2d: n must be a positive integer");
    if (!(L > 0)) throw ConfigError("cellular2d: L must be positive");
    mesh().validate();
  }

  TimeMesh mesh() const { return {dt_sim, dt_obs, t_max}; }
};

/// Steady cellular velocity field (v1, v2).
inline std::pair<double, double> cellular_velocity(double x1, double x2, int n) {
  const double nn = static_cast<double>(n);
  return {-kPi * std::cos(kPi * x2) * std::sin(nn * x1), nn * std::sin(kPi * x2) * std::cos(nn * x1)};
}

class CellularFlow2DSystem {
 public:
  explicit CellularFlow2DSystem(const CellularFlow2D& p) : p_(p), domain_(p.domain_spec()) {}
  std::size_t dims() const { return 2; }
  void drift(std::span<const double> x, std::span<double> out) const {
    const auto [v1, v2] = cellular_velocity(x[0], x[1], p_.n);
    out[0] = p_.Pe * v1;
    out[1] = p_.Pe * v2;
  }
  void diffusion(std::span<const double>, std::span<double> out) const {
    out[0] = 1.0;
    out[1] = 1.0;
  }
  const DomainSpec& domain() const { return domain_; }

 private:
  CellularFlow2D p_;
  DomainSpec domain_;
};

// ---------------------------------------------------------------------------
// 3D runaway electrons in (p, xi, r)

struct RunawayElectron3D {
  double Z = 1.0;
  double tau = 6e3;
  double E0 = 1.0 / 2000.0;
  double T_ref = 3.0;        // reference temperature
  double T_final = 0.05;     // post-quench temperature
  double mc2 = 500.0;
  double D0 = 0.01;
  double r_m = 0.5;
  double L_D = 0.1;
  double delta_p = 2.5;
  double coulomb_log_ratio = 1.0;
  double p_min = 0.5;
  double p_max = 5.0;
  double r_init_max = 0.95;
  double dt_sim = 0.005;
  double dt_obs = 0.2;
  double t_max = 20.0;

  double delta_ref() const { return std::sqrt(2.0 * T_ref / mc2); }
  double delta_final() const { return std::sqrt(2.0 * T_final / mc2); }
  double vT() const { return std::sqrt(T_final / T_ref); }
  double nu_ee() const { return std::pow(T_ref / T_final, 1.5) * coulomb_log_ratio; }
  double E_field() const { return E0 * std::pow(T_ref / T_final, 1.5); }

  DomainSpec domain_spec() const {
    return {{p_min, -1.0, 0.0},
            {p_max, 1.0, 1.0},
            {Boundary::Reflecting, Boundary::Reflecting, Boundary::AbsorbingUpper}};
  }

  TimeMesh mesh() const { return {dt_sim, dt_obs, t_max}; }

  void validate() const {
    for (double v : {Z, tau, E0, T_ref, T_final, mc2, D0, r_m, L_D, delta_p, coulomb_log_ratio})
      if (!(v > 0) || !std::isfinite(v)) throw ConfigError("runaway3d: physical parameters must be positive");
    if (!(p_min > 0 && p_min < p_max)) throw ConfigError("runaway3d: need 0 < p_min < p_max");
    if (!(r_init_max > 0 && r_init_max < 1)) throw ConfigError("runaway3d: r_init_max must be in (0, 1)");
    mesh().validate();
  }
};

struct CollisionCoefficients {
  double C_A = 0, C_F = 0, C_B = 0, dC_A_dp = 0;
};

namespace detail {

inline constexpr double kTwoOverSqrtPi = 1.1283791670955126;

// psi(y) = (phi - y phi') / (2 y^2); series below 1e-3 avoids cancellation.
inline double chandrasekhar_psi(double y) {
  if (y < 1e-3) {
    const double y2 = y * y;
    return (1.0 / std::sqrt(kPi)) * y * (2.0 / 3.0 - y2 * (2.0 / 5.0 - y2 / 7.0));
  }
  const double phi = std::erf(y);
  const double dphi = kTwoOverSqrtPi * std::exp(-y * y);
  return (phi - y * dphi) / (2.0 * y * y);
}

}  // namespace detail

/// C_A, C_F, C_B at momentum p and the analytic dC_A/dp.
inline CollisionCoefficients collision_coefficients(double p, const RunawayElectron3D& q) {
  if (!(p > 0)) throw DomainError("collision_coefficients: p must be positive");
  const double dt = q.delta_ref();
  const double vT = q.vT();
  const double nu = q.nu_ee();
  const double d4 = std::pow(q.delta_final(), 4);
  const double gamma = std::sqrt(1.0 + dt * dt * p * p);
  const double y = p / (gamma * vT);
  const double phi = std::erf(y);
  const double dphi = detail::kTwoOverSqrtPi * std::exp(-y * y);
  const double psi = detail::chandrasekhar_psi(y);

  CollisionCoefficients c;
  c.C_A = nu * vT * vT * psi / y;
  c.C_F = 2.0 * nu * vT * psi;
  c.C_B = 0.5 * nu * vT * vT * (q.Z + phi - psi + 0.5 * y * y * d4) / y;
  // d(psi/y)/dy = phi'/y - 3 psi/y^2 ; dy/dp = 1/(vT gamma^3)
  double dratio_dy;
  if (y < 1e-3) {
    // psi/y ~ (2/3 - 2y^2/5)/sqrt(pi)
    dratio_dy = -(4.0 / 5.0) * y / std::sqrt(kPi);
  } else {
    dratio_dy = dphi / y - 3.0 * psi / (y * y);
  }
  c.dC_A_dp = nu * vT * vT * dratio_dy / (vT * gamma * gamma * gamma);
  return c;
}

struct RadialDiffusivity {
  double D_r = 0, dD_r_dr = 0;
};

inline RadialDiffusivity radial_diffusivity(double r, double p, const RunawayElectron3D& q) {
  const double s = (r - q.r_m) / q.L_D;
  const double F = 0.5 * (1.0 + std::tanh(s));
  const double G = std::exp(-(p / q.delta_p) * (p / q.delta_p));
  const double sech = 1.0 / std::cosh(s);
  return {q.D0 * F * G, q.D0 * G * 0.5 / q.L_D * sech * sech};
}

class RunawayElectron3DSystem {
 public:
  explicit RunawayElectron3DSystem(const RunawayElectron3D& p)
      : p_(p), domain_(p.domain_spec()), E_(p.E_field()), dref_(p.delta_ref()) {}

  std::size_t dims() const { return 3; }

  void drift(std::span<const double> x, std::span<double> out) const {
    const double p = x[0], xi = x[1], r = x[2];
    const double one_m_xi2 = 1.0 - xi * xi;
    const double gamma = std::sqrt(1.0 + dref_ * dref_ * p * p);
    const CollisionCoefficients c = collision_coefficients(p, p_);
    const RadialDiffusivity dr = radial_diffusivity(r, p, p_);
    out[0] = E_ * xi - gamma * p / p_.tau * one_m_xi2 - c.C_F + 2.0 * c.C_A / p + c.dC_A_dp;
    out[1] = E_ * one_m_xi2 / p + xi * one_m_xi2 / (p_.tau * gamma) - 2.0 * xi * c.C_B / (p * p);
    out[2] = dr.dD_r_dr;
  }

  void diffusion(std::span<const double> x, std::span<double> out) const {
    const double p = x[0], xi = x[1], r = x[2];
    const CollisionCoefficients c = collision_coefficients(p, p_);
    const RadialDiffusivity dr = radial_diffusivity(r, p, p_);
    out[0] = std::sqrt(2.0 * c.C_A);
    out[1] = std::sqrt(2.0 * c.C_B) / p * std::sqrt(std::max(0.0, 1.0 - xi * xi));
    out[2] = std::sqrt(2.0 * dr.D_r);
  }

  const DomainSpec& domain() const { return domain_; }
  const RunawayElectron3D& params() const { return p_; }

 private:
  RunawayElectron3D p_;
  DomainSpec domain_;
  double E_;
  double dref_;
};

/// Maxwellian family f ~ p^2 exp(-(p/p0)^2), p0 = sqrt(T0 / T_ref).
struct MaxwellianInit {
  double T0 = 4.0;
  double p0(const RunawayElectron3D& q) const { return std::sqrt(T0 / q.T_ref); }
};

struct PhaseSpacePoint {
  double p = 0, xi = 0, r = 0;
};

/// Samples (p, xi, r): p from the Maxwellian truncated to [p_min, p_max] by
/// rejection under a flat envelope, xi uniform on (-1, 1), r uniform on
/// (0, r_max).
inline PhaseSpacePoint sample_maxwellian(double T0, double p_min, double p_max, double T_ref, double r_max,
                                         RngStream& rng, std::size_t max_attempts = 1'000'000) {
  if (!(T0 > 0)) throw DomainError("sample_maxwellian: T0 must be positive");
  if (!(p_min >= 0 && p_min < p_max)) throw DomainError("sample_maxwellian: need 0 <= p_min < p_max");
  const double p0 = std::sqrt(T0 / T_ref);
  auto g = [p0](double p) { return p * p * std::exp(-(p / p0) * (p / p0)); };
  const double peak = g(std::clamp(p0, p_min, p_max));
  PhaseSpacePoint out;
  bool accepted = false;
  for (std::size_t i = 0; i < max_attempts; ++i) {
    const double p = rng.uniform(p_min, p_max);
    if (rng.uniform() * peak <= g(p)) {
      out.p = p;
      accepted = true;
      break;
    }
  }
  if (!accepted || !(peak > 0))
    throw NumericError("sample_maxwellian: rejection sampling failed; truncation window holds no mass");
  out.xi = rng.uniform(-1.0, 1.0);
  out.r = rng.uniform(0.0, r_max);
  return out;
}

inline PhaseSpacePoint sample_maxwellian(double T0, const RunawayElectron3D& q, RngStream& rng) {
  return sample_maxwellian(T0, q.p_min, q.p_max, q.T_ref, q.r_init_max, rng);
}

inline std::pair<double, double> to_parallel_perp(double p, double xi) {
  return {p * xi, p * std::sqrt(std::max(0.0, 1.0 - xi * xi))};
}

/// Inverse of to_parallel_perp. At p = 0 the pitch is undefined and 0 is
/// returned.
inline std::pair<double, double> from_parallel_perp(double p_par, double p_perp) {
  const double p = std::hypot(p_par, p_perp);
  if (p == 0.0) return {0.0, 0.0};
  return {p, std::clamp(p_par / p, -1.0, 1.0)};
}

/// (p, xi, r) <-> (p_par, p_perp, r). Generated states are projected back onto
/// p in [p_min, p_max] by reflection.
inline LearningCoordinates runaway_learning_coordinates(const RunawayElectron3D& q) {
  LearningCoordinates lc;
  lc.domain = {{-q.p_max, 0.0, 0.0},
               {q.p_max, q.p_max, 1.0},
               {Boundary::Free, Boundary::Free, Boundary::AbsorbingUpper}};
  lc.to_learning = [](std::span<const double> s, std::span<double> l) {
    const auto [par, perp] = to_parallel_perp(s[0], s[1]);
    l[0] = par;
    l[1] = perp;
    l[2] = s[2];
  };
  lc.from_learning = [](std::span<const double> l, std::span<double> s) {
    const auto [p, xi] = from_parallel_perp(l[0], std::abs(l[1]));
    s[0] = p;
    s[1] = xi;
    s[2] = l[2];
  };
  lc.project = [pmin = q.p_min, pmax = q.p_max](std::span<double> l) {
    auto [p, xi] = from_parallel_perp(l[0], std::abs(l[1]));
    for (int guard = 0; guard < 64; ++guard) {
      if (p < pmin) {
        p = 2.0 * pmin - p;
      } else if (p > pmax) {
        p = 2.0 * pmax - p;
      } else {
        break;
      }
    }
    const auto [par, perp] = to_parallel_perp(p, xi);
    l[0] = par;
    l[1] = perp;
  };
  return lc;
}

inline InitialSampler maxwellian_sampler(double T0, const RunawayElectron3D& q) {
  return [T0, q](RngStream& rng, std::span<double> x) {
    const PhaseSpacePoint s = sample_maxwellian(T0, q, rng);
    x[0] = s.p;
    x[1] = s.xi;
    x[2] = s.r;
  };
}

/// Uniform initial states over the bounded coordinates of a domain; used to
/// build training ensembles with full coverage. Absorbing bounds are kept a
/// relative margin away.
inline InitialSampler uniform_box_sampler(const DomainSpec& dom, double margin = 1e-6) {
  return [dom, margin](RngStream& rng, std::span<double> x) {
    for (std::size_t i = 0; i < dom.dims(); ++i) {
      const double w = dom.upper[i] - dom.lower[i];
      double lo = dom.lower[i], hi = dom.upper[i];
      if (absorbs_lower(dom.behavior[i])) lo += margin * w;
      if (absorbs_upper(dom.behavior[i])) hi -= margin * w;
      x[i] = rng.uniform(lo, hi);
    }
  };
}

}  // namespace bflow
