// Evaluation metrics: exit-probability grids, confinement tables, histograms,
// runaway fraction, escape-vs-start curves, and CSV output.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bflow/exit_model.hpp"
#include "bflow/parallel.hpp"
#include "bflow/problems.hpp"
#include "bflow/sde.hpp"

namespace bflow {

// ---------------------------------------------------------------------------
// Exit-probability grids

/// Row-major grid of states.
struct PointGrid {
  std::size_t dims = 0;
  std::vector<double> points;

  std::size_t size() const { return dims ? points.size() / dims : 0; }
  std::span<const double> point(std::size_t i) const { return std::span<const double>(points).subspan(i * dims, dims); }
};

/// Tensor grid with `n[k]` equally spaced nodes on [lo[k], hi[k]], first
/// coordinate varying slowest.
inline PointGrid tensor_grid(std::span<const double> lo, std::span<const double> hi, std::span<const std::size_t> n) {
  if (lo.size() != hi.size() || lo.size() != n.size() || lo.empty()) throw ShapeError("tensor_grid: axis spec mismatch");
  PointGrid g;
  g.dims = lo.size();
  std::vector<std::vector<double>> axes;
  std::size_t total = 1;
  for (std::size_t k = 0; k < g.dims; ++k) {
    axes.push_back(linspace(lo[k], hi[k], n[k]));
    total *= n[k];
  }
  g.points.resize(total * g.dims);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t r = i;
    for (std::size_t k = g.dims; k-- > 0;) {
      g.points[i * g.dims + k] = axes[k][r % n[k]];
      r /= n[k];
    }
  }
  return g;
}

inline std::vector<double> exit_prob_model(const ExitModel& f, const PointGrid& g) { return predict_exit(f, g.points); }

inline std::vector<double> exit_prob_series(const PointGrid& g, double dt, double L) {
  if (g.dims != 1) throw ShapeError("exit_prob_series: analytic series is one-dimensional");
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = exit_prob_series_1d(g.points[i], dt, L);
  return out;
}

/// Fraction of `n_samples` one-interval simulations from each grid point that
/// exit. Points on an absorbing bound have exited already (value 1).
template <SdeModel System>
std::vector<double> exit_prob_mc(const System& sys, const PointGrid& g, std::size_t n_samples, double dt_sim,
                                 double dt_obs, std::uint64_t seed, const SimulationOptions& opts = {}) {
  if (n_samples == 0) throw ConfigError("exit_prob_mc: sample budget must be positive");
  if (g.dims != sys.dims()) throw ShapeError("exit_prob_mc: grid dimension mismatch");
  const TimeMesh mesh{dt_sim, dt_obs, dt_obs};
  mesh.validate();
  std::vector<double> out(g.size());
  std::vector<std::uint8_t> exits(g.size() * n_samples);
  parallel_for(g.size() * n_samples, 1024, [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      const auto x = g.point(j / n_samples);
      if (sys.domain().violates_absorbing(x)) {
        exits[j] = 1;
        continue;
      }
      RngStream rng(seed, j);
      exits[j] = simulate_trajectory(sys, x, mesh, rng, opts).exited ? 1 : 0;
    }
  });
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::size_t s = 0;
    for (std::size_t j = 0; j < n_samples; ++j) s += exits[i * n_samples + j];
    out[i] = static_cast<double>(s) / static_cast<double>(n_samples);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confinement

/// Observation index of time t; t must sit on the mesh.
inline std::size_t time_index(double t, double dt_obs) {
  if (!(dt_obs > 0)) throw ConfigError("time_index: dt_obs must be positive");
  const double r = t / dt_obs;
  const double k = std::round(r);
  if (k < 0 || std::abs(r - k) > 1e-6 * std::max(1.0, r))
    throw DomainError("time " + std::to_string(t) + " is not on the observation mesh (dt_obs=" + std::to_string(dt_obs) +
                      ")");
  return static_cast<std::size_t>(k);
}

inline double escaped_fraction(std::span<const Trajectory> trajs, std::size_t k) {
  if (trajs.empty()) return 0.0;
  return 1.0 - confined_fraction(trajs, k);
}

struct MethodTrajectories {
  std::string name;
  std::span<const Trajectory> trajectories;
};

struct ComparisonReport {
  std::vector<double> times;
  std::vector<std::string> methods;
  std::vector<std::vector<double>> fractions;  // [method][time]
  std::vector<std::pair<std::string, double>> metrics;
};

inline ComparisonReport confinement_table(std::span<const MethodTrajectories> sets, std::span<const double> times,
                                          double t_max) {
  if (sets.empty()) throw ConfigError("confinement_table: no trajectory sets");
  ComparisonReport rep;
  rep.times.assign(times.begin(), times.end());
  double dt = 0;
  for (const auto& s : sets) {
    if (s.trajectories.empty()) throw ConfigError("confinement_table: method '" + s.name + "' has no trajectories");
    const double d = s.trajectories.front().dt_obs;
    if (dt == 0) dt = d;
    if (std::abs(d - dt) > 1e-12 * dt) throw ConfigError("confinement_table: methods do not share dt_obs");
  }
  for (double t : times)
    if (t > t_max * (1 + 1e-12))
      throw DomainError("confinement_table: time " + std::to_string(t) + " is beyond t_max " + std::to_string(t_max));
  for (const auto& s : sets) {
    rep.methods.push_back(s.name);
    auto& row = rep.fractions.emplace_back();
    for (double t : times) row.push_back(confined_fraction(s.trajectories, time_index(t, dt)));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Histograms

struct Axis {
  double lo = 0, hi = 1;
  std::size_t bins = 100;

  double width() const { return (hi - lo) / static_cast<double>(bins); }
  double center(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * width(); }
  /// Values outside [lo, hi] land in the edge bins.
  std::size_t bin(double v) const {
    const double r = (v - lo) / (hi - lo) * static_cast<double>(bins);
    if (!(r > 0)) return 0;
    return std::min(bins - 1, static_cast<std::size_t>(r));
  }
};

/// Counts and density per bin; density integrates to count / total.
struct DensityGrid {
  std::vector<Axis> axes;
  std::vector<std::size_t> counts;
  std::vector<double> density;
  std::size_t total = 0;
  bool log10 = false;

  std::size_t binned() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

namespace detail {

inline void finish_density(DensityGrid& g, bool log10) {
  double vol = 1;
  for (const auto& a : g.axes) vol *= a.width();
  g.density.resize(g.counts.size());
  for (std::size_t i = 0; i < g.counts.size(); ++i) {
    const double v = static_cast<double>(g.counts[i]) / (static_cast<double>(g.total) * vol);
    g.density[i] = log10 ? (v > 0 ? std::log10(v) : -std::numeric_limits<double>::infinity()) : v;
  }
  g.log10 = log10;
}

}  // namespace detail

struct PdfSet {
  std::size_t confined = 0;
  std::size_t total = 0;
  std::vector<DensityGrid> marginals;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<DensityGrid> joints;
};

/// Histograms of the particles confined at observation index k.
inline PdfSet marginal_and_joint_pdfs(std::span<const Trajectory> trajs, std::size_t k, std::span<const Axis> axes,
                                      std::span<const std::pair<std::size_t, std::size_t>> pairs = {},
                                      bool log10 = false) {
  if (trajs.empty()) throw ConfigError("marginal_and_joint_pdfs: no trajectories");
  const std::size_t d = trajs.front().dims;
  if (axes.size() != d) throw ShapeError("marginal_and_joint_pdfs: need one axis per dimension");
  PdfSet out;
  out.total = trajs.size();
  std::vector<std::span<const double>> states;
  for (const auto& t : trajs)
    if (t.confined_at(k)) states.push_back(t.state_at(k));
  out.confined = states.size();
  if (states.empty())
    throw ConfigError("marginal_and_joint_pdfs: 0 of " + std::to_string(trajs.size()) +
                      " trajectories are confined at index " + std::to_string(k));
  for (std::size_t c = 0; c < d; ++c) {
    DensityGrid g;
    g.axes = {axes[c]};
    g.total = trajs.size();
    g.counts.assign(axes[c].bins, 0);
    for (const auto& s : states) ++g.counts[axes[c].bin(s[c])];
    detail::finish_density(g, log10);
    out.marginals.push_back(std::move(g));
  }
  for (const auto& [a, b] : pairs) {
    if (a >= d || b >= d || a == b) throw ShapeError("marginal_and_joint_pdfs: bad dimension pair");
    DensityGrid g;
    g.axes = {axes[a], axes[b]};
    g.total = trajs.size();
    g.counts.assign(axes[a].bins * axes[b].bins, 0);
    for (const auto& s : states) ++g.counts[axes[a].bin(s[a]) * axes[b].bins + axes[b].bin(s[b])];
    detail::finish_density(g, log10);
    out.pairs.emplace_back(a, b);
    out.joints.push_back(std::move(g));
  }
  return out;
}

/// Coordinate c of every particle confined at index k.
inline std::vector<double> confined_values(std::span<const Trajectory> trajs, std::size_t k, std::size_t c) {
  std::vector<double> v;
  for (const auto& t : trajs)
    if (t.confined_at(k)) v.push_back(t.state_at(k)[c]);
  return v;
}

/// Confined particles with p >= p_star at index k over the initial ensemble
/// size. States are (p, xi, r).
inline double runaway_fraction(std::span<const Trajectory> trajs, std::size_t k, double p_star = 1.75) {
  if (trajs.empty()) throw ConfigError("runaway_fraction: no trajectories");
  std::size_t n = 0;
  for (const auto& t : trajs) {
    if (t.dims != 3) throw ShapeError("runaway_fraction: needs (p, xi, r) trajectories");
    if (t.confined_at(k) && t.state_at(k)[0] >= p_star) ++n;
  }
  return static_cast<double>(n) / static_cast<double>(trajs.size());
}

/// Escaped fraction at index k for each start position, from a runner that
/// produces the trajectories of one position.
inline std::vector<double> exit_rate_vs_initial(
    const PointGrid& starts, std::size_t k,
    const std::function<std::vector<Trajectory>(std::span<const double>, std::size_t)>& run) {
  std::vector<double> out;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const auto trajs = run(starts.point(i), i);
    out.push_back(escaped_fraction(trajs, k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// CSV file whose first line references the producing manifest.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& manifest_ref, const std::vector<std::string>& header)
      : path_(path), os_(path, std::ios::trunc) {
    if (!os_) throw ArtifactError("cannot open for writing: " + path);
    os_ << "# manifest: " << manifest_ref << '\n';
    write_row(header);
  }

  void row(std::span<const double> values) {
    std::vector<std::string> s;
    for (double v : values) s.push_back(format_number(v));
    write_row(s);
  }

  void row(const std::vector<std::string>& cells) { write_row(cells); }

  void close() {
    os_.flush();
    if (!os_) throw ArtifactError("write failed: " + path_);
    os_.close();
  }

 private:
  void write_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << '\n';
  }

  std::string path_;
  std::ofstream os_;
};

}  // namespace bflow
