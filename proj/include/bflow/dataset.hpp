// Transition triples (x, dx, gamma), labeled triples (x, z, y), and their
// on-disk format.
//
// File layout (all little-endian):
//   offset  0  magic "BFLOW1\0\0"
//           8  u32 version (1)
//          12  u32 kind (1 observation, 2 labeled)
//          16  u32 state dimension d
//          20  u32 flags (bit 0: trajectory id / step side channel present)
//          24  u64 row count M
//          32  f64 dt_obs
//          40  u64 trajectory count H
//          48  reserved, zero
//          64  observation: x[M*d] f64, dx[M*d] f64, gamma[M] u8,
//                           then optionally traj_id[M] u64, step[M] u32
//              labeled:     x[M*d] f64, z[M*d] f64, y[M*d] f64
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bflow/binary_io.hpp"
#include "bflow/core.hpp"
#include "bflow/sde.hpp"

namespace bflow {

inline constexpr char kDatasetMagic[8] = {'B', 'F', 'L', 'O', 'W', '1', '\0', '\0'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 64;

enum class DatasetKind : std::uint32_t { Observation = 1, Labeled = 2 };

/// One transition: start state, increment over one observation interval,
/// and whether the particle exited during it.
struct TransitionTriple {
  std::vector<double> x;
  std::vector<double> dx;
  bool gamma = false;
};

/// All transition pairs of an ensemble, stored column-wise.
struct ObservationSet {
  std::size_t dims = 0;
  double dt_obs = 0;
  std::vector<double> x;
  std::vector<double> dx;
  std::vector<std::uint8_t> gamma;
  // Diagnostics only, never used as model input.
  std::vector<std::uint64_t> traj_id;
  std::vector<std::uint32_t> step;
  std::size_t n_trajectories = 0;
  std::size_t n_skipped = 0;  // zero-step trajectories dropped by segment()

  std::size_t size() const { return gamma.size(); }
  bool has_side_channel() const { return !traj_id.empty(); }
  std::span<const double> x_row(std::size_t m) const { return std::span<const double>(x).subspan(m * dims, dims); }
  std::span<const double> dx_row(std::size_t m) const { return std::span<const double>(dx).subspan(m * dims, dims); }
  std::size_t n_exits() const { return static_cast<std::size_t>(std::count(gamma.begin(), gamma.end(), 1)); }

  TransitionTriple triple(std::size_t m) const {
    return {std::vector<double>(x_row(m).begin(), x_row(m).end()),
            std::vector<double>(dx_row(m).begin(), dx_row(m).end()), gamma[m] != 0};
  }
};

/// Reverse-ODE labels: condition x, latent z, synthetic increment y.
struct LabeledSet {
  std::size_t dims = 0;
  double dt_obs = 0;
  std::vector<double> x;
  std::vector<double> z;
  std::vector<double> y;

  std::size_t size() const { return dims ? x.size() / dims : 0; }
  std::span<const double> x_row(std::size_t m) const { return std::span<const double>(x).subspan(m * dims, dims); }
  std::span<const double> z_row(std::size_t m) const { return std::span<const double>(z).subspan(m * dims, dims); }
  std::span<const double> y_row(std::size_t m) const { return std::span<const double>(y).subspan(m * dims, dims); }
};

/// Splits trajectories into transition triples, ordered by (trajectory, step).
///
/// A trajectory with final index L yields L triples; gamma is 1 only on the
/// last triple of an exiting trajectory. Increments along periodic
/// coordinates of `domain` are minimal images. An exit without a recorded
/// crossing state (generated paths) gets dx = 0.
inline ObservationSet segment(std::span<const Trajectory> trajs, const DomainSpec& domain) {
  ObservationSet out;
  out.dims = domain.dims();
  out.n_trajectories = trajs.size();
  if (!trajs.empty()) out.dt_obs = trajs.front().dt_obs;
  std::size_t total = 0;
  for (const auto& t : trajs) {
    if (t.dims != out.dims) throw ShapeError("segment: trajectory dimension differs from domain");
    if (t.dt_obs != out.dt_obs) throw ConfigError("segment: trajectories must share dt_obs");
    total += t.final_index;
  }
  const std::size_t d = out.dims;
  out.x.reserve(total * d);
  out.dx.reserve(total * d);
  out.gamma.reserve(total);
  out.traj_id.reserve(total);
  out.step.reserve(total);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const Trajectory& t = trajs[i];
    const std::size_t L = t.final_index;
    if (L == 0 || t.n_states() == 0) {
      ++out.n_skipped;
      continue;
    }
    for (std::size_t l = 0; l < L; ++l) {
      const auto xl = t.state(l);
      out.x.insert(out.x.end(), xl.begin(), xl.end());
      const bool last = l + 1 == L;
      if (l + 1 < t.n_states()) {
        const auto xn = t.state(l + 1);
        for (std::size_t k = 0; k < d; ++k) out.dx.push_back(domain.increment(k, xl[k], xn[k]));
      } else {
        out.dx.insert(out.dx.end(), d, 0.0);
      }
      out.gamma.push_back(last && t.exited ? 1 : 0);
      out.traj_id.push_back(i);
      out.step.push_back(static_cast<std::uint32_t>(l));
    }
  }
  return out;
}

/// Rebuilds trajectories from a segmented set with side channel. Periodic
/// coordinates are re-wrapped, so states agree with the originals to rounding.
inline std::vector<Trajectory> reconstruct(const ObservationSet& obs, const DomainSpec& domain) {
  if (!obs.has_side_channel()) throw ConfigError("reconstruct: observation set has no trajectory ids");
  std::vector<Trajectory> out;
  const std::size_t d = obs.dims;
  std::size_t m = 0;
  while (m < obs.size()) {
    const std::uint64_t id = obs.traj_id[m];
    Trajectory t;
    t.dims = d;
    t.dt_obs = obs.dt_obs;
    std::size_t last = m;
    while (m < obs.size() && obs.traj_id[m] == id) {
      const auto xr = obs.x_row(m);
      t.states.insert(t.states.end(), xr.begin(), xr.end());
      last = m++;
    }
    t.final_index = t.n_states();
    t.exited = obs.gamma[last] != 0;
    std::vector<double> end(d);
    for (std::size_t k = 0; k < d; ++k) end[k] = obs.x_row(last)[k] + obs.dx_row(last)[k];
    if (!t.exited) domain.apply_non_absorbing(end);
    else
      for (std::size_t k = 0; k < d; ++k)
        if (domain.behavior[k] == Boundary::Periodic) end[k] = DomainSpec::wrap_periodic(end[k], domain.lower[k], domain.upper[k]);
    t.states.insert(t.states.end(), end.begin(), end.end());
    out.push_back(std::move(t));
  }
  return out;
}

namespace detail {

inline void write_header(io::Writer& w, DatasetKind kind, std::size_t dims, std::uint32_t flags, std::size_t rows,
                         double dt_obs, std::size_t n_traj) {
  w.put_bytes(kDatasetMagic, 8);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dims));
  w.put<std::uint32_t>(flags);
  w.put<std::uint64_t>(rows);
  w.put<double>(dt_obs);
  w.put<std::uint64_t>(n_traj);
  w.pad_to(kDatasetHeaderBytes);
}

struct Header {
  DatasetKind kind;
  std::size_t dims;
  std::uint32_t flags;
  std::size_t rows;
  double dt_obs;
  std::size_t n_traj;
};

inline Header read_header(io::Reader& r, DatasetKind expected, std::optional<std::size_t> expected_dims) {
  const auto magic = r.bytes(8, "magic");
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const unsigned char*>(kDatasetMagic)))
    throw LoadError(r.path() + ": bad magic (not a BFLOW1 dataset)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetVersion)
    throw LoadError(r.path() + ": unsupported version " + std::to_string(version));
  Header h{};
  const auto kind = r.get<std::uint32_t>("kind");
  if (kind != static_cast<std::uint32_t>(expected))
    throw LoadError(r.path() + ": kind " + std::to_string(kind) + " does not match expected " +
                    std::to_string(static_cast<std::uint32_t>(expected)));
  h.kind = expected;
  h.dims = r.get<std::uint32_t>("dims");
  if (h.dims == 0 || h.dims > kMaxStateDims) throw LoadError(r.path() + ": invalid dims " + std::to_string(h.dims));
  if (expected_dims && *expected_dims != h.dims)
    throw LoadError(r.path() + ": dims is " + std::to_string(h.dims) + " but configuration expects " +
                    std::to_string(*expected_dims));
  h.flags = r.get<std::uint32_t>("flags");
  if (h.flags > 1) throw LoadError(r.path() + ": unknown flags " + std::to_string(h.flags));
  h.rows = r.get<std::uint64_t>("rows");
  h.dt_obs = r.get<double>("dt_obs");
  if (!(h.dt_obs >= 0) || !std::isfinite(h.dt_obs)) throw LoadError(r.path() + ": invalid dt_obs");
  h.n_traj = r.get<std::uint64_t>("n_trajectories");
  r.seek(kDatasetHeaderBytes);
  // Row count must be consistent with the bytes present before allocating.
  const std::size_t per_row = (expected == DatasetKind::Observation)
                                  ? 2 * h.dims * sizeof(double) + 1 + ((h.flags & 1) ? 12 : 0)
                                  : 3 * h.dims * sizeof(double);
  if (h.rows > (r.size() - kDatasetHeaderBytes) / per_row)
    throw LoadError(r.path() + ": truncated file; header declares " + std::to_string(h.rows) +
                    " rows (field 'rows')");
  return h;
}

}  // namespace detail

inline void save_observations(const ObservationSet& obs, const std::string& path) {
  io::Writer w(path);
  const std::uint32_t flags = obs.has_side_channel() ? 1u : 0u;
  detail::write_header(w, DatasetKind::Observation, obs.dims, flags, obs.size(), obs.dt_obs, obs.n_trajectories);
  w.put_array<double>(obs.x);
  w.put_array<double>(obs.dx);
  w.put_array<std::uint8_t>(obs.gamma);
  if (flags & 1) {
    w.put_array<std::uint64_t>(obs.traj_id);
    w.put_array<std::uint32_t>(obs.step);
  }
  w.close();
}

inline ObservationSet load_observations(const std::string& path, std::optional<std::size_t> expected_dims = {}) {
  io::Reader r(path);
  const auto h = detail::read_header(r, DatasetKind::Observation, expected_dims);
  ObservationSet obs;
  obs.dims = h.dims;
  obs.dt_obs = h.dt_obs;
  obs.n_trajectories = h.n_traj;
  obs.x = r.get_array<double>(h.rows * h.dims, "x");
  obs.dx = r.get_array<double>(h.rows * h.dims, "dx");
  obs.gamma = r.get_array<std::uint8_t>(h.rows, "gamma");
  for (auto g : obs.gamma)
    if (g > 1) throw LoadError(path + ": field 'gamma' holds a non-binary value");
  if (h.flags & 1) {
    obs.traj_id = r.get_array<std::uint64_t>(h.rows, "traj_id");
    obs.step = r.get_array<std::uint32_t>(h.rows, "step");
  }
  if (r.offset() != r.size()) throw LoadError(path + ": trailing bytes after last field");
  return obs;
}

inline void save_labeled(const LabeledSet& set, const std::string& path) {
  io::Writer w(path);
  detail::write_header(w, DatasetKind::Labeled, set.dims, 0, set.size(), set.dt_obs, 0);
  w.put_array<double>(set.x);
  w.put_array<double>(set.z);
  w.put_array<double>(set.y);
  w.close();
}

inline LabeledSet load_labeled(const std::string& path, std::optional<std::size_t> expected_dims = {}) {
  io::Reader r(path);
  const auto h = detail::read_header(r, DatasetKind::Labeled, expected_dims);
  LabeledSet set;
  set.dims = h.dims;
  set.dt_obs = h.dt_obs;
  set.x = r.get_array<double>(h.rows * h.dims, "x");
  set.z = r.get_array<double>(h.rows * h.dims, "z");
  set.y = r.get_array<double>(h.rows * h.dims, "y");
  if (r.offset() != r.size()) throw LoadError(path + ": trailing bytes after last field");
  return set;
}

}  // namespace bflow
