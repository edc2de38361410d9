// Run configuration: TOML in, validated structs out, plus a canonical text
// form per section that stage manifests hash.
#pragma once

#include <toml.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bflow/core.hpp"
#include "bflow/diffusion_labeler.hpp"
#include "bflow/exit_model.hpp"
#include "bflow/flowmap_generator.hpp"
#include "bflow/problems.hpp"
#include "bflow/sde.hpp"

namespace bflow {

enum class ProblemKind { Brownian1D, Cellular2D, Runaway3D };

inline std::string to_string(ProblemKind p) {
  switch (p) {
    case ProblemKind::Brownian1D: return "brownian1d";
    case ProblemKind::Cellular2D: return "cellular2d";
    case ProblemKind::Runaway3D: return "runaway3d";
  }
  return "?";
}

inline ProblemKind problem_from_string(const std::string& s) {
  if (s == "brownian1d") return ProblemKind::Brownian1D;
  if (s == "cellular2d") return ProblemKind::Cellular2D;
  if (s == "runaway3d") return ProblemKind::Runaway3D;
  throw ConfigError("unknown problem '" + s + "' (expected brownian1d, cellular2d or runaway3d)");
}

inline std::string to_string(ExitDetection d) { return d == ExitDetection::Discrete ? "discrete" : "brownian_bridge"; }

inline ExitDetection detection_from_string(const std::string& s) {
  if (s == "discrete") return ExitDetection::Discrete;
  if (s == "brownian_bridge") return ExitDetection::BrownianBridge;
  throw ConfigError("unknown exit detection '" + s + "' (expected discrete or brownian_bridge)");
}

inline std::string to_string(ExitMode m) { return m == ExitMode::Hybrid ? "hybrid" : "geometric"; }

inline ExitMode exit_mode_from_string(const std::string& s) {
  if (s == "hybrid") return ExitMode::Hybrid;
  if (s == "geometric") return ExitMode::GeometricOnly;
  throw ConfigError("unknown sampling mode '" + s + "' (expected hybrid or geometric)");
}

struct RunConfig {
  std::string name = "run";
  ProblemKind problem = ProblemKind::Brownian1D;
  std::uint64_t seed = 1;
  std::size_t threads = 0;
  std::string output_dir;
};

struct SimulationConfig {
  std::size_t n_traj = 100000;
  double dt_sim = 5e-4;
  double dt_obs = 0.05;
  double t_max = 1.0;
  ExitDetection detection = ExitDetection::Discrete;
  /// "uniform_box", or "maxwellian" with T0 drawn uniformly from init_T0.
  std::string init = "uniform_box";
  std::vector<double> init_T0{1.0, 10.0};

  TimeMesh mesh() const { return {dt_sim, dt_obs, t_max}; }
};

struct EvaluationConfig {
  double t_max = 1.0;
  std::vector<double> times{1.0};
  std::size_t n_truth = 200000;
  std::size_t n_surrogate = 200000;
  std::vector<std::vector<double>> starts;
  std::size_t bins = 100;
  bool ablations = false;
  // exit-rate curve along one axis
  std::size_t curve_axis = 0;
  std::vector<double> curve_base;
  double curve_lo = 0;
  double curve_hi = 0;
  std::size_t curve_points = 0;
  std::size_t curve_n = 20000;
  // exit-probability grid (one observation interval)
  std::vector<double> grid_lo;
  std::vector<double> grid_hi;
  std::vector<std::size_t> grid_n;
  std::size_t grid_samples = 1000;
  // runaway study
  std::vector<double> T0;
  double p_star = 1.75;
  std::vector<double> runaway_times;
  double escape_p_low = 1.5;
  double escape_p_high = 3.0;
  // 1D studies
  std::vector<std::size_t> kl_sizes;
  std::size_t kl_seeds = 3;
  std::size_t kl_points = 10000;
  std::size_t oracle_points = 21;
  std::size_t oracle_samples = 20000;
  std::vector<std::size_t> timing_sizes;
};

struct PipelineConfig {
  RunConfig run;
  Brownian1D brownian;
  CellularFlow2D cellular;
  RunawayElectron3D runaway;
  SimulationConfig simulation;
  ExitModelConfig exit_model;
  LabelerConfig labeler;
  GeneratorConfig generator;
  ExitMode sampling = ExitMode::Hybrid;
  std::size_t chunk = 1024;
  EvaluationConfig evaluation;
  double scale = 1.0;

  std::size_t dims() const {
    switch (run.problem) {
      case ProblemKind::Brownian1D: return 1;
      case ProblemKind::Cellular2D: return 2;
      case ProblemKind::Runaway3D: return 3;
    }
    return 0;
  }
};

namespace detail {

/// Reads fields from one TOML table, remembering which keys were consumed.
class TomlReader {
 public:
  TomlReader(const toml::table* t, std::string section) : t_(t), section_(std::move(section)) {}

  template <class T>
  void operator()(const std::string& key, T& field) {
    if (!t_) return;
    const toml::node* n = t_->get(key);
    if (!n) return;
    used_.insert(key);
    read(key, *n, field);
  }

  void finish() const {
    if (!t_) return;
    for (auto&& [k, v] : *t_) {
      const std::string key(k.str());
      if (!used_.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section_ + "]");
    }
  }

 private:
  [[noreturn]] void bad(const std::string& key, const std::string& want) const {
    throw ConfigError("[" + section_ + "] " + key + ": expected " + want);
  }

  double number(const std::string& key, const toml::node& n) const {
    if (auto v = n.value_exact<double>()) return *v;
    if (auto v = n.value_exact<std::int64_t>()) return static_cast<double>(*v);
    bad(key, "a number");
  }

  std::uint64_t count(const std::string& key, const toml::node& n) const {
    if (auto v = n.value_exact<std::int64_t>(); v && *v >= 0) return static_cast<std::uint64_t>(*v);
    // Large budgets are often written as 2e5.
    if (auto v = n.value_exact<double>(); v && *v >= 0 && *v == std::floor(*v) && *v < 9e18)
      return static_cast<std::uint64_t>(*v);
    bad(key, "a non-negative integer");
  }

  void read(const std::string& key, const toml::node& n, double& f) const { f = number(key, n); }
  void read(const std::string& key, const toml::node& n, std::size_t& f) const { f = count(key, n); }
  void read(const std::string& key, const toml::node& n, int& f) const {
    const auto v = n.value_exact<std::int64_t>();
    if (!v) bad(key, "an integer");
    f = static_cast<int>(*v);
  }
  void read(const std::string& key, const toml::node& n, bool& f) const {
    const auto v = n.value_exact<bool>();
    if (!v) bad(key, "true or false");
    f = *v;
  }
  void read(const std::string& key, const toml::node& n, std::string& f) const {
    const auto v = n.value_exact<std::string>();
    if (!v) bad(key, "a string");
    f = *v;
  }
  void read(const std::string& key, const toml::node& n, std::vector<double>& f) const {
    const auto* a = n.as_array();
    if (!a) bad(key, "an array of numbers");
    f.clear();
    for (const auto& e : *a) f.push_back(number(key, e));
  }
  void read(const std::string& key, const toml::node& n, std::vector<std::size_t>& f) const {
    const auto* a = n.as_array();
    if (!a) bad(key, "an array of integers");
    f.clear();
    for (const auto& e : *a) f.push_back(count(key, e));
  }
  void read(const std::string& key, const toml::node& n, std::vector<std::vector<double>>& f) const {
    const auto* a = n.as_array();
    if (!a) bad(key, "an array of arrays");
    f.clear();
    for (const auto& e : *a) {
      std::vector<double> row;
      read(key, e, row);
      f.push_back(std::move(row));
    }
  }
  void read(const std::string& key, const toml::node& n, ProblemKind& f) const {
    std::string s;
    read(key, n, s);
    f = problem_from_string(s);
  }
  void read(const std::string& key, const toml::node& n, ExitDetection& f) const {
    std::string s;
    read(key, n, s);
    f = detection_from_string(s);
  }
  void read(const std::string& key, const toml::node& n, ExitMode& f) const {
    std::string s;
    read(key, n, s);
    f = exit_mode_from_string(s);
  }
  void read(const std::string& key, const toml::node& n, OdeGrid& f) const {
    std::string s;
    read(key, n, s);
    f = ode_grid_from_string(s);
  }
  void read(const std::string& key, const toml::node& n, Activation& f) const {
    std::string s;
    read(key, n, s);
    f = activation_from_string(s);
  }

  const toml::table* t_;
  std::string section_;
  std::set<std::string> used_;
};

/// Emits "key=value" lines in visiting order; numbers at full precision.
class CanonicalWriter {
 public:
  template <class T>
  void operator()(const std::string& key, const T& field) {
    out_ += key + "=" + text(field) + "\n";
  }
  const std::string& str() const { return out_; }

 private:
  static std::string text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string text(std::size_t v) { return std::to_string(v); }
  static std::string text(int v) { return std::to_string(v); }
  static std::string text(bool v) { return v ? "true" : "false"; }
  static std::string text(const std::string& v) { return "\"" + v + "\""; }
  template <class E>
    requires std::is_enum_v<E>
  static std::string text(E e) {
    return bflow::to_string(e);
  }
  template <class T>
  static std::string text(const std::vector<T>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + text(v[i]);
    return s + "]";
  }

  std::string out_;
};

template <class V>
void visit_run(V& v, RunConfig& c) {
  v("name", c.name);
  v("problem", c.problem);
  std::size_t seed = c.seed;
  v("seed", seed);
  c.seed = seed;
  v("threads", c.threads);
  v("output_dir", c.output_dir);
}

template <class V>
void visit_problem(V& v, PipelineConfig& c) {
  switch (c.run.problem) {
    case ProblemKind::Brownian1D:
      v("L", c.brownian.L);
      break;
    case ProblemKind::Cellular2D:
      v("Pe", c.cellular.Pe);
      v("n", c.cellular.n);
      v("L", c.cellular.L);
      break;
    case ProblemKind::Runaway3D: {
      auto& q = c.runaway;
      v("Z", q.Z);
      v("tau", q.tau);
      v("E0", q.E0);
      v("T_ref", q.T_ref);
      v("T_final", q.T_final);
      v("mc2", q.mc2);
      v("D0", q.D0);
      v("r_m", q.r_m);
      v("L_D", q.L_D);
      v("delta_p", q.delta_p);
      v("coulomb_log_ratio", q.coulomb_log_ratio);
      v("p_min", q.p_min);
      v("p_max", q.p_max);
      v("r_init_max", q.r_init_max);
      break;
    }
  }
}

template <class V>
void visit_simulation(V& v, SimulationConfig& c) {
  v("n_traj", c.n_traj);
  v("dt_sim", c.dt_sim);
  v("dt_obs", c.dt_obs);
  v("t_max", c.t_max);
  v("detection", c.detection);
  v("init", c.init);
  v("init_T0", c.init_T0);
}

template <class V>
void visit_exit_model(V& v, ExitModelConfig& c) {
  v("hidden", c.hidden);
  v("activation", c.activation);
  v("leaky_slope", c.leaky_slope);
  v("dropout", c.dropout);
  v("lr", c.lr);
  v("weight_decay", c.weight_decay);
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("cosine_decay", c.cosine_decay);
}

template <class V>
void visit_labeler(V& v, LabelerConfig& c) {
  v("k_nn", c.k_nn);
  v("k_steps", c.k_steps);
  v("eps_clip", c.eps_clip);
  v("labels_per_x", c.labels_per_x);
  v("grid", c.grid);
  v("max_rows", c.max_rows);
  v("include_exits", c.include_exits);
}

template <class V>
void visit_generator_training(V& v, PipelineConfig& p) {
  auto& c = p.generator;
  v("hidden", c.hidden);
  v("activation", c.activation);
  v("leaky_slope", c.leaky_slope);
  v("lr", c.lr);
  v("weight_decay", c.weight_decay);
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("cosine_decay", c.cosine_decay);
}

template <class V>
void visit_sampling(V& v, PipelineConfig& p) {
  v("sampling", p.sampling);
  v("chunk", p.chunk);
}

template <class V>
void visit_generator(V& v, PipelineConfig& p) {
  visit_generator_training(v, p);
  visit_sampling(v, p);
}

template <class V>
void visit_evaluation(V& v, EvaluationConfig& c) {
  v("t_max", c.t_max);
  v("times", c.times);
  v("n_truth", c.n_truth);
  v("n_surrogate", c.n_surrogate);
  v("starts", c.starts);
  v("bins", c.bins);
  v("ablations", c.ablations);
  v("curve_axis", c.curve_axis);
  v("curve_base", c.curve_base);
  v("curve_lo", c.curve_lo);
  v("curve_hi", c.curve_hi);
  v("curve_points", c.curve_points);
  v("curve_n", c.curve_n);
  v("grid_lo", c.grid_lo);
  v("grid_hi", c.grid_hi);
  v("grid_n", c.grid_n);
  v("grid_samples", c.grid_samples);
  v("T0", c.T0);
  v("p_star", c.p_star);
  v("runaway_times", c.runaway_times);
  v("escape_p_low", c.escape_p_low);
  v("escape_p_high", c.escape_p_high);
  v("kl_sizes", c.kl_sizes);
  v("kl_seeds", c.kl_seeds);
  v("kl_points", c.kl_points);
  v("oracle_points", c.oracle_points);
  v("oracle_samples", c.oracle_samples);
  v("timing_sizes", c.timing_sizes);
}

inline bool on_mesh(double t, double dt) {
  const double n = t / dt;
  return t >= 0 && std::abs(n - std::round(n)) <= 1e-9 * std::max(1.0, n);
}

}  // namespace detail

/// Problem parameters with the mesh taken from [simulation].
inline void sync_problem(PipelineConfig& c) {
  const auto& s = c.simulation;
  c.brownian.dt_sim = c.cellular.dt_sim = c.runaway.dt_sim = s.dt_sim;
  c.brownian.dt_obs = c.cellular.dt_obs = c.runaway.dt_obs = s.dt_obs;
  c.brownian.t_max = c.cellular.t_max = c.runaway.t_max = s.t_max;
  if (c.run.problem == ProblemKind::Brownian1D && !c.evaluation.starts.empty() && !c.evaluation.starts[0].empty())
    c.brownian.x0 = c.evaluation.starts[0][0];
}

inline void validate(const PipelineConfig& c) {
  const std::size_t d = c.dims();
  if (c.run.name.empty() || c.run.name.find('/') != std::string::npos)
    throw ConfigError("[run] name must be a non-empty plain file name");
  switch (c.run.problem) {
    case ProblemKind::Brownian1D: c.brownian.validate(); break;
    case ProblemKind::Cellular2D: c.cellular.validate(); break;
    case ProblemKind::Runaway3D: c.runaway.validate(); break;
  }
  const auto& s = c.simulation;
  s.mesh().validate();
  if (s.n_traj == 0) throw ConfigError("[simulation] n_traj must be positive");
  if (s.init != "uniform_box" && s.init != "maxwellian")
    throw ConfigError("[simulation] init must be uniform_box or maxwellian");
  if (s.init == "maxwellian") {
    if (c.run.problem != ProblemKind::Runaway3D) throw ConfigError("[simulation] init = maxwellian needs runaway3d");
    if (s.init_T0.size() != 2 || !(s.init_T0[0] > 0) || !(s.init_T0[0] <= s.init_T0[1]))
      throw ConfigError("[simulation] init_T0 must be [lo, hi] with 0 < lo <= hi");
  }
  c.exit_model.validate();
  c.labeler.validate();
  c.generator.validate();
  if (c.chunk == 0) throw ConfigError("[generator] chunk must be positive");
  if (!(c.scale > 0) || !std::isfinite(c.scale)) throw ConfigError("--scale must be positive");

  const auto& e = c.evaluation;
  if (!detail::on_mesh(e.t_max, s.dt_obs) || !(e.t_max > 0))
    throw ConfigError("[evaluation] t_max must be a positive multiple of dt_obs");
  for (double t : e.times)
    if (!detail::on_mesh(t, s.dt_obs) || t > e.t_max + 1e-12)
      throw ConfigError("[evaluation] times must lie on the observation mesh within t_max");
  for (double t : e.runaway_times)
    if (!detail::on_mesh(t, s.dt_obs) || t > e.t_max + 1e-12)
      throw ConfigError("[evaluation] runaway_times must lie on the observation mesh within t_max");
  if (e.n_truth == 0 || e.n_surrogate == 0) throw ConfigError("[evaluation] n_truth and n_surrogate must be positive");
  if (e.bins == 0) throw ConfigError("[evaluation] bins must be positive");
  for (const auto& st : e.starts)
    if (st.size() != d) throw ConfigError("[evaluation] every start needs " + std::to_string(d) + " coordinates");
  if (e.curve_points) {
    if (e.curve_axis >= d) throw ConfigError("[evaluation] curve_axis out of range");
    if (e.curve_base.size() != d) throw ConfigError("[evaluation] curve_base needs one value per dimension");
    if (!(e.curve_lo < e.curve_hi) || e.curve_points < 2) throw ConfigError("[evaluation] curve range is empty");
    if (e.curve_n == 0) throw ConfigError("[evaluation] curve_n must be positive");
  }
  if (!e.grid_n.empty()) {
    if (e.grid_n.size() != d || e.grid_lo.size() != d || e.grid_hi.size() != d)
      throw ConfigError("[evaluation] grid_lo, grid_hi and grid_n need one entry per dimension");
    for (std::size_t i = 0; i < d; ++i)
      if (e.grid_n[i] == 0 || e.grid_lo[i] > e.grid_hi[i]) throw ConfigError("[evaluation] grid axis is empty");
    if (e.grid_samples == 0) throw ConfigError("[evaluation] grid_samples must be positive");
  }
  if (!e.T0.empty() && c.run.problem != ProblemKind::Runaway3D)
    throw ConfigError("[evaluation] T0 is only meaningful for runaway3d");
  for (double t : e.T0)
    if (!(t > 0)) throw ConfigError("[evaluation] T0 values must be positive");
  if (!(e.p_star > 0)) throw ConfigError("[evaluation] p_star must be positive");
  if (!e.kl_sizes.empty()) {
    if (c.run.problem != ProblemKind::Brownian1D) throw ConfigError("[evaluation] kl_sizes needs brownian1d");
    for (auto n : e.kl_sizes)
      if (n == 0) throw ConfigError("[evaluation] kl_sizes must be positive");
    if (e.kl_seeds == 0 || e.kl_points == 0) throw ConfigError("[evaluation] kl_seeds and kl_points must be positive");
  }
  if (e.oracle_points == 1) throw ConfigError("[evaluation] oracle_points must be 0 or at least 2");
  if (e.oracle_points && e.oracle_samples == 0) throw ConfigError("[evaluation] oracle_samples must be positive");
  for (auto n : e.timing_sizes)
    if (n == 0) throw ConfigError("[evaluation] timing_sizes must be positive");
  if (c.run.problem == ProblemKind::Runaway3D && e.starts.empty() && e.T0.empty())
    throw ConfigError("[evaluation] runaway3d needs T0 values or starts");
  if (c.run.problem != ProblemKind::Runaway3D && e.starts.empty() && !e.curve_points)
    throw ConfigError("[evaluation] need starts or an exit-rate curve");
}

/// Budget after --scale, never below one.
inline std::size_t scaled(std::size_t n, double s) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * s)));
}

/// Shrinks (or grows) every sample budget; epochs and architectures stay.
inline void apply_scale(PipelineConfig& c, double s) {
  c.scale = s;
  if (s == 1.0) return;
  c.simulation.n_traj = scaled(c.simulation.n_traj, s);
  if (c.labeler.max_rows) c.labeler.max_rows = scaled(c.labeler.max_rows, s);
  auto& e = c.evaluation;
  e.n_truth = scaled(e.n_truth, s);
  e.n_surrogate = scaled(e.n_surrogate, s);
  e.curve_n = scaled(e.curve_n, s);
  e.grid_samples = scaled(e.grid_samples, s);
  for (auto& n : e.kl_sizes) n = scaled(n, s);
  e.oracle_samples = scaled(e.oracle_samples, s);
  for (auto& n : e.timing_sizes) n = scaled(n, s);
}

/// MC-limited tolerances widen by 1/sqrt(scale) when budgets shrink.
inline double widen_tolerance(double tol, double scale) { return scale < 1.0 ? tol / std::sqrt(scale) : tol; }

inline PipelineConfig parse_config(const toml::table& root, double scale = 1.0) {
  static const std::set<std::string> sections{"run",       "problem",   "simulation", "exit_model",
                                              "labeler",   "generator", "evaluation"};
  for (auto&& [k, v] : root) {
    const std::string key(k.str());
    if (!sections.count(key)) throw ConfigError("unknown top-level key or section '" + key + "'");
    if (!v.is_table()) throw ConfigError("'" + key + "' must be a table");
  }
  PipelineConfig c;
  const toml::table* run = root["run"].as_table();
  if (!run || !run->get("problem")) throw ConfigError("[run] problem is required");
  auto section = [&](const char* name, auto&& visit) {
    detail::TomlReader r(root[name].as_table(), name);
    visit(r);
    r.finish();
  };
  section("run", [&](auto& r) { detail::visit_run(r, c.run); });
  section("problem", [&](auto& r) { detail::visit_problem(r, c); });
  section("simulation", [&](auto& r) { detail::visit_simulation(r, c.simulation); });
  section("exit_model", [&](auto& r) { detail::visit_exit_model(r, c.exit_model); });
  section("labeler", [&](auto& r) { detail::visit_labeler(r, c.labeler); });
  section("generator", [&](auto& r) { detail::visit_generator(r, c); });
  section("evaluation", [&](auto& r) { detail::visit_evaluation(r, c.evaluation); });
  sync_problem(c);
  apply_scale(c, scale);
  validate(c);
  return c;
}

inline PipelineConfig load_config(const std::string& path, double scale = 1.0) {
  toml::table root;
  try {
    root = toml::parse_file(path);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << path << ": " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(os.str());
  }
  return parse_config(root, scale);
}

inline PipelineConfig parse_config_string(std::string_view text, double scale = 1.0) {
  try {
    return parse_config(toml::parse(text), scale);
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string("config: ") + std::string(e.description()));
  }
}

/// Canonical text of the named sections, in the order given. Threads and the
/// output directory do not affect results and are left out.
inline std::string canonical_sections(const PipelineConfig& cfg, const std::vector<std::string>& names) {
  PipelineConfig c = cfg;
  std::string out;
  for (const auto& name : names) {
    detail::CanonicalWriter w;
    if (name == "run") {
      w("problem", c.run.problem);
      w("seed", static_cast<std::size_t>(c.run.seed));
      w("scale", c.scale);
    } else if (name == "problem") {
      detail::visit_problem(w, c);
    } else if (name == "simulation") {
      detail::visit_simulation(w, c.simulation);
    } else if (name == "exit_model") {
      detail::visit_exit_model(w, c.exit_model);
    } else if (name == "labeler") {
      detail::visit_labeler(w, c.labeler);
    } else if (name == "generator") {
      detail::visit_generator_training(w, c);
    } else if (name == "sampling") {
      detail::visit_sampling(w, c);
    } else if (name == "evaluation") {
      detail::visit_evaluation(w, c.evaluation);
    } else {
      throw ConfigError("canonical_sections: unknown section " + name);
    }
    out += "[" + name + "]\n" + w.str();
  }
  return out;
}

}  // namespace bflow
