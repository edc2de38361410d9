// Stage orchestration: each stage reads upstream artifacts (refusing missing
// or stale ones), writes its outputs, and records a manifest next to them.
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bflow/analysis.hpp"
#include "bflow/config.hpp"
#include "bflow/dataset.hpp"
#include "bflow/diffusion_labeler.hpp"
#include "bflow/exit_model.hpp"
#include "bflow/flowmap_generator.hpp"
#include "bflow/manifest.hpp"
#include "bflow/parallel.hpp"
#include "bflow/problems.hpp"
#include "bflow/stats.hpp"
#include "bflow/svg.hpp"

namespace bflow {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Problem plumbing

template <class F>
decltype(auto) with_system(const PipelineConfig& c, F&& f) {
  switch (c.run.problem) {
    case ProblemKind::Brownian1D: {
      const Brownian1DSystem s(c.brownian);
      return f(s);
    }
    case ProblemKind::Cellular2D: {
      const CellularFlow2DSystem s(c.cellular);
      return f(s);
    }
    case ProblemKind::Runaway3D:
    default: {
      const RunawayElectron3DSystem s(c.runaway);
      return f(s);
    }
  }
}

inline DomainSpec physical_domain(const PipelineConfig& c) {
  switch (c.run.problem) {
    case ProblemKind::Brownian1D: return Brownian1DSystem(c.brownian).domain();
    case ProblemKind::Cellular2D: return c.cellular.domain_spec();
    case ProblemKind::Runaway3D: return c.runaway.domain_spec();
  }
  return {};
}

inline LearningCoordinates learning_coordinates(const PipelineConfig& c) {
  if (c.run.problem == ProblemKind::Runaway3D) return runaway_learning_coordinates(c.runaway);
  LearningCoordinates lc;
  lc.domain = physical_domain(c);
  return lc;
}

inline std::vector<std::string> column_names(const PipelineConfig& c) {
  switch (c.run.problem) {
    case ProblemKind::Brownian1D: return {"x"};
    case ProblemKind::Cellular2D: return {"x1", "x2"};
    case ProblemKind::Runaway3D: return {"p", "xi", "r"};
  }
  return {};
}

inline InitialSampler training_sampler(const PipelineConfig& c) {
  if (c.simulation.init == "maxwellian") {
    const auto q = c.runaway;
    const double lo = c.simulation.init_T0[0], hi = c.simulation.init_T0[1];
    return [q, lo, hi](RngStream& rng, std::span<double> x) {
      const double T0 = lo == hi ? lo : rng.uniform(lo, hi);
      const PhaseSpacePoint s = sample_maxwellian(T0, q, rng);
      x[0] = s.p;
      x[1] = s.xi;
      x[2] = s.r;
    };
  }
  return uniform_box_sampler(physical_domain(c));
}

/// Wraps a physical-coordinate sampler so it yields learning coordinates.
inline InitialSampler to_learning_sampler(const InitialSampler& s, const LearningCoordinates& lc, std::size_t d) {
  if (lc.identity()) return s;
  return [s, lc, d](RngStream& rng, std::span<double> x) {
    std::array<double, kMaxStateDims> ph{};
    s(rng, std::span<double>(ph.data(), d));
    lc.to_learning(std::span<const double>(ph.data(), d), x);
  };
}

/// One initial condition studied by simulate-truth and generate.
struct Scenario {
  std::string name;
  InitialSampler sampler;  // physical coordinates
  std::size_t n_truth = 0;
  std::size_t n_surrogate = 0;
  bool snapshots = false;
  std::string label;
};

inline std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::vector<double> curve_positions(const EvaluationConfig& e) {
  return linspace(e.curve_lo, e.curve_hi, e.curve_points);
}

inline std::vector<Scenario> scenarios(const PipelineConfig& c) {
  const auto& e = c.evaluation;
  std::vector<Scenario> out;
  for (std::size_t i = 0; i < e.starts.size(); ++i)
    out.push_back({"start" + std::to_string(i), point_sampler(e.starts[i]), e.n_truth, e.n_surrogate, true,
                   format_state(e.starts[i])});
  for (std::size_t j = 0; j < e.curve_points; ++j) {
    auto x = e.curve_base;
    x[e.curve_axis] = curve_positions(e)[j];
    out.push_back({"curve" + std::to_string(j), point_sampler(x), e.curve_n, e.curve_n, false, format_state(x)});
  }
  for (double T0 : e.T0)
    out.push_back({"T0_" + short_number(T0), maxwellian_sampler(T0, c.runaway), e.n_truth, e.n_surrogate, true,
                   "T0=" + short_number(T0)});
  return out;
}

inline std::size_t eval_steps(const PipelineConfig& c) { return time_index(c.evaluation.t_max, c.simulation.dt_obs); }

// ---------------------------------------------------------------------------
// Variants (ablations are configuration flags on labeling and sampling)

inline std::string label_tag(const PipelineConfig& c) { return c.labeler.include_exits ? ".all" : ""; }

inline std::string sampling_tag(const PipelineConfig& c) {
  if (c.sampling == ExitMode::GeometricOnly) return c.labeler.include_exits ? ".ablation-all" : ".ablation-confined";
  return c.labeler.include_exits ? ".all-hybrid" : "";
}

enum class Variant { Default, AblationAll, AblationConfined };

inline PipelineConfig with_variant(PipelineConfig c, Variant v) {
  if (v == Variant::AblationAll) {
    c.labeler.include_exits = true;
    c.sampling = ExitMode::GeometricOnly;
  } else if (v == Variant::AblationConfined) {
    c.labeler.include_exits = false;
    c.sampling = ExitMode::GeometricOnly;
  }
  return c;
}

// ---------------------------------------------------------------------------
// CSV input

struct CsvTable {
  std::string manifest_ref;
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ArtifactError("CSV has no column '" + name + "'");
  }
  std::vector<double> column(const std::string& name) const {
    const std::size_t c = col(name);
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(r.at(c));
    return v;
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArtifactError("missing artifact: " + path);
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  while (std::getline(is, line)) {
    if (line.rfind("# manifest: ", 0) == 0) {
      t.manifest_ref = line.substr(12);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (t.header.empty()) {
      t.header = split(line);
      continue;
    }
    std::vector<double> row;
    for (const auto& cell : split(line)) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw LoadError(path + ": non-numeric cell '" + cell + "'");
      }
    }
    if (row.size() != t.header.size()) throw LoadError(path + ": row width differs from header");
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw LoadError(path + ": empty CSV");
  return t;
}

// ---------------------------------------------------------------------------
// Pipeline

inline std::string default_output_root() {
  if (const char* env = std::getenv("BFLOW_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

inline fs::path run_directory(const PipelineConfig& c, const std::string& override_dir = {}) {
  if (!override_dir.empty()) return override_dir;
  if (!c.run.output_dir.empty()) return c.run.output_dir;
  return fs::path(default_output_root()) / c.run.name;
}

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, fs::path dir, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), dir_(std::move(dir)), log_(log) {
    fs::create_directories(dir_);
  }

  const PipelineConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }

  // --- stages -------------------------------------------------------------

  void build_dataset() {
    Stage st = begin("build-dataset", "", kDatasetSections);
    const auto t0 = now();
    const auto lc = learning_coordinates(cfg_);
    const std::size_t n = cfg_.simulation.n_traj;
    SimulationOptions so{cfg_.simulation.detection};
    auto trajs = with_system(cfg_, [&](const auto& sys) {
      return simulate_ensemble(sys, training_sampler(cfg_), n, cfg_.simulation.mesh(),
                               derive_seed(cfg_.run.seed, "train-trajectories"), so);
    });
    if (!lc.identity()) trajs = map_trajectories(trajs, lc.to_learning);
    const ObservationSet obs = segment(trajs, lc.domain);
    save_observations(obs, path("train.bflow"));
    output(st, "dataset", "train.bflow");
    st.m.info = {{"trajectories", n}, {"rows", obs.size()}, {"exits", obs.n_exits()}, {"skipped", obs.n_skipped}};
    note("build-dataset", std::to_string(n) + " trajectories, " + std::to_string(obs.size()) + " rows, " +
                              std::to_string(obs.n_exits()) + " exits" + elapsed(t0));
    finish(st);
  }

  void train_exit() {
    Stage st = begin("train-exit", "", kExitSections);
    require(st, "dataset", "build-dataset", "", kDatasetSections, "train.bflow");
    const auto t0 = now();
    const ObservationSet obs = load_observations(path("train.bflow"), cfg_.dims());
    check_dt(obs.dt_obs, "train.bflow");
    const auto res = bflow::train_exit(obs, cfg_.exit_model, derive_seed(cfg_.run.seed, "exit-model"));
    check_curve(res.curve, "exit model");
    save_exit_model(res.model, path("exit.bfnn"));
    output(st, "exit_model", "exit.bfnn");
    st.m.info = {{"final_loss", res.curve.epoch_loss.back()}};
    write_curve(st, "exit_training.csv", res.curve);
    note("train-exit", "final BCE " + format_number(res.curve.epoch_loss.back()) + elapsed(t0));
    finish(st);
  }

  void label() {
    const std::string tag = label_tag(cfg_);
    Stage st = begin("label", tag, kLabelSections);
    require(st, "dataset", "build-dataset", "", kDatasetSections, "train.bflow");
    const auto t0 = now();
    const ObservationSet obs = load_observations(path("train.bflow"), cfg_.dims());
    check_dt(obs.dt_obs, "train.bflow");
    const auto lc = learning_coordinates(cfg_);
    const auto res = build_labeled_set(obs, cfg_.labeler, derive_seed(cfg_.run.seed, "labels"), &lc.domain);
    for (const auto& w : res.warnings) note("label", "warning: " + w);
    const std::string file = "labels" + tag + ".bflow";
    save_labeled(res.set, path(file));
    output(st, "labels", file);
    st.m.info = {{"labeled_rows", res.set.size()}, {"pool", res.pool_size}, {"neighbors", res.neighbors},
                 {"warnings", res.warnings}};
    note("label" + tag, std::to_string(res.set.size()) + " labels from a pool of " + std::to_string(res.pool_size) +
                      elapsed(t0));
    finish(st);
  }

  void train_generator() {
    const std::string tag = label_tag(cfg_);
    Stage st = begin("train-generator", tag, kGeneratorSections);
    require(st, "labels", "label", tag, kLabelSections, "labels" + tag + ".bflow");
    const auto t0 = now();
    const LabeledSet lab = load_labeled(path("labels" + tag + ".bflow"), cfg_.dims());
    check_dt(lab.dt_obs, "labels" + tag + ".bflow");
    const auto res = bflow::train_generator(lab, cfg_.generator, derive_seed(cfg_.run.seed, "generator"));
    check_curve(res.curve, "generator");
    const std::string file = "generator" + tag + ".bfnn";
    save_generator(res.model, path(file));
    output(st, "generator", file);
    st.m.info = {{"final_loss", res.curve.epoch_loss.back()}};
    write_curve(st, "generator_training" + tag + ".csv", res.curve);
    note("train-generator", "final MSE " + format_number(res.curve.epoch_loss.back()) + elapsed(t0));
    finish(st);
  }

  void simulate_truth() {
    Stage st = begin("simulate-truth", "", kTruthSections);
    const auto t0 = now();
    fs::create_directories(dir_ / "truth");
    const std::size_t K = eval_steps(cfg_);
    TimeMesh mesh{cfg_.simulation.dt_sim, cfg_.simulation.dt_obs, cfg_.evaluation.t_max};
    SimulationOptions so{cfg_.simulation.detection};
    std::vector<std::vector<double>> by_p;
    for (const auto& sc : scenarios(cfg_)) {
      const auto trajs = with_system(cfg_, [&](const auto& sys) {
        return simulate_ensemble(sys, sc.sampler, sc.n_truth, mesh, derive_seed(cfg_.run.seed, "truth/" + sc.name), so);
      });
      write_summary(st, "truth", sc, trajs, K);
      if (cfg_.run.problem == ProblemKind::Runaway3D) by_p.push_back(escape_by_momentum(trajs, K));
    }
    if (!by_p.empty()) {
      const std::string file = "truth/escape_by_momentum.csv";
      CsvWriter w(path(file), ref(st), {"n_low", "escaped_low", "n_high", "escaped_high"});
      std::vector<double> total(4, 0.0);
      for (const auto& r : by_p)
        for (std::size_t i = 0; i < 4; ++i) total[i] += r[i];
      w.row(total);
      w.close();
      output(st, "escape_by_momentum", file);
    }
    note("simulate-truth", std::to_string(scenarios(cfg_).size()) + " scenarios" + elapsed(t0));
    finish(st);
  }

  void generate() {
    const std::string tag = sampling_tag(cfg_);
    const std::string ltag = label_tag(cfg_);
    Stage st = begin("generate", tag, kGenerateSections);
    const bool hybrid = cfg_.sampling == ExitMode::Hybrid;
    if (hybrid) require(st, "exit_model", "train-exit", "", kExitSections, "exit.bfnn");
    require(st, "generator", "train-generator", ltag, kGeneratorSections, "generator" + ltag + ".bfnn");
    const auto t0 = now();
    const std::size_t d = cfg_.dims();
    std::optional<ExitModel> F;
    if (hybrid) {
      F = load_exit_model(path("exit.bfnn"), d);
      check_dt(F->dt_obs, "exit.bfnn");
    }
    const GeneratorModel G = load_generator(path("generator" + ltag + ".bfnn"), d);
    check_dt(G.dt_obs, "generator" + ltag + ".bfnn");
    const auto lc = learning_coordinates(cfg_);
    const std::string sub = "surrogate" + tag;
    fs::create_directories(dir_ / sub);
    const std::size_t K = eval_steps(cfg_);
    GenerateOptions opt;
    opt.n_steps_max = K;
    opt.mode = cfg_.sampling;
    opt.chunk = cfg_.chunk;
    opt.project = lc.project;
    GenerationStats stats;
    for (const auto& sc : scenarios(cfg_)) {
      auto trajs = generate_ensemble(F ? exit_fn(*F) : ExitFn{}, step_fn(G), lc.domain, cfg_.simulation.dt_obs,
                                     to_learning_sampler(sc.sampler, lc, d), sc.n_surrogate, opt,
                                     derive_seed(cfg_.run.seed, "surrogate/" + sc.name), &stats);
      if (!lc.identity()) trajs = map_trajectories(trajs, lc.from_learning);
      write_summary(st, sub, sc, trajs, K);
    }
    st.m.info = {{"generator_evals", stats.generator_evals},
                 {"exit_evals", stats.exit_evals},
                 {"clamp_events", stats.clamp_events},
                 {"sampling", to_string(cfg_.sampling)}};
    note("generate" + tag, std::to_string(stats.generator_evals) + " generator evaluations, " +
                               std::to_string(stats.clamp_events) + " boundary folds" + elapsed(t0));
    finish(st);
  }

  /// Runs the named evaluation ("all" picks every study the config enables)
  /// and returns the numbers it wrote, keyed by study.
  nlohmann::json evaluate(const std::string& which = "all") {
    static const std::vector<std::string> known{"table",  "distributions", "exit-curve", "exit-grid", "runaway",
                                                "oracle", "kl",            "timing"};
    std::vector<std::string> studies;
    if (which == "all") {
      const auto& e = cfg_.evaluation;
      if (!e.starts.empty()) studies.push_back("table");
      if (!e.starts.empty() || !e.T0.empty()) studies.push_back("distributions");
      if (e.curve_points) studies.push_back("exit-curve");
      if (!e.grid_n.empty()) studies.push_back("exit-grid");
      if (!e.T0.empty()) studies.push_back("runaway");
      if (e.oracle_points && cfg_.run.problem == ProblemKind::Brownian1D) studies.push_back("oracle");
      if (!e.kl_sizes.empty()) studies.push_back("kl");
      if (!e.timing_sizes.empty()) studies.push_back("timing");
    } else {
      if (std::find(known.begin(), known.end(), which) == known.end())
        throw ConfigError("unknown evaluation '" + which + "'");
      studies.push_back(which);
    }
    Stage st = begin("evaluate", which == "all" ? "" : "." + which, kAllSections);
    fs::create_directories(dir_ / "results");
    nlohmann::json report = nlohmann::json::object();
    nlohmann::json timing;
    for (const auto& s : studies) {
      const auto t0 = now();
      if (s == "table") report["confinement"] = eval_table(st);
      if (s == "distributions") report["distributions"] = eval_distributions(st);
      if (s == "exit-curve") report["exit_curve"] = eval_exit_curve(st);
      if (s == "exit-grid") report["exit_grid"] = eval_exit_grid(st);
      if (s == "runaway") report["runaway"] = eval_runaway(st);
      if (s == "oracle") report["oracle"] = eval_oracle(st);
      if (s == "kl") report["kl"] = eval_kl(st);
      if (s == "timing") timing = eval_timing(st);
      note("evaluate", s + elapsed(t0));
    }
    if (!report.empty()) {
      const std::string file = "results/report" + (which == "all" ? std::string() : "." + which) + ".json";
      std::ofstream os(path(file), std::ios::trunc);
      os << report.dump(2) << '\n';
      os.close();
      output(st, "report", file);
    }
    st.m.info = {{"studies", studies}};
    if (!timing.is_null()) {
      st.m.info["timing"] = timing;
      report["timing"] = timing;
    }
    finish(st);
    return report;
  }

  /// All stages in order, plus the ablation variants when enabled.
  nlohmann::json repro() {
    const auto t0 = now();
    nlohmann::json stage_times = nlohmann::json::object();
    auto timed = [&](const std::string& name, auto&& fn) {
      const auto s = now();
      fn();
      stage_times[name] = seconds_since(s);
    };
    timed("simulate-truth", [&] { simulate_truth(); });
    timed("build-dataset", [&] { build_dataset(); });
    timed("train-exit", [&] { train_exit(); });
    timed("label", [&] { label(); });
    timed("train-generator", [&] { train_generator(); });
    timed("generate", [&] { generate(); });
    if (cfg_.evaluation.ablations) {
      const PipelineConfig base = cfg_;
      for (Variant v : {Variant::AblationAll, Variant::AblationConfined}) {
        cfg_ = with_variant(base, v);
        const std::string tag = sampling_tag(cfg_);
        if (v == Variant::AblationAll) {
          timed("label" + label_tag(cfg_), [&] { label(); });
          timed("train-generator" + label_tag(cfg_), [&] { train_generator(); });
        }
        timed("generate" + tag, [&] { generate(); });
      }
      cfg_ = base;
    }
    nlohmann::json report;
    timed("evaluate", [&] { report = evaluate("all"); });
    Manifest m;
    m.stage = "repro";
    m.config_hash = config_hash(kAllSections);
    m.seed = cfg_.run.seed;
    for (const auto& entry : fs::directory_iterator(dir_)) {
      const std::string name = entry.path().filename().string();
      if (entry.is_regular_file() && name.size() > 14 && name.ends_with(".manifest.json") && name != "repro.manifest.json")
        m.inputs[name] = {name, git_blob_sha1_file(entry.path().string())};
    }
    m.info = {{"stage_seconds", stage_times}, {"total_seconds", seconds_since(t0)}};
    if (report.contains("timing")) m.info["timing"] = report["timing"];
    save_manifest(m, path("repro.manifest.json"));
    note("repro", "done" + elapsed(t0));
    return report;
  }

 private:
  // --- manifests ----------------------------------------------------------

  inline static const std::vector<std::string> kDatasetSections{"run", "problem", "simulation"};
  inline static const std::vector<std::string> kExitSections{"run", "problem", "simulation", "exit_model"};
  inline static const std::vector<std::string> kLabelSections{"run", "problem", "simulation", "labeler"};
  inline static const std::vector<std::string> kGeneratorSections{"run", "problem", "simulation", "labeler",
                                                                   "generator"};
  inline static const std::vector<std::string> kTruthSections{"run", "problem", "simulation", "evaluation"};
  inline static const std::vector<std::string> kGenerateSections{
      "run", "problem", "simulation", "exit_model", "labeler", "generator", "sampling", "evaluation"};
  inline static const std::vector<std::string> kAllSections = kGenerateSections;

  struct Stage {
    Manifest m;
    std::string file;
  };

  std::string config_hash(const std::vector<std::string>& sections) const {
    return git_blob_sha1(canonical_sections(cfg_, sections));
  }

  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  static std::string manifest_name(const std::string& stage, const std::string& tag) {
    return stage + tag + ".manifest.json";
  }

  Stage begin(const std::string& stage, const std::string& tag, const std::vector<std::string>& sections) {
    if (cfg_.run.threads) set_worker_count(static_cast<unsigned>(cfg_.run.threads));
    Stage st;
    st.m.stage = stage + tag;
    st.m.config_hash = config_hash(sections);
    st.m.seed = cfg_.run.seed;
    st.file = manifest_name(stage, tag);
    return st;
  }

  std::string ref(const Stage& st) const { return st.file + " config " + st.m.config_hash.substr(0, 12); }

  /// Refuses a missing or stale upstream artifact.
  void require(Stage& st, const std::string& name, const std::string& up_stage, const std::string& up_tag,
               const std::vector<std::string>& up_sections, const std::string& rel) {
    const std::string art = path(rel);
    if (!fs::exists(art))
      throw ArtifactError("missing artifact " + art + " (run '" + up_stage + "' first)");
    const std::string mf = path(manifest_name(up_stage, up_tag));
    if (!fs::exists(mf)) throw ArtifactError("missing manifest " + mf + " for " + art);
    const Manifest up = load_manifest(mf);
    const std::string want = config_hash(up_sections);
    if (up.config_hash != want)
      throw ArtifactError("stale artifact " + art + ": it was produced by '" + up_stage + up_tag +
                          "' with config hash " + up.config_hash.substr(0, 12) + ", but the current configuration hashes to " +
                          want.substr(0, 12) + "; rerun '" + up_stage + "'");
    const std::string sha = git_blob_sha1_file(art);
    bool listed = false;
    for (const auto& [k, v] : up.outputs)
      if (v.path == rel) {
        listed = true;
        if (v.sha1 != sha)
          throw ArtifactError("stale artifact " + art + ": content hash " + sha.substr(0, 12) + " differs from " +
                              v.sha1.substr(0, 12) + " recorded by '" + up_stage + up_tag + "'; rerun '" + up_stage + "'");
      }
    if (!listed) throw ArtifactError("manifest " + mf + " does not list " + rel);
    st.m.inputs[name] = {rel, sha};
    st.m.upstream[up_stage + up_tag] = up.config_hash;
  }

  void output(Stage& st, const std::string& name, const std::string& rel) {
    st.m.outputs[name] = {rel, git_blob_sha1_file(path(rel))};
  }

  void finish(const Stage& st) { save_manifest(st.m, path(st.file)); }

  void check_dt(double dt, const std::string& what) const {
    if (std::abs(dt - cfg_.simulation.dt_obs) > 1e-12 * cfg_.simulation.dt_obs)
      throw ConfigError(what + " has dt_obs " + format_number(dt) + " but the configuration uses " +
                        format_number(cfg_.simulation.dt_obs));
  }

  static void check_curve(const TrainingCurve& c, const std::string& what) {
    if (c.epoch_loss.empty() || !std::isfinite(c.epoch_loss.back()))
      throw NumericError(what + ": training loss is not finite");
  }

  void write_curve(Stage& st, const std::string& file, const TrainingCurve& c) {
    CsvWriter w(path(file), ref(st), {"epoch", "loss"});
    for (std::size_t i = 0; i < c.epoch_loss.size(); ++i) {
      const std::vector<double> r{static_cast<double>(i + 1), c.epoch_loss[i]};
      w.row(r);
    }
    w.close();
    output(st, file, file);
  }

  // --- summaries ----------------------------------------------------------

  void write_summary(Stage& st, const std::string& sub, const Scenario& sc, std::span<const Trajectory> trajs,
                     std::size_t K) {
    const bool runaway = cfg_.run.problem == ProblemKind::Runaway3D;
    {
      const std::string file = sub + "/" + sc.name + ".curve.csv";
      std::vector<std::string> h{"t", "n", "confined", "escaped", "confined_fraction"};
      if (runaway) h.push_back("n_re");
      CsvWriter w(path(file), ref(st), h);
      for (std::size_t k = 0; k <= K; ++k) {
        std::size_t conf = 0;
        for (const auto& t : trajs) conf += t.confined_at(k);
        std::vector<double> r{static_cast<double>(k) * cfg_.simulation.dt_obs, static_cast<double>(trajs.size()),
                              static_cast<double>(conf), static_cast<double>(trajs.size() - conf),
                              static_cast<double>(conf) / static_cast<double>(trajs.size())};
        if (runaway) r.push_back(runaway_fraction(trajs, k, cfg_.evaluation.p_star));
        w.row(r);
      }
      w.close();
      output(st, sc.name + ".curve", file);
    }
    if (!sc.snapshots) return;
    for (double t : snapshot_times()) {
      const std::size_t k = time_index(t, cfg_.simulation.dt_obs);
      const std::string file = sub + "/" + sc.name + ".states_t" + short_number(t) + ".csv";
      CsvWriter w(path(file), ref(st), column_names(cfg_));
      for (const auto& tr : trajs)
        if (tr.confined_at(k)) w.row(tr.state_at(k));
      w.close();
      output(st, sc.name + ".states_t" + short_number(t), file);
    }
  }

  std::vector<double> snapshot_times() const {
    std::vector<double> ts = cfg_.evaluation.times;
    for (double t : cfg_.evaluation.runaway_times)
      if (std::find(ts.begin(), ts.end(), t) == ts.end()) ts.push_back(t);
    return ts;
  }

  std::vector<double> escape_by_momentum(std::span<const Trajectory> trajs, std::size_t K) const {
    std::vector<double> r(4, 0.0);
    for (const auto& t : trajs) {
      const double p0 = t.state(0)[0];
      const bool esc = !t.confined_at(K);
      if (p0 < cfg_.evaluation.escape_p_low) r[0] += 1, r[1] += esc;
      if (p0 > cfg_.evaluation.escape_p_high) r[2] += 1, r[3] += esc;
    }
    return r;
  }

  // --- evaluation inputs --------------------------------------------------

  struct Sources {
    std::string truth = "truth";
    std::vector<std::pair<std::string, std::string>> methods;  // (label, directory)
  };

  /// Verifies the truth and surrogate manifests that evaluation reads.
  Sources sources(Stage& st, bool need_truth = true) {
    Sources s;
    if (need_truth) require_summary(st, "simulate-truth", "", kTruthSections, cfg_);
    require_summary(st, "generate", "", kGenerateSections, cfg_);
    s.methods.push_back({"surrogate", "surrogate"});
    if (cfg_.evaluation.ablations) {
      for (Variant v : {Variant::AblationAll, Variant::AblationConfined}) {
        const PipelineConfig vc = with_variant(cfg_, v);
        const std::string tag = sampling_tag(vc);
        require_summary(st, "generate", tag, kGenerateSections, vc);
        s.methods.push_back({tag.substr(1), "surrogate" + tag});
      }
    }
    return s;
  }

  void require_summary(Stage& st, const std::string& stage, const std::string& tag,
                       const std::vector<std::string>& sections, const PipelineConfig& as) {
    const std::string mf = path(manifest_name(stage, tag));
    if (!fs::exists(mf)) throw ArtifactError("missing manifest " + mf + " (run '" + stage + "' first)");
    const Manifest up = load_manifest(mf);
    const std::string want = git_blob_sha1(canonical_sections(as, sections));
    if (up.config_hash != want)
      throw ArtifactError("stale outputs of '" + stage + tag + "': produced with config hash " +
                          up.config_hash.substr(0, 12) + ", current configuration hashes to " + want.substr(0, 12) +
                          "; rerun '" + stage + "'");
    for (const auto& [k, v] : up.outputs) {
      const std::string art = path(v.path);
      if (!fs::exists(art)) throw ArtifactError("missing artifact " + art + " (rerun '" + stage + "')");
      if (git_blob_sha1_file(art) != v.sha1)
        throw ArtifactError("stale artifact " + art + ": content changed since '" + stage + tag + "' wrote it");
    }
    st.m.upstream[stage + tag] = up.config_hash;
    st.m.inputs[stage + tag] = {manifest_name(stage, tag), git_blob_sha1_file(mf)};
  }

  CsvTable summary(const std::string& sub, const std::string& file) const { return read_csv(path(sub + "/" + file)); }

  std::vector<Trajectory> snapshot_as_trajectories(const std::string& sub, const std::string& scenario, double t,
                                                   std::size_t n_total) const {
    const CsvTable tab = summary(sub, scenario + ".states_t" + short_number(t) + ".csv");
    const std::size_t d = cfg_.dims();
    std::vector<Trajectory> out;
    out.reserve(n_total);
    for (const auto& r : tab.rows) out.push_back({d, cfg_.simulation.dt_obs, r, false, 0});
    // Escaped particles only enter the normalization.
    while (out.size() < n_total) out.push_back({d, cfg_.simulation.dt_obs, std::vector<double>(d, 0.0), true, 0});
    return out;
  }

  std::size_t total_of(const std::string& sub, const std::string& scenario) const {
    return static_cast<std::size_t>(summary(sub, scenario + ".curve.csv").rows.at(0).at(1));
  }

  std::vector<Axis> histogram_axes() const {
    const DomainSpec dom = physical_domain(cfg_);
    std::vector<Axis> axes;
    for (std::size_t i = 0; i < dom.dims(); ++i) axes.push_back({dom.lower[i], dom.upper[i], cfg_.evaluation.bins});
    return axes;
  }

  // --- studies ------------------------------------------------------------

  nlohmann::json eval_table(Stage& st) {
    const Sources src = sources(st);
    nlohmann::json out = nlohmann::json::object();
    const auto& e = cfg_.evaluation;
    for (std::size_t i = 0; i < e.starts.size(); ++i) {
      const std::string sc = "start" + std::to_string(i);
      const CsvTable truth = summary(src.truth, sc + ".curve.csv");
      std::vector<CsvTable> methods;
      for (const auto& [label, sub] : src.methods) methods.push_back(summary(sub, sc + ".curve.csv"));
      std::vector<std::string> h{"t", "mc_percent"};
      for (const auto& [label, sub] : src.methods) h.push_back(label + "_percent");
      {
        CsvWriter w(path("results/confinement_" + sc + ".csv"), ref(st), h);
        for (double t : e.times) {
          const std::size_t k = time_index(t, cfg_.simulation.dt_obs);
          std::vector<double> r{t, 100 * truth.rows.at(k).at(truth.col("confined_fraction"))};
          for (const auto& m : methods) r.push_back(100 * m.rows.at(k).at(m.col("confined_fraction")));
          w.row(r);
        }
        w.close();
        output(st, "confinement_" + sc, "results/confinement_" + sc + ".csv");
      }
      nlohmann::json j;
      j["start"] = e.starts[i];
      j["times"] = e.times;
      j["n_mc"] = truth.rows.at(0).at(1);
      auto at_times = [&](const CsvTable& t) {
        std::vector<double> v;
        for (double tt : e.times) v.push_back(t.rows.at(time_index(tt, cfg_.simulation.dt_obs)).at(t.col("confined_fraction")));
        return v;
      };
      j["mc"] = at_times(truth);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        j[src.methods[m].first] = at_times(methods[m]);
        j["n_" + src.methods[m].first] = methods[m].rows.at(0).at(1);
      }
      std::vector<svg::Series> series{{"MC", truth.column("t"), truth.column("confined_fraction")}};
      for (std::size_t m = 0; m < methods.size(); ++m)
        series.push_back({src.methods[m].first, methods[m].column("t"), methods[m].column("confined_fraction")});
      svg::line_plot(path("results/confinement_" + sc + ".svg"), "confined fraction from " + format_state(e.starts[i]),
                     "t", "confined fraction", series);
      j["mass_ok"] = mass_accounting_ok(truth) && std::all_of(methods.begin(), methods.end(), mass_accounting_ok);
      out[sc] = j;
    }
    return out;
  }

  static bool mass_accounting_ok(const CsvTable& t) {
    for (const auto& r : t.rows)
      if (r.at(t.col("confined")) + r.at(t.col("escaped")) != r.at(t.col("n"))) return false;
    return true;
  }

  nlohmann::json eval_distributions(Stage& st) {
    const Sources src = sources(st);
    nlohmann::json out = nlohmann::json::object();
    const auto axes = histogram_axes();
    const auto names = column_names(cfg_);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < axes.size(); ++a)
      for (std::size_t b = a + 1; b < axes.size(); ++b) pairs.push_back({a, b});
    for (const auto& sc : scenarios(cfg_)) {
      if (!sc.snapshots) continue;
      for (double t : snapshot_times()) {
        const std::string tag = sc.name + "_t" + short_number(t);
        const auto mc = snapshot_as_trajectories(src.truth, sc.name, t, total_of(src.truth, sc.name));
        const auto su = snapshot_as_trajectories("surrogate", sc.name, t, total_of("surrogate", sc.name));
        nlohmann::json j;
        j["scenario"] = sc.label;
        j["t"] = t;
        std::size_t cm = 0, cs = 0;
        for (const auto& x : mc) cm += !x.exited;
        for (const auto& x : su) cs += !x.exited;
        j["confined_mc"] = cm;
        j["confined_surrogate"] = cs;
        j["n_mc"] = mc.size();
        j["n_surrogate"] = su.size();
        if (cm == 0 || cs == 0) {
          out[tag] = j;
          continue;
        }
        const PdfSet pm = marginal_and_joint_pdfs(mc, 0, axes, pairs);
        const PdfSet ps = marginal_and_joint_pdfs(su, 0, axes, pairs);
        {
          CsvWriter w(path("results/pdf_" + tag + ".csv"), ref(st), {"dim", "center", "mc", "surrogate"});
          for (std::size_t dmn = 0; dmn < axes.size(); ++dmn)
            for (std::size_t b = 0; b < axes[dmn].bins; ++b) {
              const std::vector<double> r{static_cast<double>(dmn), axes[dmn].center(b), pm.marginals[dmn].density[b],
                                          ps.marginals[dmn].density[b]};
              w.row(r);
            }
          w.close();
          output(st, "pdf_" + tag, "results/pdf_" + tag + ".csv");
        }
        for (std::size_t dmn = 0; dmn < axes.size(); ++dmn) {
          std::vector<double> centers;
          for (std::size_t b = 0; b < axes[dmn].bins; ++b) centers.push_back(axes[dmn].center(b));
          svg::line_plot(path("results/pdf_" + tag + "_" + names[dmn] + ".svg"), names[dmn] + " at t=" + short_number(t),
                         names[dmn], "density",
                         {{"MC", centers, pm.marginals[dmn].density}, {"surrogate", centers, ps.marginals[dmn].density}});
        }
        for (std::size_t p = 0; p < pairs.size(); ++p) {
          const auto [a, b] = pairs[p];
          const std::string jt = "joint_" + tag + "_" + names[a] + "_" + names[b];
          CsvWriter w(path("results/" + jt + ".csv"), ref(st), {names[a], names[b], "mc", "surrogate"});
          for (std::size_t i = 0; i < axes[a].bins; ++i)
            for (std::size_t k = 0; k < axes[b].bins; ++k) {
              const std::size_t c = i * axes[b].bins + k;
              const std::vector<double> r{axes[a].center(i), axes[b].center(k), pm.joints[p].density[c],
                                          ps.joints[p].density[c]};
              w.row(r);
            }
          w.close();
          output(st, jt, "results/" + jt + ".csv");
          // heatmap rows run along the second axis
          auto transpose = [&](const std::vector<double>& v) {
            std::vector<double> o(v.size());
            for (std::size_t i = 0; i < axes[a].bins; ++i)
              for (std::size_t k = 0; k < axes[b].bins; ++k) o[k * axes[a].bins + i] = v[i * axes[b].bins + k];
            return o;
          };
          svg::heatmap(path("results/" + jt + "_mc.svg"), "MC " + names[a] + "-" + names[b], names[a], names[b],
                       transpose(pm.joints[p].density), axes[a].bins, axes[b].bins, axes[a].lo, axes[a].hi, axes[b].lo,
                       axes[b].hi);
          svg::heatmap(path("results/" + jt + "_surrogate.svg"), "surrogate " + names[a] + "-" + names[b], names[a],
                       names[b], transpose(ps.joints[p].density), axes[a].bins, axes[b].bins, axes[a].lo, axes[a].hi,
                       axes[b].lo, axes[b].hi);
        }
        nlohmann::json ks = nlohmann::json::array();
        for (std::size_t dmn = 0; dmn < axes.size(); ++dmn) {
          const auto r = ks_two_sample(confined_values(mc, 0, dmn), confined_values(su, 0, dmn));
          ks.push_back({{"dim", names[dmn]}, {"statistic", r.statistic}, {"p_value", r.p_value}});
        }
        j["ks"] = ks;
        out[tag] = j;
      }
    }
    CsvWriter w(path("results/distribution_summary.csv"), ref(st),
                {"scenario", "t", "n_mc", "confined_mc", "n_surrogate", "confined_surrogate", "dim", "ks", "ks_p"});
    for (const auto& [tag, j] : out.items()) {
      if (!j.contains("ks")) continue;
      for (const auto& k : j["ks"])
        w.row(std::vector<std::string>{tag.substr(0, tag.rfind("_t")), format_number(j["t"]), format_number(j["n_mc"]),
                                       format_number(j["confined_mc"]), format_number(j["n_surrogate"]),
                                       format_number(j["confined_surrogate"]), k["dim"], format_number(k["statistic"]),
                                       format_number(k["p_value"])});
    }
    w.close();
    output(st, "distribution_summary", "results/distribution_summary.csv");
    return out;
  }

  nlohmann::json eval_exit_curve(Stage& st) {
    const Sources src = sources(st);
    const auto& e = cfg_.evaluation;
    const auto xs = curve_positions(e);
    std::vector<double> mc, su;
    for (std::size_t j = 0; j < e.curve_points; ++j) {
      const std::string sc = "curve" + std::to_string(j);
      const CsvTable a = summary(src.truth, sc + ".curve.csv"), b = summary("surrogate", sc + ".curve.csv");
      const auto& ra = a.rows.back();
      const auto& rb = b.rows.back();
      mc.push_back(ra.at(a.col("escaped")) / ra.at(a.col("n")));
      su.push_back(rb.at(b.col("escaped")) / rb.at(b.col("n")));
    }
    CsvWriter w(path("results/exit_curve.csv"), ref(st), {"position", "mc", "surrogate"});
    for (std::size_t j = 0; j < xs.size(); ++j) {
      const std::vector<double> r{xs[j], mc[j], su[j]};
      w.row(r);
    }
    w.close();
    output(st, "exit_curve", "results/exit_curve.csv");
    svg::line_plot(path("results/exit_curve.svg"), "escaped fraction at t=" + short_number(e.t_max),
                   column_names(cfg_)[e.curve_axis] + " (start)", "escaped fraction",
                   {{"MC", xs, mc, true}, {"surrogate", xs, su, true}});
    return {{"position", xs}, {"mc", mc}, {"surrogate", su}, {"n", e.curve_n}};
  }

  nlohmann::json eval_exit_grid(Stage& st) {
    const auto& e = cfg_.evaluation;
    const std::string up = path("exit.bfnn");
    Stage tmp;
    require(tmp, "exit_model", "train-exit", "", kExitSections, "exit.bfnn");
    st.m.inputs["exit_model"] = tmp.m.inputs["exit_model"];
    st.m.upstream.insert(tmp.m.upstream.begin(), tmp.m.upstream.end());
    const ExitModel F = load_exit_model(up, cfg_.dims());
    const PointGrid g = tensor_grid(e.grid_lo, e.grid_hi, e.grid_n);
    const auto lc = learning_coordinates(cfg_);
    PointGrid gl = g;
    if (!lc.identity())
      for (std::size_t i = 0; i < g.size(); ++i)
        lc.to_learning(g.point(i), std::span<double>(gl.points).subspan(i * g.dims, g.dims));
    const auto model = exit_prob_model(F, gl);
    const auto mc = with_system(cfg_, [&](const auto& sys) {
      return exit_prob_mc(sys, g, e.grid_samples, cfg_.simulation.dt_sim, cfg_.simulation.dt_obs,
                          derive_seed(cfg_.run.seed, "exit-grid"), {cfg_.simulation.detection});
    });
    std::vector<double> series;
    if (cfg_.run.problem == ProblemKind::Brownian1D) series = exit_prob_series(g, cfg_.simulation.dt_obs, cfg_.brownian.L);
    auto h = column_names(cfg_);
    h.push_back("model");
    h.push_back("mc");
    if (!series.empty()) h.push_back("series");
    CsvWriter w(path("results/exit_grid.csv"), ref(st), h);
    double mad = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      std::vector<double> r(g.point(i).begin(), g.point(i).end());
      r.push_back(model[i]);
      r.push_back(mc[i]);
      if (!series.empty()) r.push_back(series[i]);
      w.row(r);
      mad += std::abs(model[i] - mc[i]);
    }
    w.close();
    output(st, "exit_grid", "results/exit_grid.csv");
    // Heatmaps over the first two axes with more than one point.
    std::vector<std::size_t> ax;
    for (std::size_t i = 0; i < g.dims; ++i)
      if (e.grid_n[i] > 1) ax.push_back(i);
    if (ax.size() == 2) {
      const std::size_t a = ax[0], b = ax[1];
      auto rows = [&](const std::vector<double>& v) {
        // tensor order: first axis slowest -> transpose to rows along b
        std::vector<double> o(e.grid_n[a] * e.grid_n[b]);
        for (std::size_t i = 0; i < e.grid_n[a]; ++i)
          for (std::size_t k = 0; k < e.grid_n[b]; ++k) o[k * e.grid_n[a] + i] = v[i * e.grid_n[b] + k];
        return o;
      };
      const auto names = column_names(cfg_);
      svg::heatmap(path("results/exit_grid_model.svg"), "exit probability (model)", names[a], names[b], rows(model),
                   e.grid_n[a], e.grid_n[b], e.grid_lo[a], e.grid_hi[a], e.grid_lo[b], e.grid_hi[b]);
      svg::heatmap(path("results/exit_grid_mc.svg"), "exit probability (MC)", names[a], names[b], rows(mc),
                   e.grid_n[a], e.grid_n[b], e.grid_lo[a], e.grid_hi[a], e.grid_lo[b], e.grid_hi[b]);
    } else if (ax.size() == 1) {
      std::vector<double> x;
      for (std::size_t i = 0; i < g.size(); ++i) x.push_back(g.point(i)[ax[0]]);
      std::vector<svg::Series> s{{"model", x, model}, {"MC", x, mc}};
      if (!series.empty()) s.push_back({"series", x, series});
      svg::line_plot(path("results/exit_grid.svg"), "exit probability over one interval", column_names(cfg_)[ax[0]],
                     "P_exit", s);
    }
    return {{"points", g.size()}, {"samples", e.grid_samples}, {"mean_abs_diff", mad / static_cast<double>(g.size())}};
  }

  nlohmann::json eval_runaway(Stage& st) {
    const Sources src = sources(st);
    const auto& e = cfg_.evaluation;
    std::vector<std::vector<double>> mc(e.runaway_times.size()), su(e.runaway_times.size());
    CsvWriter ws(path("results/runaway_series.csv"), ref(st), {"T0", "t", "mc", "surrogate"});
    for (double T0 : e.T0) {
      const std::string sc = "T0_" + short_number(T0);
      const CsvTable a = summary(src.truth, sc + ".curve.csv"), b = summary("surrogate", sc + ".curve.csv");
      for (std::size_t k = 0; k < a.rows.size(); ++k) {
        const std::vector<double> r{T0, a.rows[k].at(0), a.rows[k].at(a.col("n_re")), b.rows[k].at(b.col("n_re"))};
        ws.row(r);
      }
      for (std::size_t i = 0; i < e.runaway_times.size(); ++i) {
        const std::size_t k = time_index(e.runaway_times[i], cfg_.simulation.dt_obs);
        mc[i].push_back(a.rows.at(k).at(a.col("n_re")));
        su[i].push_back(b.rows.at(k).at(b.col("n_re")));
      }
      svg::line_plot(path("results/runaway_series_" + sc + ".svg"), "n_RE(t), T0=" + short_number(T0), "t", "n_RE",
                     {{"MC", a.column("t"), a.column("n_re")}, {"surrogate", b.column("t"), b.column("n_re")}});
    }
    ws.close();
    output(st, "runaway_series", "results/runaway_series.csv");
    CsvWriter w(path("results/runaway.csv"), ref(st), {"T0", "t", "mc", "surrogate"});
    std::vector<svg::Series> series;
    for (std::size_t i = 0; i < e.runaway_times.size(); ++i) {
      for (std::size_t j = 0; j < e.T0.size(); ++j) {
        const std::vector<double> r{e.T0[j], e.runaway_times[i], mc[i][j], su[i][j]};
        w.row(r);
      }
      series.push_back({"MC t=" + short_number(e.runaway_times[i]), e.T0, mc[i], true});
      series.push_back({"surrogate t=" + short_number(e.runaway_times[i]), e.T0, su[i], true});
    }
    w.close();
    output(st, "runaway", "results/runaway.csv");
    svg::line_plot(path("results/runaway.svg"), "runaway fraction vs initial temperature", "T0", "n_RE", series);
    nlohmann::json j{{"T0", e.T0}, {"times", e.runaway_times}, {"mc", mc}, {"surrogate", su}};
    const CsvTable by_p = read_csv(path(src.truth + "/escape_by_momentum.csv"));
    const auto& r = by_p.rows.at(0);
    j["escape_low"] = r[0] > 0 ? r[1] / r[0] : 0.0;
    j["escape_high"] = r[2] > 0 ? r[3] / r[2] : 0.0;
    j["n_low"] = r[0];
    j["n_high"] = r[2];
    bool mass = true;
    for (double T0 : e.T0) {
      const std::string sc = "T0_" + short_number(T0);
      mass = mass && mass_accounting_ok(summary(src.truth, sc + ".curve.csv")) &&
             mass_accounting_ok(summary("surrogate", sc + ".curve.csv"));
    }
    j["mass_ok"] = mass;
    return j;
  }

  nlohmann::json eval_oracle(Stage& st) {
    const auto& e = cfg_.evaluation;
    const double L = cfg_.brownian.L;
    PointGrid g{1, linspace(0.0, L, e.oracle_points)};
    const Brownian1DSystem sys(cfg_.brownian);
    const auto mc = exit_prob_mc(sys, g, e.oracle_samples, cfg_.simulation.dt_sim, cfg_.simulation.dt_obs,
                                 derive_seed(cfg_.run.seed, "oracle"), {ExitDetection::BrownianBridge});
    const auto series = exit_prob_series(g, cfg_.simulation.dt_obs, L);
    CsvWriter w(path("results/exit_oracle.csv"), ref(st), {"x", "series", "mc", "se"});
    std::vector<double> se;
    for (std::size_t i = 0; i < g.size(); ++i) {
      se.push_back(std::sqrt(series[i] * (1 - series[i]) / static_cast<double>(e.oracle_samples)));
      const std::vector<double> r{g.points[i], series[i], mc[i], se.back()};
      w.row(r);
    }
    w.close();
    output(st, "exit_oracle", "results/exit_oracle.csv");
    return {{"x", g.points}, {"series", series}, {"mc", mc}, {"se", se}, {"samples", e.oracle_samples}};
  }

  /// Exit models trained on bridge-monitored data of increasing size,
  /// compared with the analytic series.
  nlohmann::json eval_kl(Stage& st) {
    const auto& e = cfg_.evaluation;
    const double L = cfg_.brownian.L;
    const Brownian1DSystem sys(cfg_.brownian);
    std::vector<double> pts(e.kl_points);
    RngStream rng(derive_seed(cfg_.run.seed, "kl-points"), 0);
    for (auto& x : pts) x = rng.uniform(0.0, L);
    std::vector<double> ref_p;
    for (double x : pts) ref_p.push_back(exit_prob_series_1d(x, cfg_.simulation.dt_obs, L));
    nlohmann::json values = nlohmann::json::array(), means = nlohmann::json::array();
    CsvWriter w(path("results/kl.csv"), ref(st), {"n_traj", "seed", "kl"});
    for (std::size_t n : e.kl_sizes) {
      std::vector<double> v;
      for (std::size_t s = 0; s < e.kl_seeds; ++s) {
        const std::string tag = "kl/" + std::to_string(n) + "/" + std::to_string(s);
        const auto trajs = simulate_ensemble(sys, uniform_box_sampler(sys.domain()), n, cfg_.simulation.mesh(),
                                             derive_seed(cfg_.run.seed, tag), {ExitDetection::BrownianBridge});
        const ObservationSet obs = segment(trajs, sys.domain());
        const auto F = bflow::train_exit(obs, cfg_.exit_model, derive_seed(cfg_.run.seed, tag + "/model")).model;
        v.push_back(kl_divergence(ref_p, predict_exit(F, pts)));
        const std::vector<double> r{static_cast<double>(n), static_cast<double>(s), v.back()};
        w.row(r);
        note("evaluate", "KL n=" + std::to_string(n) + " seed " + std::to_string(s) + ": " + format_number(v.back()));
      }
      values.push_back(v);
      means.push_back(mean_of(v));
    }
    w.close();
    output(st, "kl", "results/kl.csv");
    std::vector<double> xs, ms;
    for (std::size_t i = 0; i < e.kl_sizes.size(); ++i) {
      xs.push_back(std::log10(static_cast<double>(e.kl_sizes[i])));
      ms.push_back(means[i].get<double>());
    }
    svg::line_plot(path("results/kl.svg"), "KL(series || model)", "log10 trajectories", "KL", {{"mean", xs, ms, true}});
    return {{"sizes", e.kl_sizes}, {"values", values}, {"mean", means}};
  }

  /// Wall time of MC and of the surrogate at each configured size. Reported
  /// in the manifest only; it depends on the machine.
  nlohmann::json eval_timing(Stage& st) {
    const auto& e = cfg_.evaluation;
    Stage tmp;
    const bool hybrid = cfg_.sampling == ExitMode::Hybrid;
    if (hybrid) require(tmp, "exit_model", "train-exit", "", kExitSections, "exit.bfnn");
    require(tmp, "generator", "train-generator", "", kGeneratorSections, "generator.bfnn");
    st.m.inputs.insert(tmp.m.inputs.begin(), tmp.m.inputs.end());
    const std::size_t d = cfg_.dims();
    std::optional<ExitModel> F;
    if (hybrid) F = load_exit_model(path("exit.bfnn"), d);
    const GeneratorModel G = load_generator(path("generator.bfnn"), d);
    const auto lc = learning_coordinates(cfg_);
    const auto sc = scenarios(cfg_).at(0);
    TimeMesh mesh{cfg_.simulation.dt_sim, cfg_.simulation.dt_obs, e.t_max};
    GenerateOptions opt;
    opt.n_steps_max = eval_steps(cfg_);
    opt.mode = cfg_.sampling;
    opt.chunk = cfg_.chunk;
    opt.project = lc.project;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t n : e.timing_sizes) {
      const auto a = now();
      with_system(cfg_, [&](const auto& sys) {
        return simulate_ensemble(sys, sc.sampler, n, mesh, derive_seed(cfg_.run.seed, "timing/mc"),
                                 {cfg_.simulation.detection})
            .size();
      });
      const double t_mc = seconds_since(a);
      const auto b = now();
      generate_ensemble(F ? exit_fn(*F) : ExitFn{}, step_fn(G), lc.domain, cfg_.simulation.dt_obs,
                        to_learning_sampler(sc.sampler, lc, d), n, opt, derive_seed(cfg_.run.seed, "timing/surrogate"));
      const double t_sur = seconds_since(b);
      rows.push_back({{"n", n}, {"mc_seconds", t_mc}, {"surrogate_seconds", t_sur}});
      note("evaluate", "timing n=" + std::to_string(n) + ": MC " + format_number(t_mc) + " s, surrogate " +
                           format_number(t_sur) + " s");
    }
    nlohmann::json j{{"rows", rows}, {"workers", worker_count()}};
    if (rows.size() >= 2) {
      const auto& lo = rows.front();
      const auto& hi = rows.back();
      const double size_ratio = hi["n"].get<double>() / lo["n"].get<double>();
      j["size_ratio"] = size_ratio;
      j["mc_growth"] = hi["mc_seconds"].get<double>() / lo["mc_seconds"].get<double>();
      j["surrogate_growth"] = hi["surrogate_seconds"].get<double>() / lo["surrogate_seconds"].get<double>();
    }
    return j;
  }

  // --- misc ---------------------------------------------------------------

  using Clock = std::chrono::steady_clock;
  static Clock::time_point now() { return Clock::now(); }
  static double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }
  static std::string elapsed(Clock::time_point t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, " (%.1f s)", seconds_since(t));
    return buf;
  }

  void note(const std::string& stage, const std::string& msg) const {
    if (log_) *log_ << "[" << stage << "] " << msg << std::endl;
  }

  PipelineConfig cfg_;
  fs::path dir_;
  std::ostream* log_;
};

}  // namespace bflow
