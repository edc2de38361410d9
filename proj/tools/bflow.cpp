// bflow: run the pipeline stages from a TOML configuration.
//
// Exit codes: 0 ok, 2 configuration error, 3 numeric error, 4 missing or
// stale artifact.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "bflow/pipeline.hpp"

#ifndef BFLOW_SOURCE_DIR
#define BFLOW_SOURCE_DIR "."
#endif

namespace {

struct Common {
  std::string config;
  std::string out;
  double scale = 1.0;
  int threads = -1;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("-c,--config", c.config, "TOML configuration file");
  if (config_required) opt->required();
  cmd->add_option("-o,--out", c.out,
                  "Run directory (default: [run] output_dir, else $BFLOW_OUTPUT_ROOT/<name>, else runs/<name>)");
  cmd->add_option("--scale", c.scale, "Multiply every sample budget by this factor")->check(CLI::PositiveNumber);
  cmd->add_option("--threads", c.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
}

bflow::Pipeline open(const Common& c) {
  bflow::PipelineConfig cfg = bflow::load_config(c.config, c.scale);
  if (c.threads >= 0) cfg.run.threads = static_cast<std::size_t>(c.threads);
  bflow::set_worker_count(static_cast<unsigned>(cfg.run.threads));
  const auto dir = bflow::run_directory(cfg, c.out);
  std::cerr << "run directory: " << dir.string() << "  (scale " << cfg.scale << ", " << bflow::worker_count()
            << " workers)\n";
  return bflow::Pipeline(std::move(cfg), dir);
}

std::string benchmark_config(const std::string& name) {
  namespace fs = std::filesystem;
  if (fs::exists(name)) return name;
  std::vector<fs::path> dirs;
  if (const char* env = std::getenv("BFLOW_CONFIG_DIR"); env && *env) dirs.emplace_back(env);
  dirs.emplace_back("configs");
  dirs.emplace_back(fs::path(BFLOW_SOURCE_DIR) / "configs");
  for (const auto& d : dirs)
    if (fs::exists(d / (name + ".toml"))) return (d / (name + ".toml")).string();
  throw bflow::ConfigError("no configuration for benchmark '" + name +
                           "' (looked for <name>.toml in $BFLOW_CONFIG_DIR, ./configs and the source tree)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned flow-map surrogates for SDEs with absorbing boundaries"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(bflow::kToolVersion));

  Common c;
  std::string spec = "all";
  std::string benchmark;

  auto* truth = app.add_subcommand("simulate-truth", "Monte Carlo reference runs for every evaluation scenario");
  auto* dataset = app.add_subcommand("build-dataset", "Simulate training trajectories and segment them");
  auto* exit_cmd = app.add_subcommand("train-exit", "Train the exit-probability network");
  auto* label = app.add_subcommand("label", "Build (x, z, dx) labels with the training-free reverse ODE");
  auto* gen_train = app.add_subcommand("train-generator", "Fit the flow-map generator to the labels");
  auto* generate = app.add_subcommand("generate", "Sample surrogate trajectories for every scenario");
  auto* evaluate = app.add_subcommand("evaluate", "Compare surrogate and Monte Carlo outputs");
  auto* repro = app.add_subcommand("repro", "Run every stage of a benchmark in order");
  for (auto* cmd : {truth, dataset, exit_cmd, label, gen_train, generate, evaluate}) add_common(cmd, c);
  evaluate
      ->add_option("--spec", spec,
                   "table | distributions | exit-curve | exit-grid | runaway | oracle | kl | timing | all")
      ->capture_default_str();
  add_common(repro, c, false);
  repro->add_option("benchmark", benchmark, "brownian1d | cellular2d | runaway3d, or a config path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*repro) {
      if (c.config.empty()) {
        if (benchmark.empty()) throw bflow::ConfigError("repro needs a benchmark name or --config");
        c.config = benchmark_config(benchmark);
      }
      auto p = open(c);
      p.repro();
      std::cout << (p.dir() / "repro.manifest.json").string() << '\n';
      return 0;
    }
    auto p = open(c);
    if (*truth) p.simulate_truth();
    if (*dataset) p.build_dataset();
    if (*exit_cmd) p.train_exit();
    if (*label) p.label();
    if (*gen_train) p.train_generator();
    if (*generate) p.generate();
    if (*evaluate) std::cout << p.evaluate(spec).dump(2) << '\n';
    return 0;
  } catch (const bflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const bflow::ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const bflow::DomainError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const bflow::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const bflow::ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << '\n';
    return 4;
  } catch (const bflow::LoadError& e) {
    std::cerr << "artifact error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
