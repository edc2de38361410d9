#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bflow/pipeline.hpp"

using namespace bflow;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
[run]
name = "tiny"
problem = "brownian1d"
seed = 11

[simulation]
n_traj = 600
t_max = 0.5

[exit_model]
hidden = [8]
dropout = 0.0
epochs = 3
batch_size = 256

[labeler]
k_nn = 32
k_steps = 40
grid = "sqrt_tau"
max_rows = 300

[generator]
hidden = [8]
epochs = 3
batch_size = 64

[evaluation]
t_max = 1.0
times = [0.5, 1.0]
starts = [[1.0]]
n_truth = 500
n_surrogate = 500
bins = 20
ablations = true
grid_lo = [0.0]
grid_hi = [6.0]
grid_n = [7]
grid_samples = 50
kl_sizes = [100, 200]
kl_seeds = 1
kl_points = 50
oracle_points = 5
oracle_samples = 100
)";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bflow_pipeline_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<fs::path> files_with(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

Pipeline quiet(const PipelineConfig& c, const fs::path& dir) { return Pipeline(c, dir, nullptr); }

}  // namespace

TEST(Pipeline, ReproIsByteIdenticalAcrossRunsAndThreadCounts) {
  TempDir a("a"), b("b");
  auto cfg = parse_config_string(kTiny);
  cfg.run.threads = 1;
  quiet(cfg, a.path).repro();
  cfg.run.threads = 3;
  quiet(cfg, b.path).repro();
  const auto csv = files_with(a.path, ".csv");
  ASSERT_FALSE(csv.empty());
  EXPECT_EQ(csv, files_with(b.path, ".csv"));
  for (const auto& f : csv) EXPECT_EQ(slurp(a.path / f), slurp(b.path / f)) << f;
  for (const char* f : {"train.bflow", "exit.bfnn", "labels.bflow", "generator.bfnn", "results/report.json"})
    EXPECT_EQ(slurp(a.path / f), slurp(b.path / f)) << f;
  set_worker_count(0);
}

TEST(Pipeline, OutputsCarryTheManifestReference) {
  TempDir d("ref");
  auto p = quiet(parse_config_string(kTiny), d.path);
  p.repro();
  for (const auto& f : files_with(d.path, ".csv")) {
    const std::string head = slurp(d.path / f).substr(0, 12);
    EXPECT_EQ(head, "# manifest: ") << f;
  }
  const Manifest m = load_manifest((d.path / "evaluate.manifest.json").string());
  EXPECT_EQ(m.upstream.count("simulate-truth"), 1u);
  EXPECT_EQ(m.upstream.count("generate.ablation-all"), 1u);
  for (const auto& [k, v] : m.outputs) EXPECT_EQ(git_blob_sha1_file((d.path / v.path).string()), v.sha1) << k;
  const Manifest r = load_manifest((d.path / "repro.manifest.json").string());
  EXPECT_TRUE(r.info.contains("stage_seconds"));
}

TEST(Pipeline, ReportHasConsistentConfinementAndMassAccounting) {
  TempDir d("report");
  auto p = quiet(parse_config_string(kTiny), d.path);
  const auto rep = p.repro();
  const auto& t = rep.at("confinement").at("start0");
  EXPECT_TRUE(t.at("mass_ok").get<bool>());
  for (const char* m : {"mc", "surrogate", "ablation-all", "ablation-confined"}) {
    const auto v = t.at(m).get<std::vector<double>>();
    ASSERT_EQ(v.size(), 2u) << m;
    EXPECT_GE(v[0], v[1]) << m;  // confinement never increases
    EXPECT_GE(v[1], 0.0);
    EXPECT_LE(v[0], 1.0);
  }
  EXPECT_EQ(rep.at("kl").at("mean").size(), 2u);
  EXPECT_EQ(rep.at("oracle").at("mc").size(), 5u);
  const auto csv = read_csv((d.path / "results" / "confinement_start0.csv").string());
  EXPECT_EQ(csv.rows.size(), 2u);
  EXPECT_EQ(csv.header.front(), "t");
}

TEST(Pipeline, MissingUpstreamNamesThePathAndStage) {
  TempDir d("missing");
  auto p = quiet(parse_config_string(kTiny), d.path);
  try {
    p.train_exit();
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find((d.path / "train.bflow").string()), std::string::npos) << msg;
    EXPECT_NE(msg.find("build-dataset"), std::string::npos) << msg;
  }
  EXPECT_THROW(p.generate(), ArtifactError);
  EXPECT_THROW(p.evaluate("table"), ArtifactError);
}

TEST(Pipeline, StaleConfigurationIsRefused) {
  TempDir d("stale");
  const auto cfg = parse_config_string(kTiny);
  quiet(cfg, d.path).build_dataset();
  auto changed = cfg;
  changed.simulation.n_traj += 1;
  try {
    quiet(changed, d.path).train_exit();
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("stale"), std::string::npos) << e.what();
  }
  // Settings a stage does not read leave it valid.
  auto unrelated = cfg;
  unrelated.generator.epochs += 1;
  EXPECT_NO_THROW(quiet(unrelated, d.path).train_exit());
}

TEST(Pipeline, ModifiedArtifactIsRefused) {
  TempDir d("tamper");
  auto p = quiet(parse_config_string(kTiny), d.path);
  p.build_dataset();
  std::ofstream(d.path / "train.bflow", std::ios::app) << "x";
  EXPECT_THROW(p.train_exit(), ArtifactError);
}

TEST(Pipeline, SamplingModeDoesNotInvalidateTrainedModels) {
  TempDir d("mode");
  auto cfg = parse_config_string(kTiny);
  auto p = quiet(cfg, d.path);
  p.build_dataset();
  p.train_exit();
  p.label();
  p.train_generator();
  cfg.sampling = ExitMode::GeometricOnly;
  auto q = quiet(cfg, d.path);
  EXPECT_NO_THROW(q.generate());
  EXPECT_TRUE(fs::exists(d.path / "generate.ablation-confined.manifest.json"));
}

TEST(Pipeline, ArtifactFromAnotherProblemIsRejected) {
  TempDir d("dims");
  auto one = parse_config_string(kTiny);
  quiet(one, d.path).build_dataset();
  const auto m = load_manifest((d.path / "build-dataset.manifest.json").string());
  // A 2D run pointed at the same directory sees a different config hash.
  auto two = parse_config_string(R"(
[run]
name = "tiny"
problem = "cellular2d"
seed = 11
[simulation]
n_traj = 100
[evaluation]
starts = [[0.0, 1.0]]
)");
  EXPECT_THROW(quiet(two, d.path).train_exit(), ArtifactError);
  // Loading the 1D dataset as 2D is a shape problem in its own right.
  EXPECT_ANY_THROW(load_observations((d.path / "train.bflow").string(), 2));
  EXPECT_EQ(m.stage, "build-dataset");
}

TEST(Pipeline, UnknownEvaluationIsConfigError) {
  TempDir d("spec");
  EXPECT_THROW(quiet(parse_config_string(kTiny), d.path).evaluate("figure-12"), ConfigError);
}

TEST(Pipeline, RunDirectoryPrecedence) {
  auto cfg = parse_config_string(kTiny);
  EXPECT_EQ(run_directory(cfg, "/x/y"), fs::path("/x/y"));
  cfg.run.output_dir = "/from/config";
  EXPECT_EQ(run_directory(cfg), fs::path("/from/config"));
  cfg.run.output_dir.clear();
  ::setenv("BFLOW_OUTPUT_ROOT", "/env/root", 1);
  EXPECT_EQ(run_directory(cfg), fs::path("/env/root/tiny"));
  ::unsetenv("BFLOW_OUTPUT_ROOT");
  EXPECT_EQ(run_directory(cfg), fs::path("runs/tiny"));
}
