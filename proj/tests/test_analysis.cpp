#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bflow/analysis.hpp"
#include "bflow/flowmap_generator.hpp"

using namespace bflow;

namespace {

Trajectory path(std::vector<double> states, std::size_t dims, bool exited, std::size_t final_index) {
  Trajectory t;
  t.dims = dims;
  t.dt_obs = 0.05;
  t.states = std::move(states);
  t.exited = exited;
  t.final_index = final_index;
  return t;
}

}  // namespace

TEST(Grid, TensorOrderingFirstAxisSlowest) {
  const std::vector<double> lo{0, 10}, hi{1, 12};
  const std::vector<std::size_t> n{2, 3};
  const auto g = tensor_grid(lo, hi, n);
  ASSERT_EQ(g.size(), 6u);
  EXPECT_EQ(g.point(0)[0], 0.0);
  EXPECT_EQ(g.point(0)[1], 10.0);
  EXPECT_EQ(g.point(1)[1], 11.0);
  EXPECT_EQ(g.point(3)[0], 1.0);
  EXPECT_EQ(g.point(5)[1], 12.0);
}

TEST(ExitGrid, SeriesAtWallIsOne) {
  PointGrid g{1, {0.0, 3.0, 6.0}};
  const auto p = exit_prob_series(g, 0.05, 6.0);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_LT(p[1], 1e-10);
  EXPECT_EQ(p[2], 1.0);
}

TEST(ExitGrid, McAgreesWithSeriesUnderBridgeMonitoring) {
  Brownian1D b;
  Brownian1DSystem sys(b);
  PointGrid g{1, {0.0, 0.05, 0.2, 0.5, 3.0}};
  const std::size_t n = 4000;
  const auto mc = exit_prob_mc(sys, g, n, 5e-4, 0.05, 3, {ExitDetection::BrownianBridge});
  const auto ex = exit_prob_series(g, 0.05, 6.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double se = std::sqrt(std::max(ex[i] * (1 - ex[i]), 1e-6) / n);
    EXPECT_NEAR(mc[i], ex[i], 4 * se + 1e-12) << g.points[i];
  }
}

TEST(ExitGrid, ZeroBudgetIsError) {
  Brownian1D b;
  Brownian1DSystem sys(b);
  EXPECT_THROW(exit_prob_mc(sys, PointGrid{1, {1.0}}, 0, 5e-4, 0.05, 1), ConfigError);
}

TEST(ExitGrid, CellularMirrorSymmetry) {
  CellularFlow2D c;
  CellularFlow2DSystem sys(c);
  const std::vector<double> lo{-2.5, 0.2}, hi{2.5, 1.8};
  const std::vector<std::size_t> n{5, 5};
  const auto g = tensor_grid(lo, hi, n);
  const std::size_t ns = 2000;
  const auto p = exit_prob_mc(sys, g, ns, 5e-4, 0.05, 8);
  double diff = 0, se = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const double a = p[i * 5 + j], b = p[i * 5 + (4 - j)];
      diff += std::abs(a - b);
      se += std::sqrt((a * (1 - a) + b * (1 - b)) / ns);
    }
  // Mean |difference| of two independent estimates is about 0.8 of their sd.
  EXPECT_LT(diff / 25, se / 25);
}

TEST(Confinement, TableAndErrors) {
  std::vector<Trajectory> a{path({1, 2, 3}, 1, false, 2), path({1, 9}, 1, true, 1)};
  std::vector<Trajectory> b{path({1}, 1, true, 1), path({1}, 1, true, 1)};
  const std::vector<MethodTrajectories> sets{{"mc", a}, {"gen", b}};
  const std::vector<double> times{0.0, 0.05, 0.1};
  const auto rep = confinement_table(sets, times, 0.1);
  EXPECT_EQ(rep.fractions[0], (std::vector<double>{1.0, 0.5, 0.5}));
  EXPECT_EQ(rep.fractions[1], (std::vector<double>{1.0, 0.0, 0.0}));
  const std::vector<double> late{0.15};
  EXPECT_THROW(confinement_table(sets, late, 0.1), DomainError);
  std::vector<Trajectory> c{path({1}, 1, false, 0)};
  c[0].dt_obs = 0.1;
  const std::vector<MethodTrajectories> mixed{{"mc", a}, {"other", c}};
  EXPECT_THROW(confinement_table(mixed, times, 0.1), ConfigError);
  EXPECT_THROW(time_index(0.07, 0.05), DomainError);
}

TEST(Confinement, MassAccounting) {
  const DomainSpec dom{{0.0}, {6.0}, {Boundary::AbsorbingBoth}};
  GenerateOptions o;
  o.n_steps_max = 30;
  const auto ens = generate_ensemble(constant_exit_fn(0.05), [](auto, auto z, auto dx) {
    for (std::size_t i = 0; i < z.size(); ++i) dx[i] = 0.2 * z[i];
  }, dom, 0.05, point_sampler({3.0}), 1000, o, 2);
  for (std::size_t k = 0; k <= 30; ++k) EXPECT_DOUBLE_EQ(confined_fraction(ens, k) + escaped_fraction(ens, k), 1.0);
}

TEST(Pdfs, DeltaAndJointConsistency) {
  std::vector<Trajectory> t;
  RngStream rng(1, 0);
  for (int i = 0; i < 500; ++i)
    t.push_back(path({0.3, 0.7, rng.uniform(), rng.uniform()}, 2, i % 5 == 0, i % 5 == 0 ? 1 : 1));
  const std::vector<Axis> axes{{0, 1, 10}, {0, 1, 20}};
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}};
  const auto at0 = marginal_and_joint_pdfs(t, 0, axes, pairs);
  EXPECT_EQ(at0.marginals[0].counts[3], 500u);
  EXPECT_EQ(at0.marginals[1].counts[14], 500u);
  const auto at1 = marginal_and_joint_pdfs(t, 1, axes, pairs);
  EXPECT_EQ(at1.confined, 400u);
  const auto& j = at1.joints[0];
  for (std::size_t a = 0; a < 10; ++a) {
    std::size_t s = 0;
    for (std::size_t b = 0; b < 20; ++b) s += j.counts[a * 20 + b];
    EXPECT_EQ(s, at1.marginals[0].counts[a]);
  }
  for (std::size_t b = 0; b < 20; ++b) {
    std::size_t s = 0;
    for (std::size_t a = 0; a < 10; ++a) s += j.counts[a * 20 + b];
    EXPECT_EQ(s, at1.marginals[1].counts[b]);
  }
  double integral = 0;
  for (double v : at1.marginals[0].density) integral += v * 0.1;
  EXPECT_NEAR(integral, 0.8, 1e-12);
  for (double v : j.density) EXPECT_GE(v, 0.0);
}

TEST(Pdfs, EmptyConfinedSetIsError) {
  std::vector<Trajectory> t{path({0.5}, 1, true, 1)};
  const std::vector<Axis> axes{{0, 1, 10}};
  EXPECT_THROW(marginal_and_joint_pdfs(t, 1, axes), ConfigError);
}

TEST(Runaway, TrivialCases) {
  std::vector<Trajectory> gone{path({2.0, 0.1, 0.5}, 3, true, 1), path({2.0, 0.1, 0.5}, 3, true, 1)};
  EXPECT_EQ(runaway_fraction(gone, 1), 0.0);
  std::vector<Trajectory> fast{path({2.0, 0.1, 0.5, 3.0, 0.2, 0.5}, 3, false, 1),
                               path({1.0, 0.1, 0.5, 1.8, 0.2, 0.5}, 3, false, 1)};
  EXPECT_EQ(runaway_fraction(fast, 1), 1.0);
  EXPECT_EQ(runaway_fraction(fast, 0), 0.5);
  std::vector<Trajectory> flat{path({2.0}, 1, false, 0)};
  EXPECT_THROW(runaway_fraction(flat, 0), ShapeError);
}

TEST(Csv, ManifestLineAndRows) {
  const auto p = (std::filesystem::temp_directory_path() / "bflow_csv_test.csv").string();
  {
    CsvWriter w(p, "abc123", {"t", "mc"});
    const std::vector<double> r{1.0, 0.6508};
    w.row(r);
    w.close();
  }
  std::ifstream is(p);
  std::string l1, l2, l3;
  std::getline(is, l1);
  std::getline(is, l2);
  std::getline(is, l3);
  EXPECT_EQ(l1, "# manifest: abc123");
  EXPECT_EQ(l2, "t,mc");
  EXPECT_EQ(l3, "1,0.6508");
  std::filesystem::remove(p);
}
