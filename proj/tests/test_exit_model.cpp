#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bflow/exit_model.hpp"
#include "bflow/problems.hpp"

using namespace bflow;

namespace {

ObservationSet synthetic(std::size_t M, std::uint64_t seed, double (*p_of_x)(double)) {
  ObservationSet obs;
  obs.dims = 1;
  obs.dt_obs = 0.05;
  RngStream rng(seed, 0);
  for (std::size_t m = 0; m < M; ++m) {
    const double x = rng.uniform(0, 6);
    obs.x.push_back(x);
    obs.dx.push_back(0.0);
    obs.gamma.push_back(rng.uniform() < p_of_x(x) ? 1 : 0);
  }
  return obs;
}

ExitModelConfig small_config(std::size_t epochs) {
  ExitModelConfig c;
  c.hidden = {32, 32};
  c.dropout = 0.0;
  c.epochs = epochs;
  c.batch_size = 256;
  c.lr = 3e-3;
  c.cosine_decay = true;
  return c;
}

double step_profile(double x) { return x < 2 ? 0.1 : (x < 4 ? 0.5 : 0.8); }

}  // namespace

TEST(TrainExit, RefusesSingleClassAndEmpty) {
  auto obs = synthetic(100, 1, [](double) { return 0.0; });
  EXPECT_THROW(train_exit(obs, small_config(1), 1), ConfigError);
  auto ones = synthetic(100, 1, [](double) { return 1.0; });
  EXPECT_THROW(train_exit(ones, small_config(1), 1), ConfigError);
  ObservationSet empty;
  empty.dims = 1;
  EXPECT_THROW(train_exit(empty, small_config(1), 1), ConfigError);
}

TEST(TrainExit, ConstantRateIsRecovered) {
  const auto obs = synthetic(20000, 2, [](double) { return 0.3; });
  const auto res = train_exit(obs, small_config(15), 3);
  RngStream rng(77, 0);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0, 6);
    EXPECT_NEAR(predict_exit_one(res.model, std::vector<double>{x}), 0.3, 0.02) << x;
  }
}

TEST(TrainExit, SupErrorShrinksWithData) {
  auto sup_error = [](std::size_t M) {
    const auto obs = synthetic(M, 10 + M, step_profile);
    const auto res = train_exit(obs, small_config(20), 4);
    double worst = 0;
    for (double x = 0.05; x < 6; x += 0.01) {
      if (std::abs(x - 2) < 0.25 || std::abs(x - 4) < 0.25) continue;
      worst = std::max(worst, std::abs(predict_exit_one(res.model, std::vector<double>{x}) - step_profile(x)));
    }
    return worst;
  };
  EXPECT_LT(sup_error(100000), sup_error(10000));
}

TEST(TrainExit, DeterministicGivenSeed) {
  const auto obs = synthetic(3000, 5, step_profile);
  const auto a = train_exit(obs, small_config(3), 9);
  const auto b = train_exit(obs, small_config(3), 9);
  EXPECT_EQ(a.curve.epoch_loss, b.curve.epoch_loss);
  EXPECT_EQ(a.model.net.W[1], b.model.net.W[1]);
}

TEST(PredictExit, BoundedAndBatchConsistent) {
  const auto obs = synthetic(5000, 6, step_profile);
  auto cfg = small_config(2);
  cfg.dropout = 0.2;
  const auto res = train_exit(obs, cfg, 1);
  RngStream rng(3, 0);
  std::vector<double> xs(100000);
  for (auto& x : xs) x = rng.uniform(-50, 50);
  const auto p = predict_exit(res.model, xs);
  for (double v : p) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  for (std::size_t i = 0; i < 100; ++i) EXPECT_NEAR(predict_exit_one(res.model, std::span(&xs[i], 1)), p[i], 1e-14);
}

TEST(PredictExit, OneDimensionalBenchmarkAgainstSeries) {
  // Bridge-monitored exits make the series the exact fixed point; discrete
  // monitoring at dt_sim = 5e-4 sits ~0.045 below it at x = 0.05.
  Brownian1D b;
  Brownian1DSystem sys(b);
  const auto ens = simulate_ensemble(sys, uniform_box_sampler(sys.domain()), 20000, TimeMesh{5e-4, 0.05, 1.0}, 31,
                                     {ExitDetection::BrownianBridge});
  const auto obs = segment(ens, sys.domain());
  auto cfg = small_config(30);
  cfg.batch_size = 1024;
  cfg.lr = 5e-3;
  const auto res = train_exit(obs, cfg, 2);
  EXPECT_LT(predict_exit_one(res.model, std::vector<double>{3.0}), 0.01);
  const double series = exit_prob_series_1d(0.05, 0.05, 6.0);
  EXPECT_NEAR(predict_exit_one(res.model, std::vector<double>{0.05}), series, 0.05);
  double worst = 0;
  for (double x = 0.1; x <= 5.9; x += 0.05)
    worst = std::max(worst, std::abs(predict_exit_one(res.model, std::vector<double>{x}) -
                                     exit_prob_series_1d(x, 0.05, 6.0)));
  EXPECT_LT(worst, 0.05);
}

TEST(KlDivergence, Examples) {
  const std::vector<double> p{0.2, 0.5, 0.3}, q{0.1, 0.6, 0.3};
  EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-15);
  EXPECT_NEAR(kl_divergence(p, q), 0.2 * std::log(2.0) + 0.5 * std::log(5.0 / 6.0), 1e-15);
  const std::vector<double> zeros(3, 0.0);
  const double big = kl_divergence(p, zeros);
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 0.2 * std::log(0.2e8) + 0.5 * std::log(0.5e8) + 0.3 * std::log(0.3e8), 1e-9);
  const std::vector<double> w{1, 0, 0};
  EXPECT_NEAR(kl_divergence(p, q, w), 0.2 * std::log(2.0), 1e-15);
  EXPECT_THROW(kl_divergence(p, std::vector<double>{0.1}), ShapeError);
  EXPECT_THROW(kl_divergence(std::vector<double>{1.5}, std::vector<double>{0.1}), DomainError);
}

TEST(ExitCheckpoint, RoundTrip) {
  const auto obs = synthetic(2000, 7, step_profile);
  const auto res = train_exit(obs, small_config(1), 1);
  const auto path = (std::filesystem::temp_directory_path() / "bflow_exit_ckpt.bin").string();
  save_exit_model(res.model, path);
  const auto back = load_exit_model(path, 1);
  EXPECT_EQ(back.scaler.mean, res.model.scaler.mean);
  EXPECT_EQ(back.scaler.scale, res.model.scaler.scale);
  EXPECT_EQ(back.dt_obs, 0.05);
  const std::vector<double> xs{0.1, 2.5, 5.9};
  EXPECT_EQ(predict_exit(back, xs), predict_exit(res.model, xs));
  EXPECT_THROW(load_exit_model(path, 2), LoadError);
  std::filesystem::remove(path);
}
