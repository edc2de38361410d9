#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "bflow/rng.hpp"

using namespace bflow;

TEST(Philox, KnownAnswerVectors) {
  using A4 = std::array<std::uint32_t, 4>;
  EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}), (A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RngStream, SameSeedAndStreamReproduce) {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
}

TEST(RngStream, StreamsDiffer) {
  std::set<std::uint64_t> first;
  for (std::uint64_t s = 0; s < 256; ++s) first.insert(RngStream(1, s)());
  EXPECT_EQ(first.size(), 256u);
}

TEST(RngStream, UniformRangeAndMoments) {
  RngStream r(3, 0);
  double sum = 0, sum2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double v = r.uniform_open();
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
    sum += u;
    sum2 += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 4 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(sum2 / n - std::pow(sum / n, 2), 1.0 / 12, 2e-3);
}

TEST(RngStream, NormalMoments) {
  RngStream r(9, 1);
  const int n = 400000;
  double m1 = 0, m2 = 0, m4 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    m1 += z;
    m2 += z * z;
    m4 += z * z * z * z;
  }
  m1 /= n;
  m2 /= n;
  m4 /= n;
  EXPECT_NEAR(m1, 0.0, 4 / std::sqrt(n));
  EXPECT_NEAR(m2, 1.0, 4 * std::sqrt(2.0 / n));
  EXPECT_NEAR(m4, 3.0, 4 * std::sqrt(96.0 / n));
}

TEST(DeriveSeed, TagsSeparateStages) {
  EXPECT_NE(derive_seed(1, "simulate"), derive_seed(1, "label"));
  EXPECT_NE(derive_seed(1, "label"), derive_seed(2, "label"));
  EXPECT_EQ(derive_seed(5, "train"), derive_seed(5, "train"));
}
