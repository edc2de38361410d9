// Kolmogorov-Smirnov statistics and small summary helpers.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "bflow/core.hpp"

namespace bflow {

/// Asymptotic Kolmogorov survival function Q(lambda) = P(K > lambda).
inline double kolmogorov_q(double lambda) {
  if (lambda < 1e-3) return 1.0;
  if (lambda < 1.18) {
    // Small-lambda form converges faster here.
    const double y = std::exp(-kPi * kPi / (8.0 * lambda * lambda));
    double s = 0;
    for (int k = 1; k < 200; k += 2) s += std::pow(y, k * k);
    return std::clamp(1.0 - std::sqrt(2.0 * kPi) / lambda * s, 0.0, 1.0);
  }
  double s = 0;
  for (int k = 1; k <= 100; ++k) s += (k % 2 ? 2.0 : -2.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(s, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0;
  double p_value = 1;
};

/// One-sample test against a continuous CDF.
inline KsResult ks_one_sample(std::vector<double> x, const std::function<double(double)>& cdf) {
  if (x.empty()) throw ConfigError("ks_one_sample: empty sample");
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)};
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline KsResult ks_normal(std::vector<double> x, double mean = 0.0, double sd = 1.0) {
  return ks_one_sample(std::move(x), [=](double v) { return normal_cdf((v - mean) / sd); });
}

/// Two-sample statistic sup |F_a - F_b| with ties handled jointly.
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ConfigError("ks_two_sample: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  return {d, kolmogorov_q((ne + 0.12 + 0.11 / ne) * d)};
}

inline double mean_of(std::span<const double> x) {
  if (x.empty()) throw ConfigError("mean_of: empty sample");
  double s = 0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

/// Unbiased sample variance.
inline double variance_of(std::span<const double> x) {
  if (x.size() < 2) throw ConfigError("variance_of: need at least two values");
  const double m = mean_of(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

}  // namespace bflow
