#pragma once

// Scalar Gaussian helpers shared by the denoisers.

#include <algorithm>
#include <cmath>
#include <numbers>

namespace shygamp::special {

inline constexpr double kInvSqrt2Pi = 0.3989422804014327;
inline constexpr double kLogSqrt2Pi = 0.9189385332046728;

inline double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

inline double normal_log_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

/// log N(x; mean, var)
inline double gaussian_log_density(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * d * d / var - 0.5 * std::log(var) - kLogSqrt2Pi;
}

inline double gaussian_density(double x, double mean, double var) {
  return std::exp(gaussian_log_density(x, mean, var));
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

/// log Phi(x), accurate deep into the lower tail.
inline double normal_log_cdf(double x) {
  if (x > -20.0) return std::log(normal_cdf(x));
  // Asymptotic expansion of the Mills ratio.
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
  return normal_log_pdf(x) - std::log(-x) + std::log(series);
}

/// phi(x) / Phi(x) without underflow for large negative x.
inline double inverse_mills(double x) {
  if (x > -20.0) return std::exp(normal_log_pdf(x) - normal_log_cdf(x));
  const double x2 = x * x;
  const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
  return -x / series;
}

/// log(exp(a) + exp(b))
inline double log_add_exp(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace shygamp::special
