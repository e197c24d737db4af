#pragma once

// Synthetic classification benchmark: K-sparse orthonormal class means,
// isotropic Gaussian classes with the noise variance set to hit a target
// Bayes error, balanced datasets, and the expected test error of a
// linear classifier under that model.

#include <Eigen/Dense>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "shygamp/errors.hpp"
#include "shygamp/model.hpp"

namespace shygamp {

struct ErrorEstimate {
  double value = 0;
  double se = 0;
};

struct ClassModel {
  Matrix means;  ///< N x D, orthonormal columns sharing one K-row support
  double noise_var = 1.0;
  int sparsity = 0;
  ErrorEstimate bayes_error;

  int num_classes() const { return static_cast<int>(means.cols()); }
  Eigen::Index num_features() const { return means.rows(); }

  /// Weights of the Bayes (nearest-mean) classifier.
  WeightMatrix bayes_weights() const { return {means / noise_var}; }
};

inline ClassModel gen_means(Eigen::Index n, int k, int d, std::uint64_t seed, bool permute_support = false) {
  if (d < 1) throw InvalidArgument("need at least one class");
  if (k < d) throw InvalidArgument("sparsity K must be at least D to fit D orthonormal means");
  if (n < k) throw InvalidArgument("N must be at least K");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Matrix g(k, k);
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = normal(rng);
  Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeFullU);
  ClassModel model;
  model.sparsity = k;
  model.means = Matrix::Zero(n, d);
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  if (permute_support) std::shuffle(rows.begin(), rows.end(), rng);
  for (int i = 0; i < k; ++i) model.means.row(rows[static_cast<std::size_t>(i)]) = svd.matrixU().row(i).head(d);
  return model;
}

namespace detail {

/// Samples of max_{d != y} (u_d - u_y), u ~ N(0, I_D), sorted ascending.
/// An error occurs for noise variance v exactly when the statistic exceeds 1/sqrt(v).
inline std::vector<double> bayes_statistic(int d, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> t(samples);
  for (auto& ti : t) {
    const double uy = normal(rng);
    double best = -INFINITY;
    for (int j = 1; j < d; ++j) best = std::max(best, normal(rng) - uy);
    ti = best;
  }
  std::sort(t.begin(), t.end());
  return t;
}

inline double exceed_fraction(const std::vector<double>& sorted, double threshold) {
  const auto it = std::upper_bound(sorted.begin(), sorted.end(), threshold);
  return static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size());
}

}  // namespace detail

/// Monte Carlo Bayes error of the nearest-mean rule for D orthonormal means
/// and noise variance v. Depends only on (D, v).
inline ErrorEstimate bayes_error(int d, double v, std::size_t samples, std::uint64_t seed) {
  if (d < 2) throw InvalidArgument("Bayes error needs D >= 2");
  if (v < 0.0) throw InvalidArgument("noise variance must be nonnegative");
  if (v == 0.0) return {0.0, 0.0};
  const auto t = detail::bayes_statistic(d, samples, seed);
  const double p = detail::exceed_fraction(t, 1.0 / std::sqrt(v));
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(samples))};
}

struct Calibration {
  double noise_var;
  ErrorEstimate bayes_error;
  int iterations;
};

/// Bisection on log v with common random numbers until the Monte Carlo
/// Bayes error is within 0.002 of the target (at most 40 steps).
inline Calibration calibrate_variance(int d, double target_ber, std::size_t mc_samples_per_class,
                                      std::uint64_t seed) {
  if (d < 2) throw InvalidArgument("calibration needs D >= 2");
  const double ceiling = (d - 1.0) / d;
  if (!(target_ber > 0.0 && target_ber < ceiling))
    throw InvalidArgument("target Bayes error must lie in (0, (D-1)/D)");
  const std::size_t samples = mc_samples_per_class * static_cast<std::size_t>(d);
  const auto t = detail::bayes_statistic(d, samples, seed);
  auto ber = [&](double log_v) { return detail::exceed_fraction(t, std::exp(-0.5 * log_v)); };
  double lo = std::log(1e-3), hi = std::log(1e3);
  while (ber(lo) > target_ber && lo > -200.0) lo -= 5.0;
  while (ber(hi) < target_ber && hi < 200.0) hi += 5.0;
  double mid = 0.5 * (lo + hi);
  int it = 0;
  for (; it < 40; ++it) {
    mid = 0.5 * (lo + hi);
    const double b = ber(mid);
    if (std::abs(b - target_ber) < 0.002) break;
    (b < target_ber ? lo : hi) = mid;
  }
  const double p = ber(mid);
  return {std::exp(mid), {p, std::sqrt(p * (1.0 - p) / static_cast<double>(samples))}, it};
}

inline void calibrate_variance(ClassModel& model, double target_ber, std::size_t mc_samples_per_class,
                               std::uint64_t seed) {
  const auto c = calibrate_variance(model.num_classes(), target_ber, mc_samples_per_class, seed);
  model.noise_var = c.noise_var;
  model.bayes_error = c.bayes_error;
}

/// Balanced dataset: row m has label m mod D, features mu_label + sqrt(v) * noise.
inline Dataset gen_dataset(const ClassModel& model, Eigen::Index m, std::uint64_t seed) {
  const int d = model.num_classes();
  if (m < 1 || m % d != 0) throw InvalidArgument("M must be a positive multiple of D for balanced labels");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double sd = std::sqrt(model.noise_var);
  const Eigen::Index n = model.num_features();
  Matrix a(m, n);
  std::vector<int> labels(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const int y = static_cast<int>(i % d);
    labels[static_cast<std::size_t>(i)] = y;
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = model.means(j, y) + sd * normal(rng);
  }
  return Dataset(FeatureMatrix(std::move(a)), std::move(labels), d);
}

/// Expected test error of argmax_d x_d^T a under the class model:
///   1 - (1/D) sum_y P( for all d != y: w_d^T e < w_d^T mu_y ),  w_d = x_y - x_d,
/// with e ~ N(0, vI). The noise is drawn in an orthonormal basis of the
/// column span of the weights, shared across classes.
inline ErrorEstimate expected_error(const WeightMatrix& w, const ClassModel& model, std::size_t mc_samples = 1000000,
                                    std::uint64_t seed = 0) {
  const Matrix& x = w.weights;
  if (x.rows() != model.num_features() || x.cols() != model.num_classes())
    throw DimensionMismatch("weights do not match the class model");
  if (mc_samples < 2) throw InvalidArgument("expected_error needs at least two samples");
  const int d = model.num_classes();
  Eigen::HouseholderQR<Matrix> qr(x);
  const Matrix q = qr.householderQ() * Matrix::Identity(x.rows(), std::min<Eigen::Index>(x.rows(), d));
  const Matrix proj = q.transpose() * x;  // coordinates of each column in the basis
  const Eigen::Index r = proj.rows();
  // pairwise direction and threshold for each (y, d != y)
  std::vector<Vector> dirs;
  std::vector<double> thresh;
  for (int y = 0; y < d; ++y)
    for (int k = 0; k < d; ++k) {
      if (k == y) continue;
      dirs.emplace_back(proj.col(y) - proj.col(k));
      thresh.push_back((x.col(y) - x.col(k)).dot(model.means.col(y)));
    }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double sd = std::sqrt(model.noise_var);
  Vector g(r);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < mc_samples; ++s) {
    for (Eigen::Index i = 0; i < r; ++i) g[i] = sd * normal(rng);
    int correct = 0;
    std::size_t idx = 0;
    for (int y = 0; y < d; ++y) {
      bool ok = true;
      for (int k = 0; k + 1 < d; ++k, ++idx)
        if (ok && !(dirs[idx].dot(g) < thresh[idx])) ok = false;
      correct += ok ? 1 : 0;
    }
    const double e = 1.0 - static_cast<double>(correct) / d;
    sum += e;
    sum_sq += e * e;
  }
  const double n = static_cast<double>(mc_samples);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

}  // namespace shygamp
