#pragma once

// Prior-side (input) denoisers and their online tuners.
//
// Every quantity here is scalar-separable: the pseudo-observation r_nd is
// modelled as x_nd + N(0, q_r) with one shared variance q_r.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "shygamp/errors.hpp"
#include "shygamp/model.hpp"
#include "shygamp/special.hpp"

namespace shygamp {

/// Per-class spike-and-slab parameters.
struct BgPrior {
  Vector beta;  ///< activity probabilities, in (0,1]
  Vector mean;  ///< slab means
  Vector var;   ///< slab variances, > 0

  int num_classes() const { return static_cast<int>(beta.size()); }

  void validate() const {
    if (mean.size() != beta.size() || var.size() != beta.size())
      throw DimensionMismatch("BgPrior parameter lengths differ");
    for (Eigen::Index d = 0; d < beta.size(); ++d) {
      if (!(beta[d] > 0.0 && beta[d] <= 1.0)) throw InvalidArgument("BgPrior beta must lie in (0,1]");
      if (!(var[d] > 0.0)) throw InvalidArgument("BgPrior var must be positive");
      if (!std::isfinite(mean[d])) throw InvalidArgument("BgPrior mean must be finite");
    }
  }

  /// Start point used before any EM update:
  /// beta = min(0.5, M/(2N)), zero means, and slab variance matched to the
  /// per-sample feature energy.
  static BgPrior initial(Eigen::Index m, Eigen::Index n, int d, double frobenius_sq) {
    const double b = std::min(0.5, static_cast<double>(m) / (2.0 * static_cast<double>(n)));
    const double energy = frobenius_sq / static_cast<double>(m);
    const double v = energy > 0.0 ? (d - 1) / (b * energy) : 1.0;
    return BgPrior{Vector::Constant(d, b), Vector::Zero(d), Vector::Constant(d, v)};
  }
};

struct BgPosterior {
  Matrix x_hat;         ///< posterior means
  Matrix q_x;           ///< posterior variances
  Matrix support_prob;  ///< P(x_nd != 0 | r_nd)
  Matrix slab_mean;     ///< gamma_nd, mean given the slab
  Vector slab_var;      ///< nu_d, variance given the slab (shared over n)

  double average_variance() const { return q_x.mean(); }
};

/// Posterior moments of x under a Bernoulli-Gaussian prior observed in
/// N(0, q_r) noise. Likelihood ratios are formed in the log domain.
inline BgPosterior bg_denoise(const Matrix& r_hat, double q_r, const BgPrior& prior) {
  if (!(q_r > 0.0)) throw InvalidArgument("bg_denoise requires q_r > 0");
  if (r_hat.cols() != prior.beta.size()) throw DimensionMismatch("r_hat columns != prior classes");
  const Eigen::Index n = r_hat.rows();
  const Eigen::Index dd = r_hat.cols();
  BgPosterior out{Matrix(n, dd), Matrix(n, dd), Matrix(n, dd), Matrix(n, dd), Vector(dd)};
  for (Eigen::Index d = 0; d < dd; ++d) {
    const double beta = prior.beta[d];
    const double m = prior.mean[d];
    const double v = prior.var[d];
    const double log_odds_spike = beta < 1.0 ? std::log1p(-beta) - std::log(beta) : -INFINITY;
    const double nu = 1.0 / (1.0 / q_r + 1.0 / v);
    out.slab_var[d] = nu;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double r = r_hat(i, d);
      const double log_ratio = log_odds_spike + special::gaussian_log_density(r, 0.0, q_r) -
                               special::gaussian_log_density(r, m, v + q_r);
      // pi = 1 / (1 + exp(log_ratio)), evaluated without overflow
      const double pi = log_ratio > 0.0 ? std::exp(-log_ratio) / (1.0 + std::exp(-log_ratio))
                                        : 1.0 / (1.0 + std::exp(log_ratio));
      const double gamma = nu * (r / q_r + m / v);
      const double xh = pi * gamma;
      out.support_prob(i, d) = pi;
      out.slab_mean(i, d) = gamma;
      out.x_hat(i, d) = xh;
      // pi (nu + gamma^2) - (pi gamma)^2, rearranged to stay nonnegative
      out.q_x(i, d) = pi * nu + pi * (1.0 - pi) * gamma * gamma;
    }
  }
  return out;
}

/// One EM step of the spike-and-slab hyperparameters from a posterior that
/// was computed with the same (r_hat, q_r, prior).
inline BgPrior em_update_bg(const Matrix& r_hat, double q_r, const BgPrior& prior, const BgPosterior& post) {
  (void)q_r;
  const Eigen::Index n = r_hat.rows();
  const double nn = static_cast<double>(n);
  BgPrior next = prior;
  for (Eigen::Index d = 0; d < r_hat.cols(); ++d) {
    const double mass = post.support_prob.col(d).sum();
    const double lo = 1.0 / nn;
    const double hi = 1.0 - 1.0 / nn;
    next.beta[d] = std::clamp(mass / nn, std::min(lo, hi), std::max(lo, hi));
    if (mass > 0.0) {
      const double m = post.support_prob.col(d).dot(post.slab_mean.col(d)) / mass;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double dev = post.slab_mean(i, d) - m;
        acc += post.support_prob(i, d) * (post.slab_var[d] + dev * dev);
      }
      next.mean[d] = m;
      next.var[d] = std::max(acc / mass, 1e-8);
    }
  }
  return next;
}

struct LaplacePrior {
  double lambda = 1.0;
};

struct ScalarEstimate {
  Matrix x_hat;
  Matrix q_x;

  double average_variance() const { return q_x.mean(); }
};

/// Soft thresholding at lambda * q_r. Variance is q_r where the estimate
/// survives and zero where it was thresholded.
inline ScalarEstimate laplace_denoise(const Matrix& r_hat, double q_r, double lambda) {
  if (!(q_r > 0.0)) throw InvalidArgument("laplace_denoise requires q_r > 0");
  if (!(lambda > 0.0)) throw InvalidArgument("laplace_denoise requires lambda > 0");
  const double thr = lambda * q_r;
  ScalarEstimate out{Matrix(r_hat.rows(), r_hat.cols()), Matrix(r_hat.rows(), r_hat.cols())};
  for (Eigen::Index i = 0; i < r_hat.size(); ++i) {
    const double r = r_hat.data()[i];
    const double mag = std::max(0.0, std::abs(r) - thr);
    const double x = mag > 0.0 ? (r >= 0.0 ? mag : -mag) : 0.0;
    out.x_hat.data()[i] = x;
    out.q_x.data()[i] = x != 0.0 ? q_r : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// One-dimensional Gaussian mixture used by the SURE tuner.

struct Gm1d {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> vars;

  std::size_t size() const { return weights.size(); }

  double pdf(double x) const {
    double p = 0.0;
    for (std::size_t l = 0; l < size(); ++l) p += weights[l] * special::gaussian_density(x, means[l], vars[l]);
    return p;
  }

  double cdf(double x) const {
    double p = 0.0;
    for (std::size_t l = 0; l < size(); ++l) p += weights[l] * special::normal_cdf((x - means[l]) / std::sqrt(vars[l]));
    return p;
  }

  double log_pdf(double x) const {
    double acc = -INFINITY;
    for (std::size_t l = 0; l < size(); ++l)
      if (weights[l] > 0.0)
        acc = special::log_add_exp(acc, std::log(weights[l]) + special::gaussian_log_density(x, means[l], vars[l]));
    return acc;
  }

  double log_likelihood(std::span<const double> samples) const {
    double ll = 0.0;
    for (double s : samples) ll += log_pdf(s);
    return ll;
  }
};

/// EM fit of an L-component 1-D Gaussian mixture with every variance held
/// at or above var_floor. Initialised from a sorted-quantile partition.
inline Gm1d fit_gm_1d(std::span<const double> samples, int num_components, double var_floor,
                      int max_iters = 100, double tol = 1e-8) {
  if (num_components < 1) throw InvalidArgument("fit_gm_1d needs at least one component");
  if (!(var_floor > 0.0)) throw InvalidArgument("fit_gm_1d needs a positive variance floor");
  const std::size_t big_l = static_cast<std::size_t>(num_components);
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  if (samples.size() < big_l || distinct < big_l)
    throw InvalidArgument("fit_gm_1d: fewer distinct samples than mixture components");
  sorted.assign(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());

  const std::size_t n = samples.size();
  Gm1d gm;
  for (std::size_t l = 0; l < big_l; ++l) {
    const std::size_t lo = l * n / big_l;
    const std::size_t hi = (l + 1) * n / big_l;
    double mean = 0.0;
    for (std::size_t i = lo; i < hi; ++i) mean += sorted[i];
    mean /= static_cast<double>(hi - lo);
    double var = 0.0;
    for (std::size_t i = lo; i < hi; ++i) var += (sorted[i] - mean) * (sorted[i] - mean);
    var /= static_cast<double>(hi - lo);
    gm.weights.push_back(static_cast<double>(hi - lo) / static_cast<double>(n));
    gm.means.push_back(mean);
    gm.vars.push_back(std::max(var, var_floor));
  }

  std::vector<double> resp(big_l);
  std::vector<double> s0(big_l), s1(big_l), s2(big_l);
  double prev_ll = -INFINITY;
  for (int it = 0; it < max_iters; ++it) {
    std::fill(s0.begin(), s0.end(), 0.0);
    std::fill(s1.begin(), s1.end(), 0.0);
    std::fill(s2.begin(), s2.end(), 0.0);
    double ll = 0.0;
    for (double x : samples) {
      double norm = -INFINITY;
      for (std::size_t l = 0; l < big_l; ++l) {
        resp[l] = gm.weights[l] > 0.0
                      ? std::log(gm.weights[l]) + special::gaussian_log_density(x, gm.means[l], gm.vars[l])
                      : -INFINITY;
        norm = special::log_add_exp(norm, resp[l]);
      }
      ll += norm;
      for (std::size_t l = 0; l < big_l; ++l) {
        const double w = std::exp(resp[l] - norm);
        s0[l] += w;
        s1[l] += w * x;
        s2[l] += w * x * x;
      }
    }
    for (std::size_t l = 0; l < big_l; ++l) {
      if (s0[l] <= 1e-12) {
        gm.weights[l] = 0.0;
        continue;
      }
      const double mean = s1[l] / s0[l];
      gm.weights[l] = s0[l] / static_cast<double>(n);
      gm.means[l] = mean;
      gm.vars[l] = std::max(s2[l] / s0[l] - mean * mean, var_floor);
    }
    const double wsum = std::accumulate(gm.weights.begin(), gm.weights.end(), 0.0);
    for (auto& w : gm.weights) w /= wsum;
    const double mean_ll = ll / static_cast<double>(n);
    if (std::abs(mean_ll - prev_ll) < tol) break;
    prev_ll = mean_ll;
  }
  return gm;
}

// ---------------------------------------------------------------------------
// SURE objective for soft thresholding under a Gaussian-mixture model of r.

namespace detail {

/// E[r^2 1{a < r < b}] for r ~ N(mean, var)
inline double gaussian_partial_second_moment(double a, double b, double mean, double var) {
  const double s = std::sqrt(var);
  const double alpha = (a - mean) / s;
  const double beta = (b - mean) / s;
  const double mass = special::normal_cdf(beta) - special::normal_cdf(alpha);
  return (mean * mean + var) * mass -
         s * ((b + mean) * special::normal_pdf(beta) - (a + mean) * special::normal_pdf(alpha));
}

}  // namespace detail

/// J(lambda) = E{ g^2 + 2 q_r g' } for the soft-threshold shift g = f(r) - r.
inline double sure_objective(double lambda, const Gm1d& gm, double q_r) {
  const double t = lambda * q_r;
  double inside = 0.0;
  double second = 0.0;
  for (std::size_t l = 0; l < gm.size(); ++l) {
    const double s = std::sqrt(gm.vars[l]);
    inside += gm.weights[l] *
              (special::normal_cdf((t - gm.means[l]) / s) - special::normal_cdf((-t - gm.means[l]) / s));
    second += gm.weights[l] * detail::gaussian_partial_second_moment(-t, t, gm.means[l], gm.vars[l]);
  }
  return t * t * (1.0 - inside) + second - 2.0 * q_r * inside;
}

/// dJ/dlambda in closed form.
inline double sure_objective_derivative(double lambda, const Gm1d& gm, double q_r) {
  const double t = lambda * q_r;
  const double inside = gm.cdf(t) - gm.cdf(-t);
  return 2.0 * lambda * q_r * q_r * (1.0 - inside) - (gm.pdf(t) + gm.pdf(-t)) * 2.0 * q_r * q_r;
}

struct SureTuneResult {
  double lambda = 0.0;
  Gm1d gm;
  bool interior_root = false;
};

/// Minimises the SURE objective over lambda by bisection on its derivative,
/// with r modelled as a Gaussian mixture fitted to the entries of r_hat.
inline SureTuneResult sure_tune_lambda_detailed(const Matrix& r_hat, double q_r, int num_components = 3) {
  if (!(q_r > 0.0)) throw InvalidArgument("sure_tune_lambda requires q_r > 0");
  std::span<const double> samples(r_hat.data(), static_cast<std::size_t>(r_hat.size()));
  SureTuneResult out;
  out.gm = fit_gm_1d(samples, num_components, q_r);
  const double lambda_max = r_hat.cwiseAbs().maxCoeff() / q_r;
  if (!(lambda_max > 0.0)) {
    out.lambda = std::numeric_limits<double>::min();
    return out;
  }
  if (sure_objective_derivative(lambda_max, out.gm, q_r) <= 0.0) {
    out.lambda = lambda_max;
    return out;
  }
  double lo = 0.0;
  double hi = lambda_max;
  for (int it = 0; it < 60 && hi - lo >= 1e-9 * lambda_max; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (sure_objective_derivative(mid, out.gm, q_r) > 0.0)
      hi = mid;
    else
      lo = mid;
  }
  out.lambda = 0.5 * (lo + hi);
  out.interior_root = true;
  return out;
}

inline double sure_tune_lambda(const Matrix& r_hat, double q_r, int num_components = 3) {
  return sure_tune_lambda_detailed(r_hat, q_r, num_components).lambda;
}

// ---------------------------------------------------------------------------
// Adapters used by the message-passing engine.

using HyperParameters = std::map<std::string, std::vector<double>>;

/// Sum-product input step: spike-and-slab posterior moments, optionally
/// followed by an EM refresh of the prior.
class BgInputDenoiser {
 public:
  BgInputDenoiser(BgPrior prior, bool em_tuning) : prior_(std::move(prior)), em_(em_tuning) { prior_.validate(); }

  Matrix prior_mean(Eigen::Index n, int num_classes) const {
    if (num_classes != prior_.num_classes()) throw DimensionMismatch("prior class count != dataset classes");
    Matrix x(n, num_classes);
    for (int d = 0; d < prior_.num_classes(); ++d) x.col(d).setConstant(prior_.beta[d] * prior_.mean[d]);
    return x;
  }
  double initial_variance() const { return prior_.beta.cwiseProduct(prior_.var).mean(); }

  void before_denoise(const Matrix&, double) {}

  ScalarEstimate denoise(const Matrix& r_hat, double q_r) {
    last_ = bg_denoise(r_hat, q_r, prior_);
    return ScalarEstimate{last_.x_hat, last_.q_x};
  }

  void after_denoise(const Matrix& r_hat, double q_r) {
    if (em_) prior_ = em_update_bg(r_hat, q_r, prior_, last_);
  }

  HyperParameters hyperparameters() const {
    auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return {{"beta", vec(prior_.beta)}, {"mean", vec(prior_.mean)}, {"var", vec(prior_.var)}};
  }

  const BgPrior& prior() const { return prior_; }

 private:
  BgPrior prior_;
  bool em_;
  BgPosterior last_;
};

/// Min-sum input step: soft thresholding, optionally re-tuning lambda by
/// SURE before each call.
class LaplaceInputDenoiser {
 public:
  LaplaceInputDenoiser(double lambda, bool sure_tuning, int gm_components = 3)
      : lambda_(lambda), sure_(sure_tuning), gm_components_(gm_components) {
    if (!(lambda_ > 0.0)) throw InvalidArgument("lambda must be positive");
  }

  Matrix prior_mean(Eigen::Index n, int num_classes) const { return Matrix::Zero(n, num_classes); }
  double initial_variance() const { return 2.0 / (lambda_ * lambda_); }

  void before_denoise(const Matrix& r_hat, double q_r) {
    if (sure_) lambda_ = std::max(sure_tune_lambda(r_hat, q_r, gm_components_), 1e-12);
  }

  ScalarEstimate denoise(const Matrix& r_hat, double q_r) { return laplace_denoise(r_hat, q_r, lambda_); }

  void after_denoise(const Matrix&, double) {}

  HyperParameters hyperparameters() const { return {{"lambda", {lambda_}}}; }

  double lambda() const { return lambda_; }

 private:
  double lambda_;
  bool sure_;
  int gm_components_;
};

}  // namespace shygamp
