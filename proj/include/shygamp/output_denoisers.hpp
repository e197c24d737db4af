#pragma once

// Likelihood-side (output) computations for the soft-max likelihood
//   p(y | z) = exp(z_y) / sum_d exp(z_d)
// under a Gaussian prior z ~ N(p_hat, diag(q_p)).
//
// Sum-product moments: Gaussian-mixture (GM), importance sampling (IS),
// hyper-rectangular numerical integration (NI), second-order Taylor series
// (TS), plus a dense-grid reference (moments_bruteforce).
// Min-sum: component-wise Newton for the MAP estimate of z.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "shygamp/errors.hpp"
#include "shygamp/model.hpp"
#include "shygamp/parallel.hpp"
#include "shygamp/special.hpp"

namespace shygamp {

inline Vector softmax(const Eigen::Ref<const Vector>& z) {
  const double mx = z.maxCoeff();
  Vector p = (z.array() - mx).exp().matrix();
  p /= p.sum();
  return p;
}

inline double log_sum_exp(const Eigen::Ref<const Vector>& z) {
  const double mx = z.maxCoeff();
  return mx + std::log((z.array() - mx).exp().sum());
}

/// log p(y | z)
inline double softmax_log_likelihood(int y, const Eigen::Ref<const Vector>& z) { return z[y] - log_sum_exp(z); }

struct MomentResult {
  Vector z_hat;  ///< posterior means
  Vector q_z;    ///< posterior variances
  double c = 0;  ///< normalising constant; may underflow to 0 for very unlikely labels
};

namespace detail {

inline void check_moment_inputs(int y, const Vector& p_hat, const Vector& q_p) {
  if (p_hat.size() < 2) throw InvalidArgument("soft-max needs at least two classes");
  if (q_p.size() != p_hat.size()) throw DimensionMismatch("q_p length != p_hat length");
  if (y < 0 || y >= p_hat.size()) throw InvalidArgument("label out of range");
  for (Eigen::Index d = 0; d < q_p.size(); ++d)
    if (!(q_p[d] > 0.0)) throw InvalidArgument("q_p must be positive");
}

/// Trapezoid-weighted tensor grid over p_hat_d +/- radius*sqrt(q_d), K points per axis.
inline MomentResult grid_moments(int y, const Vector& p_hat, const Vector& q_p, int k, double radius) {
  const Eigen::Index dd = p_hat.size();
  if (k < 2) throw InvalidArgument("grid needs at least two points per axis");
  // node offsets from p_hat and their 1-D weights (trapezoid x Gaussian density)
  Matrix offset(dd, k), weight(dd, k);
  for (Eigen::Index d = 0; d < dd; ++d) {
    const double sd = std::sqrt(q_p[d]);
    const double h = 2.0 * radius * sd / (k - 1);
    for (int j = 0; j < k; ++j) {
      const double off = -radius * sd + j * h;
      offset(d, j) = off;
      weight(d, j) = (j == 0 || j == k - 1 ? 0.5 * h : h) * special::gaussian_density(off, 0.0, q_p[d]);
    }
  }
  std::vector<int> idx(static_cast<std::size_t>(dd), 0);
  Vector z(dd), e(dd);
  double s0 = 0.0, scale = -std::numeric_limits<double>::infinity();
  Vector s1 = Vector::Zero(dd), s2 = Vector::Zero(dd);
  while (true) {
    double w = 1.0;
    for (Eigen::Index d = 0; d < dd; ++d) {
      const int j = idx[static_cast<std::size_t>(d)];
      e[d] = offset(d, j);
      w *= weight(d, j);
    }
    z = p_hat + e;
    // running log-scale keeps the sums representable when p(y|z) is tiny
    const double ll = softmax_log_likelihood(y, z);
    if (ll > scale) {
      const double shrink = std::exp(scale - ll);
      s0 *= shrink;
      s1 *= shrink;
      s2 *= shrink;
      scale = ll;
    }
    w *= std::exp(ll - scale);
    s0 += w;
    s1 += w * e;
    s2 += w * e.cwiseAbs2();
    Eigen::Index d = 0;
    while (d < dd && ++idx[static_cast<std::size_t>(d)] == k) idx[static_cast<std::size_t>(d++)] = 0;
    if (d == dd) break;
  }
  if (!(s0 > 0.0)) throw DegenerateLikelihood("grid integration: normalising constant underflowed");
  MomentResult out;
  const Vector mean_off = s1 / s0;
  out.z_hat = p_hat + mean_off;
  out.q_z = (s2 / s0 - mean_off.cwiseAbs2()).cwiseMax(0.0);
  out.c = std::exp(scale) * s0;
  return out;
}

inline double grid_size(Eigen::Index dims, int k) { return std::pow(static_cast<double>(k), static_cast<double>(dims)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Numerical integration, importance sampling, Taylor series, reference grid.

/// Hyper-rectangular grid with K points per axis over +/- alpha standard deviations.
inline MomentResult spa_moments_ni(int y, const Vector& p_hat, const Vector& q_p, int k = 7, double alpha = 4.0) {
  detail::check_moment_inputs(y, p_hat, q_p);
  if (detail::grid_size(p_hat.size(), k) > 1e8) throw GridTooLarge("numerical integration grid exceeds 1e8 points");
  return detail::grid_moments(y, p_hat, q_p, k, alpha);
}

/// Dense reference grid used as a test oracle. Limited to D <= 5.
inline MomentResult moments_bruteforce(int y, const Vector& p_hat, const Vector& q_p, int k = 41, double alpha = 6.0) {
  detail::check_moment_inputs(y, p_hat, q_p);
  if (p_hat.size() > 5) throw GridTooLarge("moments_bruteforce supports at most 5 classes");
  return detail::grid_moments(y, p_hat, q_p, k, alpha);
}

namespace detail {

/// Self-normalised importance sampling from given standard-normal draws
/// (D x K, one column per sample).
inline MomentResult importance_moments(int y, const Vector& p_hat, const Vector& q_p, const Matrix& normals) {
  const Eigen::Index dd = p_hat.size();
  const Eigen::Index k = normals.cols();
  if (normals.rows() != dd) throw DimensionMismatch("draws must have one row per class");
  if (k < 1) throw InvalidArgument("importance sampling needs at least one sample");
  const Matrix offsets = q_p.cwiseSqrt().asDiagonal() * normals;
  Vector logw(k);
  for (Eigen::Index s = 0; s < k; ++s) logw[s] = softmax_log_likelihood(y, p_hat + offsets.col(s));
  const double mx = logw.maxCoeff();
  if (!std::isfinite(mx)) throw DegenerateLikelihood("importance sampling: all weights underflowed");
  const Vector w = (logw.array() - mx).exp().matrix();
  const double wsum = w.sum();
  if (!(wsum > 0.0)) throw DegenerateLikelihood("importance sampling: all weights underflowed");
  const Vector mean_off = offsets * w / wsum;
  MomentResult out;
  out.z_hat = p_hat + mean_off;
  out.q_z = Vector(dd);
  for (Eigen::Index d = 0; d < dd; ++d)
    out.q_z[d] = ((offsets.row(d).array() - mean_off[d]).square().matrix() * w)(0) / wsum;
  out.c = std::exp(mx) * wsum / static_cast<double>(k);
  return out;
}

/// D x K standard-normal draws, sample-major.
inline Matrix standard_normal_draws(Eigen::Index dims, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(dims, k);
  for (int s = 0; s < k; ++s)
    for (Eigen::Index d = 0; d < dims; ++d) out(d, s) = normal(rng);
  return out;
}

}  // namespace detail

/// Self-normalised importance sampling with the Gaussian prior as proposal.
inline MomentResult spa_moments_is(int y, const Vector& p_hat, const Vector& q_p, int k = 1500,
                                   std::uint64_t seed = 0) {
  detail::check_moment_inputs(y, p_hat, q_p);
  if (k < 1) throw InvalidArgument("importance sampling needs at least one sample");
  return detail::importance_moments(y, p_hat, q_p, detail::standard_normal_draws(p_hat.size(), k, seed));
}

/// Gradient and Hessian diagonal of the likelihood p(y|z) itself at z.
struct LikelihoodTaylor {
  double value;
  Vector gradient;
  Vector hessian_diag;
};

inline LikelihoodTaylor likelihood_taylor(int y, const Vector& z) {
  const Vector u = softmax(z);
  const double f = u[y];
  LikelihoodTaylor t{f, Vector(z.size()), Vector(z.size())};
  for (Eigen::Index d = 0; d < z.size(); ++d) {
    const double delta = (d == y ? 1.0 : 0.0) - u[d];
    t.gradient[d] = f * delta;
    t.hessian_diag[d] = f * (delta * delta - u[d] * (1.0 - u[d]));
  }
  return t;
}

/// Moments of the Gaussian prior times a second-order expansion of the
/// likelihood about p_hat. Valid only for small q_p; raises MethodBreakdown
/// when the expansion yields C <= 0 or a negative variance.
inline MomentResult spa_moments_ts(int y, const Vector& p_hat, const Vector& q_p) {
  detail::check_moment_inputs(y, p_hat, q_p);
  const auto t = likelihood_taylor(y, p_hat);
  const Vector hq = t.hessian_diag.cwiseProduct(q_p);
  const double hq_sum = hq.sum();
  const double c = t.value + 0.5 * hq_sum;
  if (!(c > 0.0)) throw MethodBreakdown("Taylor-series moments: normalising constant is not positive");
  MomentResult out{Vector(p_hat.size()), Vector(p_hat.size()), c};
  for (Eigen::Index d = 0; d < p_hat.size(); ++d) {
    const double q = q_p[d];
    const double shift = t.gradient[d] * q / c;
    // E[(z_d - p_d)^2 f(z)] under the quadratic likelihood model
    const double second = t.value * q + 1.5 * t.hessian_diag[d] * q * q + 0.5 * q * (hq_sum - hq[d]);
    out.z_hat[d] = p_hat[d] + shift;
    out.q_z[d] = second / c - shift * shift;
    if (!(out.q_z[d] >= 0.0)) throw MethodBreakdown("Taylor-series moments: negative posterior variance");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian-mixture approximation of the soft-max in difference coordinates.
//
// With gamma_k = z_y - z_k (k != y) the soft-max becomes
//   l(gamma) = 1 / (1 + sum_k exp(-gamma_k))
// which is approximated by
//   sum_l alpha_l prod_k Phi((gamma_k - mu_l) / sigma_l).
// mu_l and sigma_l are shared by every difference coordinate k.

struct GmLikApprox {
  int num_classes = 2;
  std::vector<double> alpha;
  std::vector<double> mu;
  std::vector<double> sigma;
  double fit_error = 0.0;  ///< sup-norm residual over the fitting grid
  std::string grid;        ///< description of the fitting grid

  std::size_t size() const { return alpha.size(); }

  double evaluate(std::span<const double> gamma) const {
    double acc = 0.0;
    for (std::size_t l = 0; l < size(); ++l) {
      double prod = alpha[l];
      for (double g : gamma) prod *= special::normal_cdf((g - mu[l]) / sigma[l]);
      acc += prod;
    }
    return acc;
  }
};

/// Exact soft-max in difference coordinates.
inline double softmax_difference_likelihood(std::span<const double> gamma) {
  double s = 1.0;
  for (double g : gamma) s += std::exp(-g);
  return 1.0 / s;
}

struct GmFitOptions {
  double half_width = 8.0;
  std::size_t max_points = 20000;  ///< never above 1e5
  int starts = 5;
  std::uint64_t seed = 1234567;
  int max_sweeps = 400;
  double failure_threshold = 0.2;
};

namespace detail {

struct GmFitGrid {
  Matrix points;  // n x (D-1)
  Vector target;
  std::string description;
};

inline GmFitGrid make_fit_grid(int num_classes, const GmFitOptions& opt) {
  const int dims = num_classes - 1;
  const std::size_t cap = std::min<std::size_t>(opt.max_points, 100000);
  GmFitGrid g;
  const int per_axis = static_cast<int>(std::floor(std::pow(static_cast<double>(cap), 1.0 / dims) + 1e-9));
  if (per_axis >= 41) {
    const int k = std::min(per_axis, 1601);
    const auto n = static_cast<Eigen::Index>(std::llround(std::pow(static_cast<double>(k), dims)));
    g.points.resize(n, dims);
    std::vector<int> idx(static_cast<std::size_t>(dims), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int d = 0; d < dims; ++d)
        g.points(i, d) = -opt.half_width + 2.0 * opt.half_width * idx[static_cast<std::size_t>(d)] / (k - 1);
      int d = 0;
      while (d < dims && ++idx[static_cast<std::size_t>(d)] == k) idx[static_cast<std::size_t>(d++)] = 0;
    }
    g.description = "lattice half_width=" + std::to_string(opt.half_width) + " per_axis=" + std::to_string(k);
  } else {
    // Fixed-seed subsample of a 161-per-axis lattice.
    const int k = 161;
    std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<int> pick(0, k - 1);
    g.points.resize(static_cast<Eigen::Index>(cap), dims);
    for (Eigen::Index i = 0; i < g.points.rows(); ++i)
      for (int d = 0; d < dims; ++d) g.points(i, d) = -opt.half_width + 2.0 * opt.half_width * pick(rng) / (k - 1);
    g.description = "lattice-subsample half_width=" + std::to_string(opt.half_width) +
                    " per_axis=161 points=" + std::to_string(cap);
  }
  g.target.resize(g.points.rows());
  std::vector<double> row(static_cast<std::size_t>(dims));
  for (Eigen::Index i = 0; i < g.points.rows(); ++i) {
    for (int d = 0; d < dims; ++d) row[static_cast<std::size_t>(d)] = g.points(i, d);
    g.target[i] = softmax_difference_likelihood(row);
  }
  return g;
}

/// Least-squares fit state for one start.
class GmFitter {
 public:
  GmFitter(const GmFitGrid& grid, std::vector<double> logits, std::vector<double> mu, std::vector<double> log_sigma)
      : grid_(grid), logits_(std::move(logits)), mu_(std::move(mu)), log_sigma_(std::move(log_sigma)) {
    comp_.resize(grid_.points.rows(), static_cast<Eigen::Index>(mu_.size()));
    for (std::size_t l = 0; l < mu_.size(); ++l) comp_.col(static_cast<Eigen::Index>(l)) = component(mu_[l], log_sigma_[l]);
  }

  double objective() const { return residual(model(alphas())).squaredNorm(); }

  void run(int max_sweeps) {
    double obj = objective();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      for (std::size_t l = 0; l < mu_.size(); ++l) {
        if (mu_.size() > 1) step_logit(l);
        step_shape(l, /*which=*/0);
        step_shape(l, /*which=*/1);
      }
      const double next = objective();
      const bool done = obj - next <= 1e-12 * std::max(obj, 1e-300);
      obj = next;
      if (done) break;
    }
  }

  GmLikApprox result(int num_classes) const {
    GmLikApprox g;
    g.num_classes = num_classes;
    g.alpha = alphas();
    g.mu = mu_;
    for (double ls : log_sigma_) g.sigma.push_back(std::exp(ls));
    g.fit_error = residual(model(g.alpha)).cwiseAbs().maxCoeff();
    g.grid = grid_.description;
    return g;
  }

 private:
  std::vector<double> alphas() const {
    const double mx = *std::max_element(logits_.begin(), logits_.end());
    std::vector<double> a(logits_.size());
    double s = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) s += a[l] = std::exp(logits_[l] - mx);
    for (auto& v : a) v /= s;
    return a;
  }

  Vector model(const std::vector<double>& a) const {
    Vector f = Vector::Zero(comp_.rows());
    for (std::size_t l = 0; l < a.size(); ++l) f += a[l] * comp_.col(static_cast<Eigen::Index>(l));
    return f;
  }

  Vector residual(const Vector& f) const { return f - grid_.target; }

  Vector component(double mu, double log_sigma) const {
    const double s = std::exp(log_sigma);
    Vector c(grid_.points.rows());
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      double p = 1.0;
      for (Eigen::Index d = 0; d < grid_.points.cols(); ++d) p *= special::normal_cdf((grid_.points(i, d) - mu) / s);
      c[i] = p;
    }
    return c;
  }

  /// derivative of component l with respect to mu (which=0) or log sigma (which=1)
  Vector component_derivative(double mu, double log_sigma, int which) const {
    const double s = std::exp(log_sigma);
    Vector out(grid_.points.rows());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      double p = 1.0;
      double acc = 0.0;
      for (Eigen::Index d = 0; d < grid_.points.cols(); ++d) {
        const double x = (grid_.points(i, d) - mu) / s;
        p *= special::normal_cdf(x);
        const double lam = special::inverse_mills(x);
        acc += which == 0 ? -lam / s : -x * lam;
      }
      out[i] = p * acc;
    }
    return out;
  }

  void step_logit(std::size_t l) {
    const auto a = alphas();
    const Vector f = model(a);
    const Vector r = residual(f);
    const Vector jac = a[l] * (comp_.col(static_cast<Eigen::Index>(l)) - f);
    const double denom = jac.squaredNorm();
    if (!(denom > 0.0)) return;
    const double base = r.squaredNorm();
    double delta = -r.dot(jac) / denom;
    const double saved = logits_[l];
    for (int t = 0; t < 30; ++t, delta *= 0.5) {
      logits_[l] = saved + delta;
      if (residual(model(alphas())).squaredNorm() < base) return;
    }
    logits_[l] = saved;
  }

  void step_shape(std::size_t l, int which) {
    const auto a = alphas();
    const Vector r = residual(model(a));
    const double base = r.squaredNorm();
    double& param = which == 0 ? mu_[l] : log_sigma_[l];
    const Vector jac = a[l] * component_derivative(mu_[l], log_sigma_[l], which);
    const double denom = jac.squaredNorm();
    if (!(denom > 0.0)) return;
    double delta = -r.dot(jac) / denom;
    const double saved = param;
    const Vector saved_comp = comp_.col(static_cast<Eigen::Index>(l));
    for (int t = 0; t < 30; ++t, delta *= 0.5) {
      param = saved + delta;
      if (which == 1) param = std::clamp(param, -6.0, 6.0);
      comp_.col(static_cast<Eigen::Index>(l)) = component(mu_[l], log_sigma_[l]);
      if (residual(model(a)).squaredNorm() < base) return;
    }
    param = saved;
    comp_.col(static_cast<Eigen::Index>(l)) = saved_comp;
  }

  const GmFitGrid& grid_;
  std::vector<double> logits_, mu_, log_sigma_;
  Matrix comp_;
};

}  // namespace detail

/// Least-squares fit of the mixture-of-products form to the soft-max on a
/// deterministic grid over [-w, w]^(D-1), by coordinate descent from several
/// fixed-seed starts. For L > 1 one start embeds the (L-1)-component fit.
inline GmLikApprox fit_softmax_gm_approx(int num_classes, int num_components = 2, const GmFitOptions& opt = {}) {
  if (num_classes < 2) throw InvalidArgument("GM approximation needs D >= 2");
  if (num_components < 1) throw InvalidArgument("GM approximation needs L >= 1");
  const auto grid = detail::make_fit_grid(num_classes, opt);
  const std::size_t big_l = static_cast<std::size_t>(num_components);

  struct Start {
    std::vector<double> logits, mu, log_sigma;
  };
  std::vector<Start> starts;
  if (big_l > 1) {
    GmFitOptions inner = opt;
    const auto smaller = fit_softmax_gm_approx(num_classes, num_components - 1, inner);
    Start s;
    for (std::size_t l = 0; l + 1 < big_l; ++l) {
      s.logits.push_back(std::log(std::max(smaller.alpha[l], 1e-12)));
      s.mu.push_back(smaller.mu[l]);
      s.log_sigma.push_back(std::log(smaller.sigma[l]));
    }
    // new component with a small weight near the largest existing one
    s.logits.push_back(std::log(0.05));
    s.mu.push_back(smaller.mu.back() + 0.5);
    s.log_sigma.push_back(std::log(smaller.sigma.back()) - 0.3);
    starts.push_back(std::move(s));
  }
  {
    Start s;
    for (std::size_t l = 0; l < big_l; ++l) {
      s.logits.push_back(0.0);
      s.mu.push_back(std::log(num_classes - 1.0) + 0.5 * (static_cast<double>(l) - 0.5 * (big_l - 1)));
      s.log_sigma.push_back(std::log(1.7) + 0.3 * static_cast<double>(l));
    }
    starts.push_back(std::move(s));
  }
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> mu_dist(-1.0, 3.0), ls_dist(std::log(0.8), std::log(3.0));
  std::normal_distribution<double> logit_dist(0.0, 1.0);
  while (static_cast<int>(starts.size()) < std::max(opt.starts, 1)) {
    Start s;
    for (std::size_t l = 0; l < big_l; ++l) {
      s.logits.push_back(logit_dist(rng));
      s.mu.push_back(mu_dist(rng));
      s.log_sigma.push_back(ls_dist(rng));
    }
    starts.push_back(std::move(s));
  }

  double best_obj = INFINITY;
  GmLikApprox best;
  for (auto& s : starts) {
    detail::GmFitter fitter(grid, s.logits, s.mu, s.log_sigma);
    fitter.run(opt.max_sweeps);
    const double obj = fitter.objective();
    if (obj < best_obj) {
      best_obj = obj;
      best = fitter.result(num_classes);
    }
  }
  if (!(best.fit_error <= opt.failure_threshold))
    throw FitFailure("GM soft-max fit residual " + std::to_string(best.fit_error) + " exceeds threshold");
  return best;
}

// ---------------------------------------------------------------------------

struct PartialMoments {
  double t0, t1, t2;
};

/// Integrals of g^i N(g; c - p_hat, q) Phi((g - mu)/sigma) over the real
/// line, i = 0, 1, 2.
inline PartialMoments gaussian_cdf_partial_moments(double c, double p_hat, double q, double mu, double sigma) {
  const double s2 = sigma * sigma + q;
  const double s = std::sqrt(s2);
  const double a = c - p_hat;
  const double x = (a - mu) / s;
  const double cdf = special::normal_cdf(x);
  const double lam = special::inverse_mills(x);  // phi(x) / Phi(x)
  // normalised (Phi-tilted) mean and variance
  const double mean = a + q * lam / s;
  const double var = q - q * q * lam * (x + lam) / s2;
  PartialMoments t;
  t.t0 = cdf;
  t.t1 = cdf * mean;
  t.t2 = cdf * (var + mean * mean);
  return t;
}

/// GM-approximated sum-product moments. For each of K trapezoid nodes on
/// gamma_y = z_y over p_hat_y +/- 4 sd, the (D-1)-dimensional inner integral
/// factorises into closed-form Phi-tilted Gaussian moments.
inline MomentResult spa_moments_gm(int y, const Vector& p_hat, const Vector& q_p, const GmLikApprox& approx,
                                   int k = 7) {
  detail::check_moment_inputs(y, p_hat, q_p);
  if (approx.num_classes != p_hat.size()) throw DimensionMismatch("GM approximation fitted for a different D");
  if (k < 2) throw InvalidArgument("GM outer grid needs at least two nodes");
  const Eigen::Index dd = p_hat.size();
  const std::size_t big_l = approx.size();
  const double sd_y = std::sqrt(q_p[y]);
  const double h = 8.0 * sd_y / (k - 1);

  const std::size_t nodes = static_cast<std::size_t>(k) * big_l;
  std::vector<double> logw(nodes), cval(nodes);
  Matrix m1(dd, static_cast<Eigen::Index>(nodes)), var(dd, static_cast<Eigen::Index>(nodes));
  for (int j = 0; j < k; ++j) {
    const double c = p_hat[y] - 4.0 * sd_y + j * h;
    const double base = std::log(j == 0 || j == k - 1 ? 0.5 * h : h) +
                        special::gaussian_log_density(c, p_hat[y], q_p[y]);
    for (std::size_t l = 0; l < big_l; ++l) {
      const std::size_t node = static_cast<std::size_t>(j) * big_l + l;
      const auto col = static_cast<Eigen::Index>(node);
      double lw = base + std::log(approx.alpha[l]);
      for (Eigen::Index d = 0; d < dd; ++d) {
        if (d == y) continue;
        const double q = q_p[d];
        const double s2 = approx.sigma[l] * approx.sigma[l] + q;
        const double s = std::sqrt(s2);
        const double x = (c - p_hat[d] - approx.mu[l]) / s;
        const double lam = special::inverse_mills(x);
        lw += special::normal_log_cdf(x);
        m1(d, col) = c - p_hat[d] + q * lam / s;
        var(d, col) = std::max(q - q * q * lam * (x + lam) / s2, 0.0);
      }
      logw[node] = lw;
      cval[node] = c;
    }
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  if (!std::isfinite(mx)) throw DegenerateLikelihood("GM moments: normalising constant underflowed");
  std::vector<double> w(nodes);
  double s0 = 0.0;
  for (std::size_t i = 0; i < nodes; ++i) s0 += w[i] = std::exp(logw[i] - mx);

  MomentResult out{Vector(dd), Vector(dd), std::exp(mx) * s0};
  // z_d = c - gamma_d for d != y, z_y = c
  for (Eigen::Index d = 0; d < dd; ++d) {
    double mean = 0.0;
    for (std::size_t i = 0; i < nodes; ++i) {
      const double zd = d == y ? cval[i] : cval[i] - m1(d, static_cast<Eigen::Index>(i));
      mean += w[i] * zd;
    }
    mean /= s0;
    double v = 0.0;
    for (std::size_t i = 0; i < nodes; ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      const double zd = d == y ? cval[i] : cval[i] - m1(d, col);
      const double inner = d == y ? 0.0 : var(d, col);
      v += w[i] * ((zd - mean) * (zd - mean) + inner);
    }
    out.z_hat[d] = mean;
    out.q_z[d] = v / s0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Min-sum: MAP of z under the soft-max likelihood and Gaussian prior.

/// Objective  log p(y|z) - 1/2 sum_d (z_d - p_d)^2 / q_d.
inline double msa_objective(int y, const Vector& p_hat, const Vector& q_p, const Vector& z) {
  return softmax_log_likelihood(y, z) - 0.5 * ((z - p_hat).cwiseAbs2().cwiseQuotient(q_p)).sum();
}

struct NewtonTerms {
  Vector g;  ///< u - e_y + (z - p)/q : gradient of the negated objective
  Vector h;  ///< u^2 - u - 1/q       : diagonal of the objective's Hessian
};

inline NewtonTerms msa_newton_terms(int y, const Vector& p_hat, const Vector& q_p, const Vector& z) {
  const Vector u = softmax(z);
  NewtonTerms t{Vector(z.size()), Vector(z.size())};
  for (Eigen::Index d = 0; d < z.size(); ++d) {
    t.g[d] = u[d] - (d == y ? 1.0 : 0.0) + (z[d] - p_hat[d]) / q_p[d];
    t.h[d] = u[d] * u[d] - u[d] - 1.0 / q_p[d];
  }
  return t;
}

struct NewtonResult {
  Vector z_hat;
  Vector q_z;
  int iterations = 0;
  bool converged = false;
};

/// Component-wise Newton ascent with backtracking on the step length.
inline NewtonResult msa_z_newton(int y, const Vector& p_hat, const Vector& q_p, int max_k = 50) {
  detail::check_moment_inputs(y, p_hat, q_p);
  NewtonResult out;
  Vector z = p_hat;
  double obj = msa_objective(y, p_hat, q_p, z);
  for (int it = 0; it < max_k; ++it) {
    const auto t = msa_newton_terms(y, p_hat, q_p, z);
    if (t.g.cwiseAbs().maxCoeff() < 1e-8) {
      out.converged = true;
      break;
    }
    // ascent direction: -grad f / hess f = g / h
    const Vector dir = t.g.cwiseQuotient(t.h);
    double step = 1.0;
    bool improved = false;
    const double g_max = t.g.cwiseAbs().maxCoeff();
    const double flat = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(obj));
    while (step >= 1.0 / 1024.0) {
      const Vector trial = z + step * dir;
      const double next = msa_objective(y, p_hat, q_p, trial);
      // near the optimum the gain is below rounding; a smaller gradient decides
      const bool tie = next >= obj - flat &&
                       msa_newton_terms(y, p_hat, q_p, trial).g.cwiseAbs().maxCoeff() < g_max;
      if (next > obj || tie) {
        z = trial;
        obj = next;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    out.iterations = it + 1;
    if (!improved) break;
  }
  if (!out.converged) out.converged = msa_newton_terms(y, p_hat, q_p, z).g.cwiseAbs().maxCoeff() < 1e-8;
  const Vector u = softmax(z);
  out.q_z = (q_p.cwiseInverse().array() + u.array() - u.array().square()).inverse().matrix();
  out.z_hat = std::move(z);
  return out;
}

// ---------------------------------------------------------------------------
// Adapters used by the message-passing engine.

enum class MomentMethod { GM, IS, NI, TS };

struct OutputEstimate {
  Matrix z_hat;  ///< M x D
  Matrix q_z;    ///< M x D
  int fallbacks = 0;  ///< TS rows that fell back to GM
  int nonconverged = 0;  ///< Newton rows that hit the iteration cap
};

/// Sum-product output step.
class SpaOutputDenoiser {
 public:
  struct Settings {
    MomentMethod method = MomentMethod::GM;
    int gm_grid = 7;
    int is_samples = 1500;
    int ni_grid = 7;
    double ni_radius = 4.0;
    std::uint64_t seed = 0;
    unsigned workers = 1;
  };

  SpaOutputDenoiser(Settings s, std::shared_ptr<const GmLikApprox> approx)
      : s_(s), approx_(std::move(approx)) {
    if ((s_.method == MomentMethod::GM || s_.method == MomentMethod::TS) && !approx_)
      throw InvalidArgument("GM and TS moment methods need a fitted GM approximation");
  }

  OutputEstimate denoise(const Matrix& p_hat, double q_p, const std::vector<int>& labels) {
    const Eigen::Index m = p_hat.rows();
    const Eigen::Index dd = p_hat.cols();
    OutputEstimate out{Matrix(m, dd), Matrix(m, dd)};
    const Vector qv = Vector::Constant(dd, q_p);
    const std::uint64_t call = calls_++;
    std::vector<int> fell_back(static_cast<std::size_t>(m), 0);
    parallel_for(static_cast<std::size_t>(m), s_.workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const Vector p = p_hat.row(row).transpose();
        const int y = labels[i];
        MomentResult r;
        switch (s_.method) {
          case MomentMethod::GM: r = spa_moments_gm(y, p, qv, *approx_, s_.gm_grid); break;
          case MomentMethod::IS: r = spa_moments_is(y, p, qv, s_.is_samples, mix_seed(call, i)); break;
          case MomentMethod::NI: r = spa_moments_ni(y, p, qv, s_.ni_grid, s_.ni_radius); break;
          case MomentMethod::TS:
            try {
              r = spa_moments_ts(y, p, qv);
            } catch (const MethodBreakdown&) {
              r = spa_moments_gm(y, p, qv, *approx_, s_.gm_grid);
              fell_back[i] = 1;
            }
            break;
        }
        out.z_hat.row(row) = r.z_hat.transpose();
        out.q_z.row(row) = r.q_z.transpose();
      }
    });
    for (int f : fell_back) out.fallbacks += f;
    return out;
  }

 private:
  std::uint64_t mix_seed(std::uint64_t call, std::size_t row) const {
    std::uint64_t x = s_.seed ^ (call * 0x9e3779b97f4a7c15ULL) ^ (static_cast<std::uint64_t>(row) * 0xbf58476d1ce4e5b9ULL);
    x ^= x >> 31;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 29;
    return x;
  }

  Settings s_;
  std::shared_ptr<const GmLikApprox> approx_;
  std::uint64_t calls_ = 0;
};

/// Min-sum output step.
class MsaOutputDenoiser {
 public:
  explicit MsaOutputDenoiser(int max_newton = 50, unsigned workers = 1) : max_k_(max_newton), workers_(workers) {}

  OutputEstimate denoise(const Matrix& p_hat, double q_p, const std::vector<int>& labels) {
    const Eigen::Index m = p_hat.rows();
    const Eigen::Index dd = p_hat.cols();
    OutputEstimate out{Matrix(m, dd), Matrix(m, dd)};
    const Vector qv = Vector::Constant(dd, q_p);
    std::vector<int> missed(static_cast<std::size_t>(m), 0);
    parallel_for(static_cast<std::size_t>(m), workers_, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const auto r = msa_z_newton(labels[i], p_hat.row(row).transpose(), qv, max_k_);
        out.z_hat.row(row) = r.z_hat.transpose();
        out.q_z.row(row) = r.q_z.transpose();
        missed[i] = r.converged ? 0 : 1;
      }
    });
    for (int f : missed) out.nonconverged += f;
    return out;
  }

 private:
  int max_k_;
  unsigned workers_;
};

}  // namespace shygamp
