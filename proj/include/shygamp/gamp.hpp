#pragma once

// Scalar-variance message-passing engine for multinomial logistic regression.
//
// One iteration:
//   tuner hook -> x = in(r, q_r) -> tuner hook -> damp x
//   q_p = |A|_F^2 q_x / M,  p = A x - q_p s_prev
//   (z, q_z) = out(p, q_p, y)
//   q_s = mean(1/q_p - q_z/q_p^2),  s = (z - p)/q_p -> damp s
//   q_r = N / (q_s |A|_F^2),  r = x + q_r A^T s

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "shygamp/errors.hpp"
#include "shygamp/input_denoisers.hpp"
#include "shygamp/model.hpp"
#include "shygamp/output_denoisers.hpp"

namespace shygamp {

enum class Mode { SPA, MSA };
enum class Tuner { EM, SURE, Fixed };

struct GampConfig {
  Mode mode = Mode::SPA;
  int max_iters = 200;
  double tol = 1e-5;
  double damping = 1.0;
  bool adaptive_damping = true;
  std::uint64_t seed = 0;
  MomentMethod moment_method = MomentMethod::GM;
  Tuner tuner = Tuner::EM;

  void validate() const {
    if (!(damping > 0.0 && damping <= 1.0)) throw InvalidArgument("damping must lie in (0, 1]");
    if (!(tol > 0.0)) throw InvalidArgument("tol must be positive");
    if (max_iters < 1) throw InvalidArgument("max_iters must be at least 1");
    if (mode == Mode::MSA && tuner == Tuner::EM) throw InvalidArgument("EM tuning applies to sum-product mode only");
    if (mode == Mode::SPA && tuner == Tuner::SURE) throw InvalidArgument("SURE tuning applies to min-sum mode only");
  }
};

struct GampState {
  Matrix x_hat, r_hat;         // N x D
  Matrix p_hat, z_hat, s_hat;  // M x D
  Matrix s_hat_prev;           // dual estimate used in the correction term of p_hat
  Matrix q_z;                  // M x D, after clamping
  double q_x = 0, q_p = 0, q_r = 0, q_s = 0;
  int iteration = 0;
};

struct TraceRecord {
  double q_x = 0, q_p = 0, q_r = 0, q_s = 0;
  double relative_change = 0;
  double damping = 1;
  HyperParameters parameters;
  double wall_seconds = 0;  // excluded from reproducibility comparisons
  int ts_fallbacks = 0;
  int newton_nonconverged = 0;

  /// Equality on everything except timing.
  bool same_values(const TraceRecord& o) const {
    return q_x == o.q_x && q_p == o.q_p && q_r == o.q_r && q_s == o.q_s && relative_change == o.relative_change &&
           damping == o.damping && parameters == o.parameters && ts_fallbacks == o.ts_fallbacks &&
           newton_nonconverged == o.newton_nonconverged;
  }
};

struct TrainResult {
  WeightMatrix weights;
  std::vector<TraceRecord> trace;
  int iterations_run = 0;
  bool converged = false;
  HyperParameters final_parameters;
  double tuning_seconds = 0;    ///< time inside the tuner hooks
  double training_seconds = 0;  ///< whole run, tuning included
};

// ---------------------------------------------------------------------------
// Scalar-variance rules.

inline double forward_variances(double q_x, double frobenius_sq, Eigen::Index num_samples) {
  return frobenius_sq * q_x / static_cast<double>(num_samples);
}

inline double forward_variances(GampState& state, const Dataset& data) {
  state.q_p = forward_variances(state.q_x, data.frobenius_sq(), data.num_samples());
  return state.q_p;
}

struct BackwardVariances {
  double q_s;
  double q_r;
};

/// Clamps q_z into [1e-12 q_p, q_p] in place, then averages. A non-positive
/// average is an error; a positive one is floored at 1e-12/q_p.
inline BackwardVariances backward_variances(Matrix& q_z, double q_p, double frobenius_sq, Eigen::Index num_features) {
  if (!(q_p > 0.0)) throw DegenerateVariance("q_p must be positive in the backward step");
  q_z = q_z.cwiseMax(1e-12 * q_p).cwiseMin(q_p);
  const double inv = 1.0 / q_p;
  double q_s = (inv - q_z.array() * inv * inv).mean();
  if (!(q_s > 0.0)) throw DegenerateVariance("q_s collapsed to zero: likelihood is perfectly informative");
  q_s = std::max(q_s, 1e-12 * inv);
  return {q_s, static_cast<double>(num_features) / (q_s * frobenius_sq)};
}

inline BackwardVariances backward_variances(GampState& state, const Dataset& data) {
  const auto b = backward_variances(state.q_z, state.q_p, data.frobenius_sq(), data.num_features());
  state.q_s = b.q_s;
  state.q_r = b.q_r;
  return b;
}

inline Matrix damp(const Matrix& fresh, const Matrix& old, double theta) {
  if (theta == 1.0) return fresh;
  return theta * fresh + (1.0 - theta) * old;
}

/// Blends x_hat and s_hat; every other field comes from the new state.
inline GampState damp(const GampState& fresh, const GampState& old, double theta) {
  if (!(theta > 0.0 && theta <= 1.0)) throw InvalidArgument("damping must lie in (0, 1]");
  GampState out = fresh;
  out.x_hat = damp(fresh.x_hat, old.x_hat, theta);
  out.s_hat = damp(fresh.s_hat, old.s_hat, theta);
  return out;
}

/// Damping factor schedule. In adaptive mode the factor halves (floor 0.05)
/// when the relative change grew and grows by 10% (cap 1) otherwise.
class DampingSchedule {
 public:
  DampingSchedule(double theta, bool adaptive) : theta_(theta), adaptive_(adaptive) {
    if (!(theta > 0.0 && theta <= 1.0)) throw InvalidArgument("damping must lie in (0, 1]");
  }

  double theta() const { return theta_; }

  /// Feeds the latest relative change; returns the factor for the next iteration.
  double update(double relative_change) {
    if (adaptive_ && has_prev_) theta_ = relative_change > prev_ ? std::max(0.05, 0.5 * theta_) : std::min(1.0, 1.1 * theta_);
    prev_ = relative_change;
    has_prev_ = true;
    return theta_;
  }

 private:
  double theta_;
  bool adaptive_;
  double prev_ = 0.0;
  bool has_prev_ = false;
};

inline double relative_change(const Matrix& next, const Matrix& prev) {
  const double diff = (next - prev).norm();
  const double base = next.norm();
  if (base == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / base;
}

// ---------------------------------------------------------------------------

template <typename T>
concept InputDenoiser = requires(T t, const T& ct, const Matrix& r, double q, Eigen::Index n, int d) {
  { ct.prior_mean(n, d) } -> std::convertible_to<Matrix>;
  { ct.initial_variance() } -> std::convertible_to<double>;
  t.before_denoise(r, q);
  { t.denoise(r, q) } -> std::same_as<ScalarEstimate>;
  t.after_denoise(r, q);
  { ct.hyperparameters() } -> std::convertible_to<HyperParameters>;
};

template <typename T>
concept OutputDenoiser = requires(T t, const Matrix& p, double q, const std::vector<int>& y) {
  { t.denoise(p, q, y) } -> std::same_as<OutputEstimate>;
};

struct RunOptions {
  /// Called with the full state at the end of every iteration.
  std::function<void(const GampState&)> observer;
  /// Replaces the prior-mean initialisation of x_hat.
  std::optional<Matrix> initial_x;
};

namespace detail {

inline void require_finite(const Matrix& m, const char* name, int iteration) {
  if (!m.allFinite()) throw Divergence(std::string("non-finite ") + name, iteration);
}

inline void require_finite(double v, const char* name, int iteration) {
  if (!std::isfinite(v)) throw Divergence(std::string("non-finite ") + name, iteration);
}

}  // namespace detail

template <InputDenoiser In, OutputDenoiser Out>
TrainResult run(const Dataset& data, const GampConfig& config, In& input, Out& output, const RunOptions& options = {}) {
  config.validate();
  const FeatureMatrix& a = data.features();
  const Eigen::Index m = data.num_samples();
  const Eigen::Index n = data.num_features();
  const int dd = data.num_classes();
  const double frob = data.frobenius_sq();
  const auto& labels = data.labels();
  using clock = std::chrono::steady_clock;

  GampState st;
  st.x_hat = options.initial_x ? *options.initial_x : input.prior_mean(n, dd);
  if (st.x_hat.rows() != n || st.x_hat.cols() != dd) throw DimensionMismatch("initial x_hat has the wrong shape");
  st.s_hat = Matrix::Zero(m, dd);
  TrainResult result;

  if (frob == 0.0) {
    // No coupling between weights and scores: the prior mean is the answer.
    st.p_hat = Matrix::Zero(m, dd);
    st.z_hat = st.p_hat;
    st.s_hat_prev = st.s_hat;
    st.q_z = Matrix::Zero(m, dd);
    st.r_hat = st.x_hat;
    st.q_x = input.initial_variance();
    st.iteration = 1;
    TraceRecord rec;
    rec.q_x = st.q_x;
    rec.parameters = input.hyperparameters();
    result.trace.push_back(rec);
    if (options.observer) options.observer(st);
    result.weights.weights = st.x_hat;
    result.iterations_run = 1;
    result.converged = true;
    result.final_parameters = input.hyperparameters();
    return result;
  }

  st.q_x = input.initial_variance();
  if (!(st.q_x > 0.0)) throw DegenerateVariance("initial q_x must be positive");
  const double q_x_floor = 1e-10 * st.q_x;

  // Half step producing r_hat(0), q_r(0) from the initial x_hat and s_hat = 0.
  auto backward = [&](int iteration) {
    st.q_p = forward_variances(st.q_x, frob, m);
    if (!(st.q_p > 0.0)) throw DegenerateVariance("q_p collapsed to zero");
    st.s_hat_prev = st.s_hat;
    st.p_hat = a.times(st.x_hat) - st.q_p * st.s_hat;
    detail::require_finite(st.p_hat, "p_hat", iteration);
    auto est = output.denoise(st.p_hat, st.q_p, labels);
    st.z_hat = std::move(est.z_hat);
    st.q_z = std::move(est.q_z);
    detail::require_finite(st.z_hat, "z_hat", iteration);
    detail::require_finite(st.q_z, "q_z", iteration);
    backward_variances(st, data);
    return est;
  };
  backward(0);
  st.s_hat = (st.z_hat - st.p_hat) / st.q_p;
  st.r_hat = st.x_hat + st.q_r * a.transpose_times(st.s_hat);
  detail::require_finite(st.r_hat, "r_hat", 0);

  DampingSchedule schedule(config.damping, config.adaptive_damping);
  const auto started = clock::now();
  for (int it = 1; it <= config.max_iters; ++it) {
    const double theta = schedule.theta();
    const Matrix x_prev = st.x_hat;

    auto tick = clock::now();
    input.before_denoise(st.r_hat, st.q_r);
    result.tuning_seconds += std::chrono::duration<double>(clock::now() - tick).count();
    auto xe = input.denoise(st.r_hat, st.q_r);
    tick = clock::now();
    input.after_denoise(st.r_hat, st.q_r);
    result.tuning_seconds += std::chrono::duration<double>(clock::now() - tick).count();
    detail::require_finite(xe.x_hat, "x_hat", it);
    st.x_hat = damp(xe.x_hat, x_prev, theta);
    // variances are blended with the same weight as the estimates
    st.q_x = theta * std::max(xe.average_variance(), q_x_floor) + (1.0 - theta) * st.q_x;
    detail::require_finite(st.q_x, "q_x", it);

    const Matrix s_prev = st.s_hat;
    const double q_s_prev = st.q_s;
    const auto est = backward(it);
    st.q_s = theta * st.q_s + (1.0 - theta) * q_s_prev;
    st.q_r = static_cast<double>(n) / (st.q_s * frob);  // keeps q_r = N / (q_s |A|_F^2)
    st.s_hat = damp(Matrix((st.z_hat - st.p_hat) / st.q_p), s_prev, theta);
    st.r_hat = st.x_hat + st.q_r * a.transpose_times(st.s_hat);
    detail::require_finite(st.s_hat, "s_hat", it);
    detail::require_finite(st.r_hat, "r_hat", it);
    st.iteration = it;

    TraceRecord rec;
    rec.q_x = st.q_x;
    rec.q_p = st.q_p;
    rec.q_r = st.q_r;
    rec.q_s = st.q_s;
    rec.relative_change = relative_change(st.x_hat, x_prev);
    rec.damping = theta;
    rec.parameters = input.hyperparameters();
    rec.wall_seconds = std::chrono::duration<double>(clock::now() - started).count();
    rec.ts_fallbacks = est.fallbacks;
    rec.newton_nonconverged = est.nonconverged;
    result.trace.push_back(rec);
    if (options.observer) options.observer(st);

    result.iterations_run = it;
    // the first step compares against the initialisation, not an iterate
    if (it > 1 && rec.relative_change < config.tol) {
      result.converged = true;
      break;
    }
    schedule.update(rec.relative_change);
  }
  result.weights.weights = st.x_hat;
  result.final_parameters = input.hyperparameters();
  result.training_seconds = std::chrono::duration<double>(clock::now() - started).count();
  return result;
}

}  // namespace shygamp
