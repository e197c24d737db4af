// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <string>

#include "oracles.hpp"
#include "shygamp/shygamp.hpp"

using namespace shygamp;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds(clock_type::time_point t) { return std::chrono::duration<double>(clock_type::now() - t).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Vector unit(int d, int k) {
  Vector v = Vector::Zero(d);
  v[k] = 1.0;
  return v;
}

double rel_error(const Vector& got, const Vector& ref) { return (got - ref).norm() / ref.norm(); }

struct MeanSe {
  double mean, se;
};

MeanSe mean_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double m = 0;
  for (double x : v) m += x / n;
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, n > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0};
}

// ---------------------------------------------------------------------------

Outcome moment_oracle_agreement() {
  const int d = 4, draws = 10000;
  const Vector p = unit(d, 0), q = Vector::Ones(d);
  const auto gm = load_or_fit_gm_approx(d, 2);
  std::vector<Vector> oracle;
  for (int y = 0; y < d; ++y) oracle.push_back(moments_bruteforce(y, p, q).z_hat);

  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  double mse_trivial = 0, mse_gm = 0, mse_is = 0, mse_ni = 0;
  double truth_trivial = 0, truth_gm = 0, truth_is = 0, truth_ni = 0;
  std::vector<Vector> gm_cache(d), ni_cache(d);
  for (int y = 0; y < d; ++y) {
    gm_cache[static_cast<std::size_t>(y)] = spa_moments_gm(y, p, q, gm).z_hat;
    ni_cache[static_cast<std::size_t>(y)] = spa_moments_ni(y, p, q).z_hat;
  }
  for (int t = 0; t < draws; ++t) {
    Vector z(d);
    for (int k = 0; k < d; ++k) z[k] = p[k] + normal(rng);
    const Vector u = softmax(z);
    const double c = unif(rng);
    int y = d - 1;
    double acc = 0;
    for (int k = 0; k < d; ++k)
      if ((acc += u[k]) >= c) {
        y = k;
        break;
      }
    const auto& ref = oracle[static_cast<std::size_t>(y)];
    const Vector& g = gm_cache[static_cast<std::size_t>(y)];
    const Vector& n = ni_cache[static_cast<std::size_t>(y)];
    const Vector is = spa_moments_is(y, p, q, 1500, 5000 + static_cast<std::uint64_t>(t)).z_hat;
    mse_trivial += (p - ref).squaredNorm() / draws;
    mse_gm += (g - ref).squaredNorm() / draws;
    mse_is += (is - ref).squaredNorm() / draws;
    mse_ni += (n - ref).squaredNorm() / draws;
    truth_trivial += (p - z).squaredNorm() / draws;
    truth_gm += (g - z).squaredNorm() / draws;
    truth_is += (is - z).squaredNorm() / draws;
    truth_ni += (n - z).squaredNorm() / draws;
  }
  const bool beats_trivial = mse_gm < mse_trivial && mse_is < mse_trivial && mse_ni < mse_trivial;
  const bool ordered = mse_gm <= 1.1 * mse_is && 1.1 * mse_is <= 1.21 * mse_ni;
  return {beats_trivial && ordered,
          fmt("MSE vs brute-force oracle: trivial %.3e GM %.3e IS %.3e NI %.3e (need GM <= 1.1 IS <= 1.21 NI); "
              "MSE vs sampled z: trivial %.4f GM %.4f IS %.4f NI %.4f",
              mse_trivial, mse_gm, mse_is, mse_ni, truth_trivial, truth_gm, truth_is, truth_ni)};
}

Outcome taylor_validity_window() {
  const int d = 4;
  const Vector p = unit(d, 0);
  double small_err = 0, large_err = 0;
  int breakdowns = 0;
  for (int y = 0; y < d; ++y) {
    const Vector qs = Vector::Constant(d, 0.01);
    const auto ref = moments_bruteforce(y, p, qs);
    const auto r = spa_moments_ts(y, p, qs);
    small_err = std::max({small_err, rel_error(r.z_hat, ref.z_hat), rel_error(r.q_z, ref.q_z)});
    const Vector ql = Vector::Constant(d, 4.0);
    try {
      const auto rl = spa_moments_ts(y, p, ql);
      const auto refl = moments_bruteforce(y, p, ql);
      large_err = std::max({large_err, rel_error(rl.z_hat, refl.z_hat), rel_error(rl.q_z, refl.q_z)});
    } catch (const MethodBreakdown&) {
      ++breakdowns;
    }
  }
  const bool pass = small_err <= 0.05 && (breakdowns > 0 || large_err > 5 * small_err);
  return {pass, fmt("worst relative error %.2e at q_p=0.01; at q_p=4: %d/4 labels break down, worst error among the "
                    "rest %.3f",
                    small_err, breakdowns, large_err)};
}

Outcome runtime_ordering() {
  const int d = 10, samples = 500;
  const auto gm = load_or_fit_gm_approx(d, 2);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal;
  std::vector<Vector> ps;
  std::vector<int> ys;
  for (int s = 0; s < samples; ++s) {
    Vector p(d);
    for (auto& v : p) v = normal(rng);
    ps.push_back(p);
    ys.push_back(static_cast<int>(rng() % d));
  }
  const Vector q = Vector::Ones(d);
  double sink = 0;
  auto timed = [&](const std::function<MomentResult(int, const Vector&)>& f, int count) {
    const auto t = clock_type::now();
    for (int s = 0; s < count; ++s) {
      try {
        sink += f(ys[static_cast<std::size_t>(s)], ps[static_cast<std::size_t>(s)]).z_hat[0];
      } catch (const MethodBreakdown&) {
      }
    }
    return seconds(t);
  };
  const double ts = timed([&](int y, const Vector& p) { return spa_moments_ts(y, p, q); }, samples);
  const double gmt = timed([&](int y, const Vector& p) { return spa_moments_gm(y, p, q, gm); }, samples);
  const double is = timed([&](int y, const Vector& p) { return spa_moments_is(y, p, q, 1500, 11); }, samples);
  // A 7^10 grid exceeds the NI size guard, so one ungated evaluation is
  // timed and scaled to the batch size.
  const double ni_one = timed([&](int y, const Vector& p) { return detail::grid_moments(y, p, q, 7, 4.0); }, 1);
  const double ni = ni_one * samples;
  const bool pass = ts < gmt && gmt < is && is < ni;
  return {pass, fmt("seconds for %d instances: TS %.4f GM %.4f IS %.4f NI %.1f (one evaluation %.2f s, extrapolated)%s",
                    samples, ts, gmt, is, ni, ni_one, std::isfinite(sink) ? "" : " ")};
}

int count_capped(const std::vector<char>& flags) { return static_cast<int>(std::count(flags.begin(), flags.end(), 1)); }

Outcome scaled_experiment_one() {
  const std::vector<Eigen::Index> sizes{300, 1000, 3000};
  const int seeds = 6;
  std::vector<std::vector<double>> errs(sizes.size(), std::vector<double>(seeds));
  std::vector<double> bers(seeds);
  std::vector<std::vector<char>> capped(sizes.size(), std::vector<char>(seeds, 0));
  parallel_for(static_cast<std::size_t>(seeds), default_workers(), [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; ++s) {
      const std::uint64_t seed = 100 + s;
      auto model = gen_means(2000, 10, 4, seed);
      calibrate_variance(model, 0.10, 250000, seed + 1);
      bers[s] = bayes_error(4, model.noise_var, 1000000, seed + 2).value;
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        const Dataset data = gen_dataset(model, sizes[i], seed + 3 + i);
        TrainSettings settings;
        settings.config.seed = seed;
        const auto r = train(data, settings);
        capped[i][s] = r.converged ? 0 : 1;
        errs[i][s] = expected_error(r.weights, model, 1000000, seed + 10).value;
      }
    }
  });
  std::vector<MeanSe> avg;
  for (const auto& v : errs) avg.push_back(mean_se(v));
  bool monotone = true;
  for (std::size_t i = 1; i < avg.size(); ++i)
    monotone = monotone && avg[i].mean <= avg[i - 1].mean + 2 * std::hypot(avg[i].se, avg[i - 1].se);
  double ber_lo = 1, ber_hi = 0;
  for (double b : bers) ber_lo = std::min(ber_lo, b), ber_hi = std::max(ber_hi, b);
  const bool calibrated = ber_lo >= 0.095 && ber_hi <= 0.105;
  const bool pass = calibrated && avg[0].mean <= 0.20 && avg[2].mean <= 0.13 && monotone;
  return {pass, fmt("fresh-sample BER in [%.4f, %.4f]; expected error M=300 %.4f (se %.4f), M=1000 %.4f (se %.4f), "
                    "M=3000 %.4f (se %.4f); runs at the iteration cap: %d/%d/%d",
                    ber_lo, ber_hi, avg[0].mean, avg[0].se, avg[1].mean, avg[1].se, avg[2].mean, avg[2].se,
                    count_capped(capped[0]), count_capped(capped[1]), count_capped(capped[2]))};
}

Outcome sure_tuning_optimality() {
  const int seeds = 6, grid = 10;
  std::vector<double> lambdas(grid);
  for (int i = 0; i < grid; ++i) lambdas[static_cast<std::size_t>(i)] = std::pow(10.0, -1.0 + 4.0 * i / (grid - 1));
  std::vector<double> sure(seeds);
  std::vector<std::vector<double>> fixed(grid, std::vector<double>(seeds));
  std::vector<double> tuned_lambda(seeds);
  parallel_for(static_cast<std::size_t>(seeds), default_workers(), [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; ++s) {
      const std::uint64_t seed = 500 + s;
      auto model = gen_means(3000, 25, 4, seed);
      calibrate_variance(model, 0.10, 250000, seed + 1);
      const Dataset data = gen_dataset(model, 300, seed + 2);
      TrainSettings settings;
      settings.config.mode = Mode::MSA;
      settings.config.tuner = Tuner::SURE;
      settings.config.seed = seed;
      const auto r = train(data, settings);
      tuned_lambda[s] = r.final_parameters.at("lambda").front();
      sure[s] = expected_error(r.weights, model, 200000, seed + 3).value;
      settings.config.tuner = Tuner::Fixed;
      for (int i = 0; i < grid; ++i) {
        settings.lambda = lambdas[static_cast<std::size_t>(i)];
        fixed[static_cast<std::size_t>(i)][s] = expected_error(train(data, settings).weights, model, 200000, seed + 3).value;
      }
    }
  });
  const auto tuned = mean_se(sure);
  std::size_t best = 0;
  std::vector<MeanSe> grid_avg;
  for (const auto& v : fixed) grid_avg.push_back(mean_se(v));
  for (std::size_t i = 1; i < grid_avg.size(); ++i)
    if (grid_avg[i].mean < grid_avg[best].mean) best = i;
  const double slack = 2 * std::hypot(tuned.se, grid_avg[best].se);
  double mean_lambda = 0;
  for (double l : tuned_lambda) mean_lambda += l / seeds;
  return {tuned.mean <= grid_avg[best].mean + slack,
          fmt("SURE-tuned error %.4f (se %.4f, mean final lambda %.3g); best grid lambda %.3g error %.4f (se %.4f); "
              "allowed slack %.4f",
              tuned.mean, tuned.se, mean_lambda, lambdas[best], grid_avg[best].mean, grid_avg[best].se, slack)};
}

Outcome denoiser_oracle_suite() {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> beta(0.01, 1.0), mean(-2, 2), var(0.1, 5), qd(0.05, 3), rd(-6, 6);
  double bg_err = 0;
  for (int i = 0; i < 100; ++i) {
    const double b = beta(rng), m = mean(rng), v = var(rng), q = qd(rng), r = rd(rng);
    const auto post = bg_denoise(Matrix::Constant(1, 1, r), q,
                                 BgPrior{Vector::Constant(1, b), Vector::Constant(1, m), Vector::Constant(1, v)});
    const auto ref = oracle::bg_posterior(r, q, b, m, v);
    bg_err = std::max({bg_err, std::abs(post.x_hat(0, 0) - ref.mean), std::abs(post.q_x(0, 0) - ref.var)});
  }
  std::uniform_real_distribution<double> c(-3, 3), p(-2, 2), q(0.05, 4), mu(-3, 3), sigma(0.3, 3);
  double t_err = 0;
  for (int i = 0; i < 100; ++i) {
    const double cc = c(rng), pp = p(rng), qq = q(rng), mm = mu(rng), ss = sigma(rng);
    const auto t = gaussian_cdf_partial_moments(cc, pp, qq, mm, ss);
    const auto ref = oracle::cdf_partial_moments(cc, pp, qq, mm, ss);
    t_err = std::max({t_err, std::abs(t.t0 - ref[0]) / ref[0], std::abs(t.t1 - ref[1]) / std::max(std::abs(ref[1]), ref[0]),
                      std::abs(t.t2 - ref[2]) / ref[2]});
  }
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> qv(0.2, 3.0);
  double obj_err = 0, fd_err = 0;
  for (int i = 0; i < 100; ++i) {
    Vector pv(4), qvec(4), z(4);
    for (int k = 0; k < 4; ++k) pv[k] = 2 * g(rng), qvec[k] = qv(rng), z[k] = 2 * g(rng);
    const int y = i % 4;
    if (i < 20) {
      const auto r = msa_z_newton(y, pv, qvec);
      const Vector slow = oracle::map_gradient_ascent(y, pv, qvec, 10000);
      obj_err = std::max(obj_err, std::abs(msa_objective(y, pv, qvec, r.z_hat) - oracle::map_objective(y, pv, qvec, slow)));
    }
    const auto t = msa_newton_terms(y, pv, qvec, z);
    const double h = 1e-4, f0 = oracle::map_objective(y, pv, qvec, z);
    for (int k = 0; k < 4; ++k) {
      Vector zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      const double fp = oracle::map_objective(y, pv, qvec, zp), fm = oracle::map_objective(y, pv, qvec, zm);
      const double grad = (fp - fm) / (2 * h), hess = (fp - 2 * f0 + fm) / (h * h);
      fd_err = std::max({fd_err, std::abs(-t.g[k] - grad) / std::max(1.0, std::abs(grad)),
                         std::abs(t.h[k] - hess) / std::max(1.0, std::abs(hess))});
    }
  }
  const bool pass = bg_err <= 1e-6 && t_err <= 1e-8 && obj_err <= 1e-8 && fd_err <= 1e-5;
  return {pass, fmt("spike-and-slab max abs error %.2e; partial moments max rel error %.2e; Newton objective gap %.2e; "
                    "gradient/Hessian max rel error %.2e",
                    bg_err, t_err, obj_err, fd_err)};
}

Outcome engine_invariants() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  Matrix a(80, 50);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng) / std::sqrt(50.0);
  std::vector<int> labels(80);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  const Dataset data(FeatureMatrix(a), labels, 3);
  double worst = 0;
  int iterations = 0;
  auto run_once = [&](bool check) {
    TrainSettings s;
    s.config.max_iters = 50;
    s.config.tol = 1e-300;
    s.config.moment_method = MomentMethod::IS;
    s.config.seed = 31;
    if (check)
      s.run_options.observer = [&](const GampState& st) {
        const Matrix expect = data.features().times(st.x_hat) - st.q_p * st.s_hat_prev;
        worst = std::max(worst, (st.p_hat - expect).norm() / std::max(1.0, expect.norm()));
        const double qp = data.frobenius_sq() * st.q_x / static_cast<double>(data.num_samples());
        worst = std::max(worst, std::abs(st.q_p - qp) / qp);
        const double qr = static_cast<double>(data.num_features()) / (st.q_s * data.frobenius_sq());
        worst = std::max(worst, std::abs(st.q_r - qr) / qr);
        ++iterations;
      };
    return train(data, s);
  };
  const auto first = run_once(true), second = run_once(false);
  bool identical = first.trace.size() == second.trace.size() && first.weights.weights == second.weights.weights;
  for (std::size_t i = 0; identical && i < first.trace.size(); ++i) identical = first.trace[i].same_values(second.trace[i]);
  const bool pass = worst <= 1e-10 && iterations == 50 && identical;
  return {pass, fmt("%d iterations checked, worst relative identity error %.2e; repeated run %s", iterations, worst,
                    identical ? "bit-identical" : "differs")};
}

Outcome metrics_and_identities() {
  bool ok = true;
  std::string notes;
  Matrix one = Matrix::Zero(4, 3);
  one(2, 1) = 5.0;
  ok = ok && k99(WeightMatrix{one}) == 1 && l0(WeightMatrix{one}) == 1;
  Matrix tiny = Matrix::Zero(3, 3);
  tiny(1, 2) = -1e-300;
  ok = ok && l0(WeightMatrix{tiny}) == 1 && l0(WeightMatrix{Matrix::Zero(3, 3)}) == 0;
  for (int nd : {1, 4, 12, 100})
    ok = ok && k99(WeightMatrix{Matrix::Constant(nd, 1, 0.7)}) == static_cast<std::int64_t>(std::ceil(0.9801 * nd - 1e-9));
  Matrix four(2, 2);
  four << 3, 1, 1, 1;
  ok = ok && k99(WeightMatrix{four}) == 4 && oracle::k99_exhaustive(four) == 4;
  notes += ok ? "k99/l0 examples hold; " : "k99/l0 example mismatch; ";

  auto model = gen_means(10, 5, 3, 8);
  model.noise_var = 0.3;
  WeightMatrix same{Matrix::Zero(10, 3)};
  same.weights.colwise() = Vector::LinSpaced(10, -1, 1);
  const double degenerate = expected_error(same, model, 10000, 1).value;
  ok = ok && degenerate == 1.0;
  notes += fmt("identical columns give %.3f; ", degenerate);

  auto binary = gen_means(15, 5, 2, 9);
  binary.noise_var = 0.4;
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g;
  Matrix x = binary.means;
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += 0.5 * g(rng);
  const Vector w = x.col(0) - x.col(1);
  const double s = std::sqrt(binary.noise_var) * w.norm();
  const double closed = 1 - 0.5 * (oracle::ncdf(w.dot(binary.means.col(0)) / s) + oracle::ncdf(-w.dot(binary.means.col(1)) / s));
  const auto est = expected_error(WeightMatrix{x}, binary, 1000000, 11);
  const bool close = std::abs(est.value - closed) <= 3 * est.se;
  ok = ok && close;
  notes += fmt("binary closed form %.5f vs Monte Carlo %.5f (se %.5f)", closed, est.value, est.se);
  return {ok, notes};
}

}  // namespace

// Optional arguments select criteria by id; default runs all.
int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "moment-oracle agreement", 300, moment_oracle_agreement},
      {2, "Taylor-series validity window", 60, taylor_validity_window},
      {3, "moment-method runtime ordering", 600, runtime_ordering},
      {4, "scaled synthetic experiment", 1800, scaled_experiment_one},
      {5, "SURE tuning optimality", 1800, sure_tuning_optimality},
      {6, "denoiser oracle suite", 120, denoiser_oracle_suite},
      {7, "engine invariants", 60, engine_invariants},
      {8, "metrics and formula identities", 120, metrics_and_identities},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t = clock_type::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double elapsed = seconds(t);
    const bool in_time = elapsed <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail
              << fmt(" [%.1f s of %.0f s budget]", elapsed, c.budget_seconds) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
