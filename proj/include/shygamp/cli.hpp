#pragma once

// Command-line front end: train, predict, eval, synth, moments-bench.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "shygamp/gamp.hpp"
#include "shygamp/gm_cache.hpp"
#include "shygamp/io.hpp"
#include "shygamp/model.hpp"
#include "shygamp/output_denoisers.hpp"
#include "shygamp/parallel.hpp"
#include "shygamp/report.hpp"
#include "shygamp/synth.hpp"
#include "shygamp/trainer.hpp"

namespace shygamp {

/// Invalid flag values or combinations.
class UsageError : public Error {
 public:
  using Error::Error;
};

namespace cli {

using clock = std::chrono::steady_clock;

inline double seconds_since(clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); }

struct TrainFlags {
  std::string mode = "spa";
  std::string moments = "gm";
  std::string tuner;  // empty: per-mode default
  double lambda = 1.0;
  std::vector<std::string> preprocess;
  int max_iters = 200;
  double tol = 1e-5;
  double damping = 1.0;
  bool fixed_damping = false;
  std::uint64_t seed = 0;
  int gm_components = 2;
  std::string gm_cache;
  unsigned workers = 1;

  void add_to(CLI::App& app) {
    app.add_option("--mode", mode, "spa (sum-product) or msa (min-sum)")->check(CLI::IsMember({"spa", "msa"}));
    app.add_option("--moments", moments, "sum-product moment method")->check(CLI::IsMember({"gm", "is", "ni", "ts"}));
    app.add_option("--tuner", tuner, "em, sure or fixed (default: em for spa, sure for msa)")
        ->check(CLI::IsMember({"em", "sure", "fixed"}));
    app.add_option("--lambda", lambda, "Laplace scale: fixed value, or SURE starting point");
    app.add_option("--preprocess", preprocess, "preprocessing steps, applied in order")
        ->delimiter(',')
        ->check(CLI::IsMember({"log2", "zscore"}));
    app.add_option("--max-iters", max_iters, "iteration cap");
    app.add_option("--tol", tol, "relative change threshold on the weights");
    app.add_option("--damping", damping, "initial damping factor in (0, 1]");
    app.add_flag("--fixed-damping", fixed_damping, "disable the adaptive damping schedule");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--gm-components", gm_components, "mixture size of the soft-max approximation");
    app.add_option("--gm-cache", gm_cache, "directory for cached soft-max approximations");
    app.add_option("--workers", workers, "worker threads");
  }

  TrainSettings settings() const {
    TrainSettings s;
    s.config.mode = mode == "msa" ? Mode::MSA : Mode::SPA;
    const std::string t = tuner.empty() ? (mode == "msa" ? "sure" : "em") : tuner;
    s.config.tuner = t == "em" ? Tuner::EM : t == "sure" ? Tuner::SURE : Tuner::Fixed;
    s.config.moment_method = moments == "is"   ? MomentMethod::IS
                             : moments == "ni" ? MomentMethod::NI
                             : moments == "ts" ? MomentMethod::TS
                                               : MomentMethod::GM;
    s.config.max_iters = max_iters;
    s.config.tol = tol;
    s.config.damping = damping;
    s.config.adaptive_damping = !fixed_damping;
    s.config.seed = seed;
    s.lambda = lambda;
    s.gm_components = gm_components;
    if (!gm_cache.empty()) s.gm_cache_dir = gm_cache;
    s.workers = std::max(1u, workers);
    if (!(lambda > 0.0)) throw UsageError("lambda must be positive");
    if (gm_components < 1) throw UsageError("--gm-components must be at least 1");
    try {
      s.config.validate();
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
    return s;
  }

  std::vector<PreprocessStep> steps() const {
    std::vector<PreprocessStep> out;
    for (const auto& p : preprocess) out.push_back(parse_preprocess_step(p));
    return out;
  }
};

struct InputFlags {
  std::string path;
  std::string format;
  std::string label_column = "label";

  void add_to(CLI::App& app, const char* name = "--input", bool required = true) {
    auto* o = app.add_option(name, path, "data file (SVMLight or CSV)");
    if (required) o->required();
    app.add_option("--format", format, "svmlight or csv (default: by extension)")
        ->check(CLI::IsMember({"svmlight", "csv"}));
    app.add_option("--label-column", label_column, "CSV label column name or index");
  }

  bool is_csv(const std::string& p) const {
    if (!format.empty()) return format == "csv";
    return std::filesystem::path(p).extension() == ".csv";
  }

  RawData read_raw(const std::string& p, std::optional<Eigen::Index> n = std::nullopt) const {
    return is_csv(p) ? read_csv_raw(p, label_column) : read_svmlight_raw(p, n);
  }

  Dataset read(const std::string& p) const { return make_dataset(read_raw(p)); }
};

inline DatasetDescriptor describe(const std::string& source, const Dataset& d, std::int64_t test_samples) {
  DatasetDescriptor x;
  x.source = source;
  x.samples = d.num_samples();
  x.features = d.num_features();
  x.classes = d.num_classes();
  x.test_samples = test_samples;
  for (int y = 0; y < d.num_classes(); ++y) x.labels.push_back(label_name(d, y));
  return x;
}

inline ReportRecord base_report(const TrainFlags& f, const TrainSettings& s) {
  ReportRecord r;
  r.mode = to_string(s.config.mode);
  r.moment_method = s.config.mode == Mode::SPA ? to_string(s.config.moment_method) : "none";
  r.tuner = to_string(s.config.tuner);
  r.seed = f.seed;
  return r;
}

inline void emit_json(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << j.dump(2) << '\n';
}

inline std::string run_key(const std::vector<std::string>& args) {
  std::string key;
  for (const auto& a : args) key += a + '\x1f';
  return key;
}

// ---------------------------------------------------------------------------

struct FoldOutcome {
  std::int64_t errors = 0, tested = 0;
  SparsityReport sparsity;
  TrainResult result;
  double evaluation_seconds = 0;
};

/// Preprocesses with statistics from `fit_on`, trains on `train`, tests on `test`.
inline FoldOutcome train_and_test(const Dataset& train_raw, const Dataset& test_raw, const Dataset& fit_on,
                                  const TrainFlags& flags, TrainSettings settings) {
  const auto [fitted, prep] = preprocess(fit_on, flags.steps());
  (void)fitted;
  const Dataset train_set = apply_preprocessing(train_raw, prep);
  const Dataset test_set = apply_preprocessing(test_raw, prep);
  FoldOutcome o;
  o.result = train(train_set, settings);
  const auto t = clock::now();
  o.errors = count_errors(predict_all(o.result.weights, test_set.features()), test_set.labels());
  o.tested = test_set.num_samples();
  o.evaluation_seconds = seconds_since(t);
  o.sparsity = sparsity(o.result.weights);
  return o;
}

inline int cmd_train(const TrainFlags& flags, const InputFlags& input, const std::string& report_path,
                     const std::string& weights_out, const std::string& key, std::ostream& out, std::ostream& err) {
  const TrainSettings settings = flags.settings();
  const Dataset raw = input.read(input.path);
  auto [data, prep] = preprocess(raw, flags.steps());
  for (const auto& w : prep.warnings) err << "warning: " << w << '\n';
  const TrainResult result = train(data, settings);
  const auto t = clock::now();
  const auto errors = count_errors(predict_all(result.weights, data.features()), data.labels());
  const double eval_seconds = seconds_since(t);

  ReportRecord r = base_report(flags, settings);
  r.run_id = stable_run_id(key);
  r.iterations = result.iterations_run;
  r.converged = result.converged;
  r.tuning_seconds = result.tuning_seconds;
  r.training_seconds = result.training_seconds;
  r.evaluation_seconds = eval_seconds;
  const auto rate = error_rate_estimate(errors, data.num_samples());
  r.error_rate = rate.mean;
  r.error_se = rate.sd;
  const auto sp = sparsity(result.weights);
  r.k99 = static_cast<double>(sp.k99);
  r.l0 = static_cast<double>(sp.l0);
  r.hyperparameters = result.final_parameters;
  r.dataset = describe(input.path, data, data.num_samples());
  emit_json(to_json(r), report_path, out);

  if (!weights_out.empty()) {
    WeightsFile w;
    w.weights = result.weights;
    for (int y = 0; y < data.num_classes(); ++y) w.label_names.push_back(label_name(data, y));
    if (!prep.steps.empty()) w.preprocessing = prep;
    write_weights(weights_out, w);
  }
  if (!result.converged) err << "warning: stopped at the iteration cap before reaching the tolerance\n";
  return 0;
}

inline int cmd_predict(const std::string& weights_path, const InputFlags& input, const std::string& out_path,
                       std::ostream& out) {
  const WeightsFile w = read_weights(weights_path);
  const Eigen::Index expected = w.preprocessing ? w.preprocessing->input_features : w.weights.num_features();
  RawData raw = input.read_raw(input.path, expected);
  FeatureMatrix a = std::move(raw.features);
  if (w.preprocessing) a = apply_preprocessing(a, *w.preprocessing);
  const auto pred = predict_all(w.weights, a);
  std::ofstream file;
  std::ostream* dest = &out;
  if (!out_path.empty() && out_path != "-") {
    file.open(out_path);
    if (!file) throw Error("cannot write " + out_path);
    dest = &file;
  }
  for (int y : pred) *dest << w.label_names[static_cast<std::size_t>(y)] << '\n';
  return 0;
}

inline int cmd_eval(const TrainFlags& flags, const InputFlags& input, const std::string& test_path, int folds,
                    double test_fraction, bool zscore_whole, const std::string& report_path, const std::string& key,
                    std::ostream& out, std::ostream& err) {
  const TrainSettings settings = flags.settings();
  const int modes = (!test_path.empty() ? 1 : 0) + (folds > 0 ? 1 : 0) + (test_fraction > 0.0 ? 1 : 0);
  if (modes != 1) throw UsageError("eval needs exactly one of --test, --folds, --test-fraction");

  std::vector<FoldOutcome> outcomes;
  Dataset data = input.read(input.path);
  std::int64_t total_samples = data.num_samples();
  if (!test_path.empty()) {
    // Map the test labels through the training label names.
    RawData raw_test = input.read_raw(test_path, input.is_csv(test_path) ? std::nullopt
                                                                          : std::optional<Eigen::Index>(data.num_features()));
    std::vector<int> labels;
    for (const auto& s : raw_test.labels) {
      const auto& names = data.label_names();
      auto it = std::find(names.begin(), names.end(), s);
      if (it == names.end()) {
        const auto v = detail::parse_double(s);
        it = std::find_if(names.begin(), names.end(), [&](const std::string& n) {
          const auto nv = detail::parse_double(n);
          return v && nv && *v == *nv;
        });
      }
      if (it == names.end()) throw InvalidArgument("test label '" + s + "' never appears in training data");
      labels.push_back(static_cast<int>(it - names.begin()));
    }
    Dataset test(std::move(raw_test.features), std::move(labels), data.num_classes());
    test.set_label_names(data.label_names());
    total_samples += test.num_samples();
    outcomes.push_back(train_and_test(data, test, data, flags, settings));
  } else {
    const int count = folds > 0 ? folds : 1;
    outcomes.resize(static_cast<std::size_t>(count));
    std::vector<std::string> warnings(static_cast<std::size_t>(count));
    parallel_for(static_cast<std::size_t>(count), settings.workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t k = b; k < e; ++k) {
        auto [tr, te] = folds > 0 ? split_fold(data, folds, static_cast<int>(k), flags.seed)
                                  : split(data, test_fraction, flags.seed);
        TrainSettings s = settings;
        s.config.seed = flags.seed + k;
        s.workers = 1;
        outcomes[k] = train_and_test(tr, te, zscore_whole ? data : tr, flags, s);
      }
    });
  }

  ReportRecord r = base_report(flags, settings);
  r.run_id = stable_run_id(key);
  std::int64_t errors = 0, tested = 0, iters = 0;
  bool converged = true;
  for (const auto& o : outcomes) {
    errors += o.errors;
    tested += o.tested;
    iters += o.result.iterations_run;
    converged = converged && o.result.converged;
    r.tuning_seconds += o.result.tuning_seconds;
    r.training_seconds += o.result.training_seconds;
    r.evaluation_seconds += o.evaluation_seconds;
    r.k99 += static_cast<double>(o.sparsity.k99) / static_cast<double>(outcomes.size());
    r.l0 += static_cast<double>(o.sparsity.l0) / static_cast<double>(outcomes.size());
  }
  const auto rate = error_rate_estimate(errors, tested);
  r.error_rate = rate.mean;
  r.error_se = rate.sd;
  r.iterations = static_cast<int>(iters / static_cast<std::int64_t>(outcomes.size()));
  r.converged = converged;
  r.hyperparameters = outcomes.front().result.final_parameters;
  r.dataset = describe(input.path, data, tested);
  r.dataset.samples = total_samples;
  emit_json(to_json(r), report_path, out);
  if (!converged) err << "warning: at least one fold stopped at the iteration cap\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthFlags {
  Eigen::Index m = 300, n = 2000;
  int k = 10, d = 4;
  double ber = 0.10;
  int trials = 1;
  std::string sweep;
  std::vector<double> values;
  std::string table;
  std::size_t mc_samples = 1000000;
  std::size_t calibration_samples = 200000;
  bool permute_support = false;
};

struct SynthPoint {
  double error = 0, se = 0, runtime = 0;
  ReportRecord report;
};

inline SynthPoint synth_point(const SynthFlags& sf, const TrainFlags& flags, TrainSettings settings) {
  SynthPoint p;
  std::vector<double> errs;
  double mc_var = 0;
  for (int t = 0; t < sf.trials; ++t) {
    const std::uint64_t seed = flags.seed + static_cast<std::uint64_t>(t);
    ClassModel model = gen_means(sf.n, sf.k, sf.d, seed, sf.permute_support);
    calibrate_variance(model, sf.ber, sf.calibration_samples, seed + 101);
    const Dataset data = gen_dataset(model, sf.m, seed + 202);
    settings.config.seed = seed;
    const auto started = clock::now();
    const TrainResult res = train(data, settings);
    p.runtime += seconds_since(started) / sf.trials;
    const auto tick = clock::now();
    const auto e = expected_error(res.weights, model, sf.mc_samples, seed + 303);
    errs.push_back(e.value);
    mc_var += e.se * e.se;
    auto& r = p.report;
    r.iterations += res.iterations_run;
    r.converged = (t == 0 || r.converged) && res.converged;
    r.tuning_seconds += res.tuning_seconds;
    r.training_seconds += res.training_seconds;
    r.evaluation_seconds += seconds_since(tick);
    const auto sp = sparsity(res.weights);
    r.k99 += static_cast<double>(sp.k99) / sf.trials;
    r.l0 += static_cast<double>(sp.l0) / sf.trials;
    r.hyperparameters = res.final_parameters;
  }
  const double n = static_cast<double>(errs.size());
  for (double e : errs) p.error += e / n;
  if (errs.size() > 1) {
    double ss = 0;
    for (double e : errs) ss += (e - p.error) * (e - p.error);
    p.se = std::sqrt(ss / (n - 1.0) / n);
  } else {
    p.se = std::sqrt(mc_var);
  }
  p.report.iterations /= sf.trials;
  p.report.error_rate = p.error;
  p.report.error_se = p.se;
  return p;
}

inline int cmd_synth(SynthFlags sf, const TrainFlags& flags, const std::string& report_path, const std::string& key,
                     std::ostream& out) {
  const TrainSettings settings = flags.settings();
  if (sf.trials < 1) throw UsageError("--trials must be at least 1");
  if (sf.d < 2) throw UsageError("--D must be at least 2");
  if (sf.k < sf.d) throw UsageError("--K must be at least --D");
  if (sf.n < sf.k) throw UsageError("--N must be at least --K");
  if (sf.m % sf.d != 0) throw UsageError("--M must be a multiple of --D");
  if (!(sf.ber > 0.0 && sf.ber < (sf.d - 1.0) / sf.d)) throw UsageError("--ber must lie in (0, (D-1)/D)");

  auto fill = [&](SynthPoint& p) {
    ReportRecord base = base_report(flags, settings);
    base.iterations = p.report.iterations;
    base.converged = p.report.converged;
    base.tuning_seconds = p.report.tuning_seconds;
    base.training_seconds = p.report.training_seconds;
    base.evaluation_seconds = p.report.evaluation_seconds;
    base.error_rate = p.report.error_rate;
    base.error_se = p.report.error_se;
    base.k99 = p.report.k99;
    base.l0 = p.report.l0;
    base.hyperparameters = p.report.hyperparameters;
    base.dataset.source = "synthetic K=" + std::to_string(sf.k) + " ber=" + std::to_string(sf.ber);
    base.dataset.samples = sf.m;
    base.dataset.features = sf.n;
    base.dataset.classes = sf.d;
    for (int y = 0; y < sf.d; ++y) base.dataset.labels.push_back(std::to_string(y + 1));
    p.report = base;
  };

  if (sf.sweep.empty()) {
    SynthPoint p = synth_point(sf, flags, settings);
    fill(p);
    p.report.run_id = stable_run_id(key);
    emit_json(to_json(p.report), report_path, out);
    return 0;
  }
  if (sf.values.empty()) throw UsageError("--sweep needs --values");
  if (sf.sweep == "lambda" && settings.config.mode != Mode::MSA) throw UsageError("a lambda sweep needs --mode msa");
  std::ostringstream csv;
  csv << sf.sweep << ",error,se,runtime_seconds\n";
  nlohmann::json points = nlohmann::json::array();
  for (double v : sf.values) {
    SynthFlags local = sf;
    TrainSettings s = settings;
    if (sf.sweep == "M") local.m = static_cast<Eigen::Index>(std::llround(v));
    else if (sf.sweep == "N") local.n = static_cast<Eigen::Index>(std::llround(v));
    else if (sf.sweep == "K") local.k = static_cast<int>(std::llround(v));
    else {
      if (!(v > 0.0)) throw UsageError("lambda values must be positive");
      s.lambda = v;
      s.config.tuner = Tuner::Fixed;
    }
    if (local.m % local.d != 0 || local.k < local.d || local.n < local.k)
      throw UsageError("sweep value " + std::to_string(v) + " gives an invalid configuration");
    SynthPoint p = synth_point(local, flags, s);
    fill(p);
    p.report.dataset.samples = local.m;
    p.report.dataset.features = local.n;
    p.report.dataset.source = "synthetic K=" + std::to_string(local.k) + " ber=" + std::to_string(sf.ber);
    p.report.run_id = stable_run_id(key + std::to_string(v));
    if (sf.sweep == "lambda") p.report.tuner = "fixed";
    csv << std::setprecision(10) << v << ',' << p.error << ',' << p.se << ',' << p.runtime << '\n';
    points.push_back(to_json(p.report));
  }
  if (sf.table.empty() || sf.table == "-") out << csv.str();
  else {
    std::ofstream f(sf.table);
    if (!f) throw Error("cannot write " + sf.table);
    f << csv.str();
  }
  if (!report_path.empty()) emit_json({{"sweep", sf.sweep}, {"points", points}}, report_path, out);
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchFlags {
  int d = 4;
  std::vector<double> qp{0.01, 0.1, 0.3, 1.0, 2.0, 4.0};
  int trials = 2000;
  std::vector<std::string> methods{"gm", "is", "ni", "ts"};
  int samples = 500;
  std::uint64_t seed = 0;
  std::string table;
  std::string gm_cache;
};

/// Moment accuracy (sampling z and y from the model) and cumulative runtime
/// over a batch of independent instances, for each method and prior variance.
inline int cmd_moments_bench(const BenchFlags& bf, std::ostream& out) {
  if (bf.d < 2) throw UsageError("--D must be at least 2");
  if (bf.trials < 1 || bf.samples < 1) throw UsageError("--trials and --samples must be positive");
  for (double q : bf.qp)
    if (!(q > 0.0)) throw UsageError("--qp values must be positive");
  std::shared_ptr<const GmLikApprox> approx;
  for (const auto& m : bf.methods)
    if (m == "gm" && !approx)
      approx = std::make_shared<const GmLikApprox>(
          load_or_fit_gm_approx(bf.d, 2, bf.gm_cache.empty() ? default_gm_cache_dir() : std::filesystem::path(bf.gm_cache)));
  const bool ni_ok = detail::grid_size(bf.d, 7) <= 1e8;
  const bool oracle_ok = bf.d <= 5;

  auto estimate = [&](const std::string& m, int y, const Vector& p, const Vector& q, std::uint64_t seed) {
    if (m == "gm") return spa_moments_gm(y, p, q, *approx);
    if (m == "is") return spa_moments_is(y, p, q, 1500, seed);
    if (m == "ni") return spa_moments_ni(y, p, q);
    if (m == "ts") return spa_moments_ts(y, p, q);
    return MomentResult{p, q, 1.0};  // trivial estimator: the prior
  };

  std::ostringstream csv;
  csv << "method,q_p,mse_over_qp,mse_vs_oracle,breakdowns,runtime_seconds\n";
  for (double qv : bf.qp) {
    Vector p_hat = Vector::Zero(bf.d);
    p_hat[0] = 1.0;
    const Vector q = Vector::Constant(bf.d, qv);
    std::mt19937_64 rng(bf.seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    std::vector<Vector> z_true;
    std::vector<int> y_true;
    for (int t = 0; t < bf.trials; ++t) {
      Vector z(bf.d);
      for (int d = 0; d < bf.d; ++d) z[d] = p_hat[d] + std::sqrt(qv) * normal(rng);
      const Vector u = softmax(z);
      double c = unif(rng), acc = 0;
      int y = bf.d - 1;
      for (int d = 0; d < bf.d; ++d)
        if ((acc += u[d]) >= c) {
          y = d;
          break;
        }
      z_true.push_back(z);
      y_true.push_back(y);
    }
    std::vector<Vector> oracle;
    if (oracle_ok)
      for (int y = 0; y < bf.d; ++y) oracle.push_back(moments_bruteforce(y, p_hat, q).z_hat);

    auto row = [&](const std::string& m) {
      double mse = 0, mse_oracle = 0;
      int breakdowns = 0;
      for (int t = 0; t < bf.trials; ++t) {
        Vector z_hat;
        try {
          z_hat = estimate(m, y_true[static_cast<std::size_t>(t)], p_hat, q, bf.seed + static_cast<std::uint64_t>(t)).z_hat;
        } catch (const MethodBreakdown&) {
          ++breakdowns;
          z_hat = p_hat;
        }
        mse += (z_hat - z_true[static_cast<std::size_t>(t)]).squaredNorm() / bf.trials;
        if (oracle_ok) mse_oracle += (z_hat - oracle[static_cast<std::size_t>(y_true[static_cast<std::size_t>(t)])]).squaredNorm() / bf.trials;
      }
      // runtime over a batch of random instances
      std::mt19937_64 r2(bf.seed + 7);
      double runtime = NAN;
      if (m != "ni" || ni_ok) {
        std::vector<Vector> ps;
        std::vector<int> ys;
        for (int s = 0; s < bf.samples; ++s) {
          Vector p(bf.d);
          for (int d = 0; d < bf.d; ++d) p[d] = normal(r2);
          ps.push_back(p);
          ys.push_back(static_cast<int>(r2() % static_cast<std::uint64_t>(bf.d)));
        }
        const auto t0 = clock::now();
        for (int s = 0; s < bf.samples; ++s) {
          try {
            (void)estimate(m, ys[static_cast<std::size_t>(s)], ps[static_cast<std::size_t>(s)], q, static_cast<std::uint64_t>(s));
          } catch (const MethodBreakdown&) {
          }
        }
        runtime = seconds_since(t0);
      }
      csv << m << ',' << qv << ',' << std::setprecision(8) << mse / qv << ',';
      if (oracle_ok) csv << mse_oracle;
      csv << ',' << breakdowns << ',' << runtime << '\n';
    };
    row("trivial");
    for (const auto& m : bf.methods) {
      if (m == "ni" && !ni_ok) {
        csv << "ni," << qv << ",,,0,\n";
        continue;
      }
      row(m);
    }
  }
  if (bf.table.empty() || bf.table == "-") out << csv.str();
  else {
    std::ofstream f(bf.table);
    if (!f) throw Error("cannot write " + bf.table);
    f << csv.str();
  }
  return 0;
}

}  // namespace cli

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sparse multinomial logistic regression by scalar-variance message passing"};
  app.require_subcommand(1);
  std::vector<std::string> args(argv, argv + argc);
  const std::string key = cli::run_key(args);

  cli::TrainFlags tf;
  cli::InputFlags in;
  std::string report, weights_out;
  auto* train_cmd = app.add_subcommand("train", "fit a classifier");
  tf.add_to(*train_cmd);
  in.add_to(*train_cmd);
  train_cmd->add_option("--report", report, "JSON report path (default stdout)");
  train_cmd->add_option("--weights-out", weights_out, "where to write the weights file");

  std::string weights_in, pred_out;
  cli::InputFlags pin;
  auto* predict_cmd = app.add_subcommand("predict", "classify samples with a weights file");
  predict_cmd->add_option("--weights", weights_in, "weights file")->required();
  pin.add_to(*predict_cmd);
  predict_cmd->add_option("--out", pred_out, "output path for predicted labels (default stdout)");

  cli::TrainFlags etf;
  cli::InputFlags ein;
  std::string test_path, eval_report;
  int folds = 0;
  double test_fraction = 0.0;
  bool zscore_whole = false;
  auto* eval_cmd = app.add_subcommand("eval", "train and measure test error");
  etf.add_to(*eval_cmd);
  ein.add_to(*eval_cmd);
  eval_cmd->add_option("--test", test_path, "separate test file");
  eval_cmd->add_option("--folds", folds, "number of cross-validation folds");
  eval_cmd->add_option("--test-fraction", test_fraction, "random hold-out fraction");
  eval_cmd->add_flag("--zscore-whole", zscore_whole, "fit z-score statistics on the whole dataset");
  eval_cmd->add_option("--report", eval_report, "JSON report path (default stdout)");

  cli::TrainFlags stf;
  stf.mode = "spa";
  cli::SynthFlags sf;
  std::string synth_report;
  auto* synth_cmd = app.add_subcommand("synth", "synthetic-data experiments");
  stf.add_to(*synth_cmd);
  synth_cmd->add_option("--M", sf.m, "training samples");
  synth_cmd->add_option("--N", sf.n, "features");
  synth_cmd->add_option("--K", sf.k, "support size of the class means");
  synth_cmd->add_option("--D", sf.d, "classes");
  synth_cmd->add_option("--ber", sf.ber, "target Bayes error rate");
  synth_cmd->add_option("--trials", sf.trials, "independent seeds per point");
  synth_cmd->add_option("--sweep", sf.sweep, "parameter to sweep")->check(CLI::IsMember({"M", "N", "K", "lambda"}));
  synth_cmd->add_option("--values", sf.values, "sweep values")->delimiter(',');
  synth_cmd->add_option("--table", sf.table, "CSV table path for sweeps (default stdout)");
  synth_cmd->add_option("--mc-samples", sf.mc_samples, "Monte Carlo draws for the expected error");
  synth_cmd->add_option("--calibration-samples", sf.calibration_samples, "Monte Carlo draws per class for calibration");
  synth_cmd->add_flag("--permute-support", sf.permute_support, "place the mean support on random rows");
  synth_cmd->add_option("--report", synth_report, "JSON report path (default stdout)");

  cli::BenchFlags bf;
  auto* bench_cmd = app.add_subcommand("moments-bench", "accuracy and runtime of the moment methods");
  bench_cmd->add_option("--D", bf.d, "classes");
  bench_cmd->add_option("--qp", bf.qp, "prior variances")->delimiter(',');
  bench_cmd->add_option("--trials", bf.trials, "accuracy trials per variance");
  bench_cmd->add_option("--methods", bf.methods, "methods to run")
      ->delimiter(',')
      ->check(CLI::IsMember({"gm", "is", "ni", "ts"}));
  bench_cmd->add_option("--samples", bf.samples, "instances in the runtime batch");
  bench_cmd->add_option("--seed", bf.seed, "random seed");
  bench_cmd->add_option("--table", bf.table, "CSV output path (default stdout)");
  bench_cmd->add_option("--gm-cache", bf.gm_cache, "directory for cached soft-max approximations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*train_cmd) return cli::cmd_train(tf, in, report, weights_out, key, out, err);
    if (*predict_cmd) return cli::cmd_predict(weights_in, pin, pred_out, out);
    if (*eval_cmd)
      return cli::cmd_eval(etf, ein, test_path, folds, test_fraction, zscore_whole, eval_report, key, out, err);
    if (*synth_cmd) return cli::cmd_synth(sf, stf, synth_report, key, out);
    if (*bench_cmd) return cli::cmd_moments_bench(bf, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace shygamp
