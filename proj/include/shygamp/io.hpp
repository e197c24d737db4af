#pragma once

// Dataset readers and writers, preprocessing, train/test splitting, error
// rate summaries and the weights file format.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "shygamp/errors.hpp"
#include "shygamp/model.hpp"

namespace shygamp {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

/// Features plus label strings as they appear in the file.
struct RawData {
  FeatureMatrix features;
  std::vector<std::string> labels;
};

/// Maps label strings to {0,...,D-1} by sorted distinct value (numeric order
/// when every label is numeric, lexicographic otherwise).
inline Dataset make_dataset(RawData raw) {
  std::vector<std::string> distinct = raw.labels;
  const bool numeric = std::all_of(distinct.begin(), distinct.end(),
                                   [](const std::string& s) { return detail::parse_double(s).has_value(); });
  std::sort(distinct.begin(), distinct.end(), [&](const std::string& a, const std::string& b) {
    return numeric ? *detail::parse_double(a) < *detail::parse_double(b) : a < b;
  });
  distinct.erase(std::unique(distinct.begin(), distinct.end(),
                             [&](const std::string& a, const std::string& b) {
                               return numeric ? *detail::parse_double(a) == *detail::parse_double(b) : a == b;
                             }),
                 distinct.end());
  if (distinct.size() < 2) throw InvalidArgument("dataset needs at least two distinct labels");
  std::vector<int> labels;
  labels.reserve(raw.labels.size());
  for (const auto& s : raw.labels) {
    const auto it = std::lower_bound(distinct.begin(), distinct.end(), s, [&](const std::string& a, const std::string& b) {
      return numeric ? *detail::parse_double(a) < *detail::parse_double(b) : a < b;
    });
    labels.push_back(static_cast<int>(it - distinct.begin()));
  }
  Dataset data(std::move(raw.features), std::move(labels), static_cast<int>(distinct.size()));
  data.set_label_names(std::move(distinct));
  return data;
}

// ---------------------------------------------------------------------------
// SVMLight: "label idx:val idx:val ..." with 1-based ascending indices.
// Blank lines and '#' comments are ignored.

inline RawData read_svmlight_raw(std::istream& in, std::optional<Eigen::Index> num_features = std::nullopt) {
  std::vector<Eigen::Triplet<double>> trips;
  std::vector<std::string> labels;
  std::string line;
  std::size_t lineno = 0;
  Eigen::Index max_index = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view body(line);
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = detail::trim(body);
    if (body.empty()) continue;
    std::istringstream ls{std::string(body)};
    std::string tok;
    ls >> tok;
    if (tok.find(':') != std::string::npos) throw ParseError("missing label", lineno);
    const int row = static_cast<int>(labels.size());
    labels.push_back(tok);
    Eigen::Index prev = 0;
    while (ls >> tok) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos) throw ParseError("expected idx:val, got '" + tok + "'", lineno);
      long long idx = 0;
      const auto* b = tok.data();
      const auto [p, ec] = std::from_chars(b, b + colon, idx);
      if (ec != std::errc() || p != b + colon) throw ParseError("bad feature index '" + tok + "'", lineno);
      if (idx < 1) throw ParseError("feature indices are 1-based", lineno);
      if (idx <= prev) throw ParseError("feature indices must be strictly ascending", lineno);
      const auto val = detail::parse_double(std::string_view(tok).substr(colon + 1));
      if (!val) throw ParseError("bad feature value '" + tok + "'", lineno);
      prev = idx;
      max_index = std::max<Eigen::Index>(max_index, idx);
      if (*val != 0.0) trips.emplace_back(row, static_cast<int>(idx - 1), *val);
    }
  }
  if (labels.empty()) throw ParseError("empty SVMLight input");
  Eigen::Index n = max_index;
  if (num_features) {
    if (*num_features < max_index)
      throw InvalidArgument("feature index " + std::to_string(max_index) + " exceeds requested N=" +
                            std::to_string(*num_features));
    n = *num_features;
  }
  if (n < 1) throw ParseError("SVMLight input has no features");
  SparseRowMatrix a(static_cast<Eigen::Index>(labels.size()), n);
  a.setFromTriplets(trips.begin(), trips.end());
  return {FeatureMatrix(std::move(a)), std::move(labels)};
}

inline RawData read_svmlight_raw(const std::filesystem::path& path,
                                 std::optional<Eigen::Index> num_features = std::nullopt) {
  auto in = detail::open_for_read(path);
  return read_svmlight_raw(in, num_features);
}

inline Dataset read_svmlight(const std::filesystem::path& path, std::optional<Eigen::Index> num_features = std::nullopt) {
  return make_dataset(read_svmlight_raw(path, num_features));
}

inline std::string label_name(const Dataset& data, int y) {
  return data.label_names().empty() ? std::to_string(y + 1) : data.label_names()[static_cast<std::size_t>(y)];
}

inline void write_svmlight(std::ostream& out, const Dataset& data) {
  const SparseRowMatrix a = data.features().is_sparse() ? *data.features().sparse()
                                                       : data.features().dense()->sparseView(0.0, 0.0);
  for (Eigen::Index m = 0; m < a.rows(); ++m) {
    out << label_name(data, data.labels()[static_cast<std::size_t>(m)]);
    for (SparseRowMatrix::InnerIterator it(a, m); it; ++it)
      if (it.value() != 0.0) out << ' ' << it.col() + 1 << ':' << detail::format_double(it.value());
    out << '\n';
  }
}

inline void write_svmlight(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_svmlight(out, data);
}

// ---------------------------------------------------------------------------
// Dense CSV with a header row. The label column is chosen by name or by
// zero-based position.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) cells.emplace_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

inline RawData read_csv_raw(std::istream& in, const std::string& label_column = "label") {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::trim(line).empty()) {
      header = detail::split_csv_line(line);
      break;
    }
  }
  if (header.empty()) throw ParseError("empty CSV input");
  std::size_t label_idx = header.size();
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == label_column) label_idx = i;
  if (label_idx == header.size()) {
    std::size_t pos = 0;
    if (std::from_chars(label_column.data(), label_column.data() + label_column.size(), pos).ec == std::errc() &&
        pos < header.size())
      label_idx = pos;
    else
      throw ParseError("label column '" + label_column + "' not found in header", lineno);
  }
  if (header.size() < 2) throw ParseError("CSV needs a label column and at least one feature", lineno);
  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("ragged row: expected " + std::to_string(header.size()) + " cells, got " +
                           std::to_string(cells.size()),
                       lineno);
    std::vector<double> row;
    row.reserve(cells.size() - 1);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i == label_idx) {
        if (cells[i].empty()) throw ParseError("empty label", lineno);
        labels.push_back(cells[i]);
        continue;
      }
      const auto v = detail::parse_double(cells[i]);
      if (!v) throw ParseError("non-numeric cell '" + cells[i] + "'", lineno);
      row.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("CSV has a header but no data rows");
  Matrix a(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(header.size() - 1));
  for (std::size_t m = 0; m < rows.size(); ++m)
    for (std::size_t n = 0; n < rows[m].size(); ++n)
      a(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) = rows[m][n];
  return {FeatureMatrix(std::move(a)), std::move(labels)};
}

inline RawData read_csv_raw(const std::filesystem::path& path, const std::string& label_column = "label") {
  auto in = detail::open_for_read(path);
  return read_csv_raw(in, label_column);
}

inline Dataset read_csv(const std::filesystem::path& path, const std::string& label_column = "label") {
  return make_dataset(read_csv_raw(path, label_column));
}

/// Header "label,f1,...,fN"; label first.
inline void write_csv(std::ostream& out, const Dataset& data) {
  const Matrix a = data.features().to_dense();
  out << "label";
  for (Eigen::Index n = 0; n < a.cols(); ++n) out << ",f" << n + 1;
  out << '\n';
  for (Eigen::Index m = 0; m < a.rows(); ++m) {
    out << label_name(data, data.labels()[static_cast<std::size_t>(m)]);
    for (Eigen::Index n = 0; n < a.cols(); ++n) out << ',' << detail::format_double(a(m, n));
    out << '\n';
  }
}

inline void write_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_csv(out, data);
}

// ---------------------------------------------------------------------------
// Preprocessing.

enum class PreprocessStep { Log2, ZScore };

/// Everything needed to replay a preprocessing pipeline on new data.
struct Preprocessing {
  std::vector<PreprocessStep> steps;
  Eigen::Index input_features = 0;
  std::vector<Eigen::Index> kept_columns;  ///< columns surviving z-scoring (all when no z-score)
  Vector mean, stddev;                     ///< per kept column; empty without z-scoring
  std::vector<std::string> warnings;
};

namespace detail {

inline FeatureMatrix apply_log2(const FeatureMatrix& a) {
  if (a.is_sparse()) {
    const auto& s = *a.sparse();
    if (s.nonZeros() < s.rows() * s.cols()) throw InvalidArgument("log2 needs strictly positive features; found zeros");
  }
  return a.map_values([](double v) {
    if (!(v > 0.0)) throw InvalidArgument("log2 needs strictly positive features; found " + std::to_string(v));
    return std::log2(v);
  });
}

inline Matrix keep_and_scale(const Matrix& a, const Preprocessing& p) {
  Matrix out(a.rows(), static_cast<Eigen::Index>(p.kept_columns.size()));
  for (std::size_t j = 0; j < p.kept_columns.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    out.col(jj) = (a.col(p.kept_columns[j]).array() - p.mean[jj]) / p.stddev[jj];
  }
  return out;
}

inline FeatureMatrix apply_steps(const FeatureMatrix& a, const Preprocessing& p) {
  FeatureMatrix cur = a;
  for (auto step : p.steps) {
    if (step == PreprocessStep::Log2) cur = apply_log2(cur);
    else cur = FeatureMatrix(keep_and_scale(cur.to_dense(), p));
  }
  return cur;
}

}  // namespace detail

/// Fits the pipeline on `data` and returns the transformed set together with
/// the fitted statistics. Z-scoring uses the population standard deviation;
/// constant columns are dropped with a warning.
inline std::pair<Dataset, Preprocessing> preprocess(const Dataset& data, const std::vector<PreprocessStep>& steps) {
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (std::find(steps.begin(), steps.begin() + static_cast<std::ptrdiff_t>(i), steps[i]) != steps.begin() + static_cast<std::ptrdiff_t>(i))
      throw InvalidArgument("preprocessing step listed twice");
  Preprocessing p;
  p.steps = steps;
  p.input_features = data.num_features();
  p.kept_columns.resize(static_cast<std::size_t>(data.num_features()));
  std::iota(p.kept_columns.begin(), p.kept_columns.end(), Eigen::Index{0});
  FeatureMatrix cur = data.features();
  for (auto step : steps) {
    if (step == PreprocessStep::Log2) {
      cur = detail::apply_log2(cur);
      continue;
    }
    const Matrix a = cur.to_dense();
    const Vector mean = a.colwise().mean().transpose();
    const Vector sd = ((a.rowwise() - mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
    std::vector<Eigen::Index> kept;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (sd[j] > 0.0) kept.push_back(j);
      else p.warnings.push_back("dropped constant column " + std::to_string(p.kept_columns[static_cast<std::size_t>(j)] + 1));
    }
    if (kept.empty()) throw InvalidArgument("z-scoring dropped every column");
    Preprocessing local;
    local.kept_columns = kept;
    local.mean.resize(static_cast<Eigen::Index>(kept.size()));
    local.stddev.resize(static_cast<Eigen::Index>(kept.size()));
    std::vector<Eigen::Index> original;
    for (std::size_t j = 0; j < kept.size(); ++j) {
      local.mean[static_cast<Eigen::Index>(j)] = mean[kept[j]];
      local.stddev[static_cast<Eigen::Index>(j)] = sd[kept[j]];
      original.push_back(p.kept_columns[static_cast<std::size_t>(kept[j])]);
    }
    cur = FeatureMatrix(detail::keep_and_scale(a, local));
    p.kept_columns = std::move(original);
    p.mean = std::move(local.mean);
    p.stddev = std::move(local.stddev);
  }
  Dataset out(std::move(cur), data.labels(), data.num_classes());
  if (!data.label_names().empty()) out.set_label_names(data.label_names());
  return {std::move(out), std::move(p)};
}

/// Replays fitted statistics on another feature matrix (e.g. a test split).
inline FeatureMatrix apply_preprocessing(const FeatureMatrix& a, const Preprocessing& p) {
  if (a.cols() != p.input_features) throw DimensionMismatch("feature count differs from the fitted preprocessing");
  return detail::apply_steps(a, p);
}

inline Dataset apply_preprocessing(const Dataset& data, const Preprocessing& p) {
  Dataset out(apply_preprocessing(data.features(), p), data.labels(), data.num_classes());
  if (!data.label_names().empty()) out.set_label_names(data.label_names());
  return out;
}

inline PreprocessStep parse_preprocess_step(std::string_view s) {
  if (s == "log2") return PreprocessStep::Log2;
  if (s == "zscore") return PreprocessStep::ZScore;
  throw InvalidArgument("unknown preprocessing step '" + std::string(s) + "'");
}

inline std::string to_string(PreprocessStep s) { return s == PreprocessStep::Log2 ? "log2" : "zscore"; }

// ---------------------------------------------------------------------------
// Splitting.

struct SplitIndices {
  std::vector<std::size_t> train, test;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t m, std::uint64_t seed) {
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline SplitIndices split_indices(std::size_t m, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InvalidArgument("test fraction must lie in (0, 1)");
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(m)));
  if (n_test < 1 || n_test >= m) throw InvalidArgument("test fraction leaves an empty train or test part");
  auto idx = shuffled_indices(m, seed);
  SplitIndices s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

/// Fold `fold` of `folds`: contiguous blocks of one seeded permutation, so
/// test sets of different folds never overlap and together cover every index.
inline SplitIndices fold_indices(std::size_t m, int folds, int fold, std::uint64_t seed) {
  if (folds < 2) throw InvalidArgument("need at least two folds");
  if (static_cast<std::size_t>(folds) > m) throw InvalidArgument("more folds than samples");
  if (fold < 0 || fold >= folds) throw InvalidArgument("fold index out of range");
  const auto idx = shuffled_indices(m, seed);
  const std::size_t b = m * static_cast<std::size_t>(fold) / static_cast<std::size_t>(folds);
  const std::size_t e = m * static_cast<std::size_t>(fold + 1) / static_cast<std::size_t>(folds);
  SplitIndices s;
  for (std::size_t i = 0; i < m; ++i) (i >= b && i < e ? s.test : s.train).push_back(idx[i]);
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

inline std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed) {
  const auto s = split_indices(static_cast<std::size_t>(data.num_samples()), test_fraction, seed);
  return {data.subset(s.train), data.subset(s.test)};
}

inline std::pair<Dataset, Dataset> split_fold(const Dataset& data, int folds, int fold, std::uint64_t seed) {
  const auto s = fold_indices(static_cast<std::size_t>(data.num_samples()), folds, fold, seed);
  return {data.subset(s.train), data.subset(s.test)};
}

// ---------------------------------------------------------------------------

struct ErrorRate {
  double mean = 0;
  double sd = 0;
};

/// Pooled test error over folds with the binomial standard deviation.
inline ErrorRate error_rate_estimate(std::int64_t total_errors, std::int64_t total_tested) {
  if (total_tested < 1) throw InvalidArgument("error rate needs at least one test sample");
  if (total_errors < 0 || total_errors > total_tested) throw InvalidArgument("error count out of range");
  const double mu = static_cast<double>(total_errors) / static_cast<double>(total_tested);
  return {mu, std::sqrt(mu * (1.0 - mu) / static_cast<double>(total_tested))};
}

inline std::int64_t count_errors(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw DimensionMismatch("prediction count != label count");
  std::int64_t e = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) e += predicted[i] != truth[i] ? 1 : 0;
  return e;
}

// ---------------------------------------------------------------------------
// Weights file:
//
//   shygamp-weights <N> <D>
//   labels <name_1> ... <name_D>
//   preprocess <input_N> <step>...          (optional)
//   columns <c_1> ... <c_N>                 (with preprocess; 0-based)
//   center <m_1> ... <m_N>                  (with zscore)
//   scale <s_1> ... <s_N>                   (with zscore)
//   <N rows of D numbers>

struct WeightsFile {
  WeightMatrix weights;
  std::vector<std::string> label_names;
  std::optional<Preprocessing> preprocessing;
};

inline void write_weights(std::ostream& out, const WeightsFile& w) {
  const Matrix& x = w.weights.weights;
  out << "shygamp-weights " << x.rows() << ' ' << x.cols() << '\n';
  out << "labels";
  for (Eigen::Index d = 0; d < x.cols(); ++d)
    out << ' ' << (w.label_names.empty() ? std::to_string(d + 1) : w.label_names[static_cast<std::size_t>(d)]);
  out << '\n';
  if (w.preprocessing && !w.preprocessing->steps.empty()) {
    const auto& p = *w.preprocessing;
    out << "preprocess " << p.input_features;
    for (auto s : p.steps) out << ' ' << to_string(s);
    out << "\ncolumns";
    for (auto c : p.kept_columns) out << ' ' << c;
    out << '\n';
    if (p.mean.size()) {
      out << "center";
      for (Eigen::Index j = 0; j < p.mean.size(); ++j) out << ' ' << detail::format_double(p.mean[j]);
      out << "\nscale";
      for (Eigen::Index j = 0; j < p.stddev.size(); ++j) out << ' ' << detail::format_double(p.stddev[j]);
      out << '\n';
    }
  }
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    for (Eigen::Index d = 0; d < x.cols(); ++d) out << (d ? " " : "") << detail::format_double(x(n, d));
    out << '\n';
  }
}

inline void write_weights(const std::filesystem::path& path, const WeightsFile& w) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_weights(out, w);
}

inline WeightsFile read_weights(std::istream& in) {
  std::string line, key;
  std::size_t lineno = 0;
  auto next_line = [&]() -> std::istringstream {
    if (!std::getline(in, line)) throw ParseError("weights file truncated", lineno + 1);
    ++lineno;
    return std::istringstream(line);
  };
  WeightsFile w;
  Eigen::Index n = 0, d = 0;
  {
    auto ls = next_line();
    if (!(ls >> key >> n >> d) || key != "shygamp-weights" || n < 1 || d < 2) throw ParseError("bad weights header", lineno);
  }
  {
    auto ls = next_line();
    ls >> key;
    if (key != "labels") throw ParseError("expected labels line", lineno);
    std::string name;
    while (ls >> name) w.label_names.push_back(name);
    if (static_cast<Eigen::Index>(w.label_names.size()) != d) throw ParseError("label count != D", lineno);
  }
  auto ls = next_line();
  std::string first;
  ls >> first;
  if (first == "preprocess") {
    Preprocessing p;
    ls >> p.input_features;
    std::string step;
    while (ls >> step) p.steps.push_back(parse_preprocess_step(step));
    auto cl = next_line();
    cl >> key;
    if (key != "columns") throw ParseError("expected columns line", lineno);
    Eigen::Index c = 0;
    while (cl >> c) p.kept_columns.push_back(c);
    if (static_cast<Eigen::Index>(p.kept_columns.size()) != n) throw ParseError("column count != N", lineno);
    if (std::find(p.steps.begin(), p.steps.end(), PreprocessStep::ZScore) != p.steps.end()) {
      for (auto* target : {&p.mean, &p.stddev}) {
        auto vl = next_line();
        vl >> key;
        target->resize(n);
        for (Eigen::Index j = 0; j < n; ++j)
          if (!(vl >> (*target)[j])) throw ParseError("short " + key + " line", lineno);
      }
    }
    w.preprocessing = std::move(p);
    ls = next_line();
  } else {
    ls = std::istringstream(line);
  }
  w.weights.weights.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (r > 0) ls = next_line();
    for (Eigen::Index c = 0; c < d; ++c) {
      std::string tok;
      if (!(ls >> tok)) throw ParseError("short weights row", lineno);
      const auto v = detail::parse_double(tok);
      if (!v) throw ParseError("bad weight '" + tok + "'", lineno);
      w.weights.weights(r, c) = *v;
    }
  }
  return w;
}

inline WeightsFile read_weights(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  return read_weights(in);
}

}  // namespace shygamp
