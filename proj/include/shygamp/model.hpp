#pragma once

// Core data types: feature matrices, labelled datasets, weight matrices,
// prediction and sparsity metrics.
//
// Class labels are 0-based inside the library ({0,...,D-1}); readers remap
// file labels and keep the original values for reporting.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "shygamp/errors.hpp"

namespace shygamp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// M x N feature matrix stored dense or compressed-sparse-row.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(Matrix dense) : storage_(std::move(dense)) { cache_norm(); }  // NOLINT
  FeatureMatrix(SparseRowMatrix sparse) : storage_(std::move(sparse)) {      // NOLINT
    std::get<SparseRowMatrix>(storage_).makeCompressed();
    cache_norm();
  }

  Eigen::Index rows() const {
    return std::visit([](const auto& a) { return a.rows(); }, storage_);
  }
  Eigen::Index cols() const {
    return std::visit([](const auto& a) { return a.cols(); }, storage_);
  }
  bool is_sparse() const { return std::holds_alternative<SparseRowMatrix>(storage_); }

  /// Squared Frobenius norm, cached at construction.
  double frobenius_sq() const { return frobenius_sq_; }

  /// A * X  (M x D)
  Matrix times(const Matrix& x) const {
    return std::visit([&](const auto& a) -> Matrix { return a * x; }, storage_);
  }
  /// A^T * S  (N x D)
  Matrix transpose_times(const Matrix& s) const {
    return std::visit([&](const auto& a) -> Matrix { return a.transpose() * s; }, storage_);
  }

  Vector row(Eigen::Index m) const {
    return std::visit([&](const auto& a) -> Vector { return a.row(m).transpose(); }, storage_);
  }

  Matrix to_dense() const {
    return std::visit([](const auto& a) -> Matrix { return Matrix(a); }, storage_);
  }

  const Matrix* dense() const { return std::get_if<Matrix>(&storage_); }
  const SparseRowMatrix* sparse() const { return std::get_if<SparseRowMatrix>(&storage_); }

  /// Rows selected by index, in the given order; storage kind preserved.
  FeatureMatrix select_rows(std::span<const std::size_t> idx) const {
    if (const auto* d = dense()) {
      Matrix out(static_cast<Eigen::Index>(idx.size()), d->cols());
      for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = d->row(idx[i]);
      return FeatureMatrix(std::move(out));
    }
    const auto& s = *sparse();
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (SparseRowMatrix::InnerIterator it(s, static_cast<Eigen::Index>(idx[i])); it; ++it)
        trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col()), it.value());
    }
    SparseRowMatrix out(static_cast<Eigen::Index>(idx.size()), s.cols());
    out.setFromTriplets(trips.begin(), trips.end());
    return FeatureMatrix(std::move(out));
  }

  /// Applies f to every stored entry. Sparse storage only visits nonzeros.
  FeatureMatrix map_values(const std::function<double(double)>& f) const {
    if (const auto* d = dense()) return FeatureMatrix(Matrix(d->unaryExpr(f)));
    SparseRowMatrix s = *sparse();
    for (Eigen::Index k = 0; k < s.nonZeros(); ++k) s.valuePtr()[k] = f(s.valuePtr()[k]);
    return FeatureMatrix(std::move(s));
  }

 private:
  void cache_norm() {
    frobenius_sq_ = std::visit([](const auto& a) { return a.squaredNorm(); }, storage_);
  }

  std::variant<Matrix, SparseRowMatrix> storage_{Matrix()};
  double frobenius_sq_ = 0.0;
};

/// Labelled training data. Invariants are checked at construction.
class Dataset {
 public:
  Dataset(FeatureMatrix features, std::vector<int> labels, int num_classes)
      : features_(std::move(features)), labels_(std::move(labels)), num_classes_(num_classes) {
    if (features_.rows() < 1 || features_.cols() < 1)
      throw InvalidArgument("dataset needs at least one sample and one feature");
    if (num_classes_ < 2) throw InvalidArgument("dataset needs at least two classes");
    if (static_cast<Eigen::Index>(labels_.size()) != features_.rows())
      throw DimensionMismatch("label count " + std::to_string(labels_.size()) + " != sample count " +
                              std::to_string(features_.rows()));
    for (int y : labels_)
      if (y < 0 || y >= num_classes_) throw InvalidArgument("label out of range: " + std::to_string(y));
  }

  const FeatureMatrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }
  int num_classes() const { return num_classes_; }
  Eigen::Index num_samples() const { return features_.rows(); }
  Eigen::Index num_features() const { return features_.cols(); }
  double frobenius_sq() const { return features_.frobenius_sq(); }

  /// Original label value for each internal class index (identity when unset).
  const std::vector<std::string>& label_names() const { return label_names_; }
  void set_label_names(std::vector<std::string> names) {
    if (static_cast<int>(names.size()) != num_classes_) throw DimensionMismatch("label name count");
    label_names_ = std::move(names);
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    std::vector<int> lab;
    lab.reserve(idx.size());
    for (auto i : idx) lab.push_back(labels_[i]);
    Dataset out(features_.select_rows(idx), std::move(lab), num_classes_);
    out.label_names_ = label_names_;
    return out;
  }

 private:
  FeatureMatrix features_;
  std::vector<int> labels_;
  int num_classes_;
  std::vector<std::string> label_names_;
};

/// N x D classifier weights.
struct WeightMatrix {
  Matrix weights;

  Eigen::Index num_features() const { return weights.rows(); }
  int num_classes() const { return static_cast<int>(weights.cols()); }
};

/// argmax_d [X^T a]_d, ties to the smallest index.
inline int predict(const WeightMatrix& w, const Eigen::Ref<const Vector>& features) {
  if (features.size() != w.weights.rows())
    throw DimensionMismatch("feature length " + std::to_string(features.size()) + " != weight rows " +
                            std::to_string(w.weights.rows()));
  const Vector scores = w.weights.transpose() * features;
  int best = 0;
  for (int d = 1; d < scores.size(); ++d)
    if (scores[d] > scores[best]) best = d;
  return best;
}

/// Predicted class for every row of the feature matrix.
inline std::vector<int> predict_all(const WeightMatrix& w, const FeatureMatrix& a) {
  if (a.cols() != w.weights.rows()) throw DimensionMismatch("feature count does not match weights");
  const Matrix scores = a.times(w.weights);
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index m = 0; m < scores.rows(); ++m) {
    Eigen::Index best = 0;
    for (Eigen::Index d = 1; d < scores.cols(); ++d)
      if (scores(m, d) > scores(m, best)) best = d;
    out[static_cast<std::size_t>(m)] = static_cast<int>(best);
  }
  return out;
}

/// Number of entries that are not exactly zero.
inline std::int64_t l0(const WeightMatrix& w) {
  return static_cast<std::int64_t>((w.weights.array() != 0.0).count());
}

/// Smallest k whose top-k magnitudes carry 99% of the Frobenius norm.
inline std::int64_t k99(const WeightMatrix& w) {
  const double total = w.weights.squaredNorm();
  if (!(total > 0.0)) throw InvalidArgument("k99 is undefined for an all-zero weight matrix");
  std::vector<double> sq(static_cast<std::size_t>(w.weights.size()));
  for (Eigen::Index i = 0; i < w.weights.size(); ++i) sq[static_cast<std::size_t>(i)] = w.weights.data()[i] * w.weights.data()[i];
  std::sort(sq.begin(), sq.end(), std::greater<>());
  // sqrt(partial) >= 0.99 sqrt(total)  <=>  partial >= 0.9801 total
  const double target = 0.9801 * total;
  double partial = 0.0;
  for (std::size_t k = 0; k < sq.size(); ++k) {
    partial += sq[k];
    if (partial >= target * (1.0 - 1e-12)) return static_cast<std::int64_t>(k + 1);
  }
  return static_cast<std::int64_t>(sq.size());
}

struct SparsityReport {
  std::int64_t l0 = 0;
  std::int64_t k99 = 0;
};

inline SparsityReport sparsity(const WeightMatrix& w) {
  SparsityReport r;
  r.l0 = l0(w);
  r.k99 = r.l0 > 0 ? k99(w) : 0;
  return r;
}

}  // namespace shygamp
