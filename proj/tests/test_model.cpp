#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "shygamp/model.hpp"

using namespace shygamp;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST(Dataset, RejectsBadShapesAndLabels) {
  EXPECT_THROW(Dataset(FeatureMatrix(Matrix(0, 3)), {}, 2), InvalidArgument);
  EXPECT_THROW(Dataset(FeatureMatrix(Matrix::Ones(2, 3)), {0, 1}, 1), InvalidArgument);
  EXPECT_THROW(Dataset(FeatureMatrix(Matrix::Ones(2, 3)), {0}, 2), DimensionMismatch);
  EXPECT_THROW(Dataset(FeatureMatrix(Matrix::Ones(2, 3)), {0, 2}, 2), InvalidArgument);
  EXPECT_THROW(Dataset(FeatureMatrix(Matrix::Ones(2, 3)), {-1, 0}, 2), InvalidArgument);
}

TEST(Dataset, FrobeniusMatchesDirectSum) {
  const Matrix a = random_matrix(17, 9, 3);
  Dataset d(FeatureMatrix(a), std::vector<int>(17, 0), 2);
  double s = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) s += a(i, j) * a(i, j);
  EXPECT_NEAR(d.frobenius_sq(), s, 1e-12 * s);
  Dataset sp(FeatureMatrix(SparseRowMatrix(a.sparseView())), std::vector<int>(17, 1), 2);
  EXPECT_NEAR(sp.frobenius_sq(), s, 1e-12 * s);
}

TEST(FeatureMatrix, DenseAndSparseProductsAgree) {
  Matrix a = random_matrix(12, 7, 5);
  for (Eigen::Index i = 0; i < a.size(); i += 3) a.data()[i] = 0.0;
  const FeatureMatrix dense(a), sparse(SparseRowMatrix(a.sparseView()));
  const Matrix x = random_matrix(7, 3, 6), s = random_matrix(12, 3, 7);
  EXPECT_LT((dense.times(x) - sparse.times(x)).norm(), 1e-12);
  EXPECT_LT((dense.transpose_times(s) - sparse.transpose_times(s)).norm(), 1e-12);
  const std::vector<std::size_t> idx{4, 0, 11};
  EXPECT_EQ(dense.select_rows(idx).to_dense(), sparse.select_rows(idx).to_dense());
  EXPECT_EQ(dense.select_rows(idx).to_dense().row(0), a.row(4));
}

TEST(Predict, ZeroWeightsTieBreaksToFirstClass) {
  WeightMatrix w{Matrix::Zero(5, 4)};
  EXPECT_EQ(predict(w, Vector::Random(5)), 0);
}

TEST(Predict, IdentityWeightsPickTheActiveCoordinate) {
  WeightMatrix w{Matrix::Identity(4, 4)};
  Vector a = Vector::Zero(4);
  a[2] = 1.0;
  EXPECT_EQ(predict(w, a), 2);
}

TEST(Predict, MatchesEnumerationOfInnerProducts) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    WeightMatrix w{random_matrix(6, 4, rng())};
    const Vector a = random_matrix(6, 1, rng());
    int best = 0;
    double best_score = -INFINITY;
    for (int d = 0; d < 4; ++d) {
      double s = 0;
      for (int n = 0; n < 6; ++n) s += w.weights(n, d) * a[n];
      if (s > best_score) best_score = s, best = d;
    }
    EXPECT_EQ(predict(w, a), best);
  }
}

TEST(Predict, DimensionMismatchThrows) {
  WeightMatrix w{Matrix::Zero(5, 3)};
  EXPECT_THROW(predict(w, Vector::Zero(4)), DimensionMismatch);
  EXPECT_THROW(predict_all(w, FeatureMatrix(Matrix::Zero(2, 4))), DimensionMismatch);
}

TEST(Predict, CommonColumnShiftKeepsArgmax) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    WeightMatrix w{random_matrix(5, 3, rng())};
    const Vector a = random_matrix(5, 1, rng());
    WeightMatrix shifted = w;
    shifted.weights.colwise() += random_matrix(5, 1, rng()).col(0);
    EXPECT_EQ(predict(w, a), predict(shifted, a));
  }
}

TEST(Predict, AllRowsAgreesWithSingleRow) {
  const Matrix a = random_matrix(30, 6, 13);
  WeightMatrix w{random_matrix(6, 3, 14)};
  const auto all = predict_all(w, FeatureMatrix(a));
  for (Eigen::Index m = 0; m < a.rows(); ++m) EXPECT_EQ(all[static_cast<std::size_t>(m)], predict(w, a.row(m).transpose()));
}

TEST(Sparsity, L0Examples) {
  EXPECT_EQ(l0(WeightMatrix{Matrix::Zero(3, 3)}), 0);
  Matrix x = Matrix::Zero(3, 3);
  x(1, 2) = -1e-300;
  EXPECT_EQ(l0(WeightMatrix{x}), 1);
}

TEST(Sparsity, K99Examples) {
  Matrix one = Matrix::Zero(4, 3);
  one(2, 1) = 5.0;
  EXPECT_EQ(k99(WeightMatrix{one}), 1);

  for (int nd : {1, 4, 12, 100, 300}) {
    const Matrix eq = Matrix::Constant(nd, 1, 0.7);
    EXPECT_EQ(k99(WeightMatrix{eq}), static_cast<std::int64_t>(std::ceil(0.9801 * nd - 1e-9))) << nd;
  }

  Matrix four(2, 2);
  four << 3, 1, 1, 1;
  EXPECT_EQ(k99(WeightMatrix{four}), 4);
  EXPECT_EQ(oracle::k99_exhaustive(four), 4);

  EXPECT_THROW(k99(WeightMatrix{Matrix::Zero(2, 2)}), InvalidArgument);
}

TEST(Sparsity, K99MatchesExhaustivePrefixCheck) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix x = random_matrix(8, 3, rng());
    x = x.array().cube();  // heavy tails
    EXPECT_EQ(k99(WeightMatrix{x}), oracle::k99_exhaustive(x));
  }
}

TEST(Sparsity, InvariantToScalingAndPermutation) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix x = random_matrix(7, 4, rng());
    for (Eigen::Index i = 0; i < x.size(); i += 4) x.data()[i] = 0.0;
    const auto base = sparsity(WeightMatrix{x});
    EXPECT_EQ(sparsity(WeightMatrix{x * 37.5}).k99, base.k99);
    Eigen::PermutationMatrix<Eigen::Dynamic> pr(7), pc(4);
    pr.setIdentity();
    pc.setIdentity();
    std::shuffle(pr.indices().data(), pr.indices().data() + 7, rng);
    std::shuffle(pc.indices().data(), pc.indices().data() + 4, rng);
    const Matrix permuted = pr * x * pc;
    const auto p = sparsity(WeightMatrix{permuted});
    EXPECT_EQ(p.l0, base.l0);
    EXPECT_EQ(p.k99, base.k99);
    EXPECT_LE(base.k99, base.l0);
    EXPECT_LE(base.l0, x.size());
  }
}
