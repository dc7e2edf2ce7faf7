#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "crgkd/spectral.hpp"
#include "test_support.hpp"

namespace crgkd {
namespace {

const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

TEST(Laplacian, AllOnesTwoByTwo) {
  const auto lp = degree_and_laplacian(Matrix::Ones(2, 2));
  EXPECT_EQ(lp.degree, Vector::Constant(2, 2.0));
  EXPECT_TRUE(lp.laplacian.isApprox((Matrix(2, 2) << 0.5, -0.5, -0.5, 0.5).finished(), 1e-15));
}

TEST(Laplacian, IdentityAdjacencyGivesZero) {
  EXPECT_TRUE(degree_and_laplacian(Matrix::Identity(4, 4)).laplacian.isZero(0.0));
}

TEST(Laplacian, NonPositiveDegreeRaised) {
  Matrix a(2, 2);
  a << 1, -1, -1, 1;
  try {
    degree_and_laplacian(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonPositiveDegree);
  }
}

TEST(Eigen, HandTwoByTwo) {
  const auto dec = eigendecompose((Matrix(2, 2) << 0.5, -0.5, -0.5, 0.5).finished());
  EXPECT_NEAR(dec.values(0), 0.0, 1e-14);
  EXPECT_NEAR(dec.values(1), 1.0, 1e-14);
  EXPECT_NEAR(dec.basis(0, 0), kInvSqrt2, 1e-14);
  EXPECT_NEAR(dec.basis(1, 0), kInvSqrt2, 1e-14);
  EXPECT_NEAR(dec.basis(0, 1), kInvSqrt2, 1e-14);
  EXPECT_NEAR(dec.basis(1, 1), -kInvSqrt2, 1e-14);
}

TEST(Eigen, ZeroMatrixHasIdentityBasis) {
  const auto dec = eigendecompose(Matrix::Zero(3, 3));
  EXPECT_TRUE(dec.values.isZero(0.0));
  EXPECT_TRUE(dec.basis.isIdentity(0.0));
}

TEST(Embed, HandTwoByTwoTieGoesToRowZero) {
  const auto e = spectral_embedding(Matrix::Ones(2, 2), 1);
  ASSERT_EQ(e.embedding.cols(), 1);
  EXPECT_NEAR(e.embedding(0, 0), 0.70711, 1e-5);
  EXPECT_NEAR(e.embedding(1, 0), -0.70711, 1e-5);
  EXPECT_FALSE(e.degenerate);
}

TEST(Embed, BadN) {
  for (Index n : {Index{0}, Index{4}, Index{-1}}) {
    try {
      spectral_embedding(Matrix::Identity(3, 3) + Matrix::Constant(3, 3, 0.1), n);
      FAIL() << n;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::BadN);
    }
  }
}

TEST(Embed, DegenerateFlag) {
  // Spectrum {0, 1, 1}: both top eigenvalues coincide.
  EXPECT_TRUE(spectral_embedding(Matrix::Ones(3, 3), 1).degenerate);
  Matrix a(3, 3);
  a << 1, 0.9, 0.1, 0.9, 1, 0.3, 0.1, 0.3, 1;
  EXPECT_FALSE(spectral_embedding(a, 1).degenerate);
}

TEST(Embed, SelectionOrder) {
  Matrix a(3, 3);
  a << 1, 0.9, 0.1, 0.9, 1, 0.3, 0.1, 0.3, 1;
  const auto big = spectral_embedding(a, 2, EigenSelection::Largest);
  const auto small = spectral_embedding(a, 2, EigenSelection::Smallest);
  EXPECT_EQ(big.columns, (std::vector<Index>{2, 1}));
  EXPECT_EQ(small.columns, (std::vector<Index>{0, 1}));
  EXPECT_EQ(big.embedding.col(0), big.basis.col(2));
  EXPECT_EQ(small.embedding.col(0), small.basis.col(0));
}

TEST(Embed, DefaultN) {
  EXPECT_EQ(default_n(1), 1);
  EXPECT_EQ(default_n(2), 1);
  EXPECT_EQ(default_n(7), 3);
  EXPECT_EQ(default_n(8), 4);
}

TEST(Spectrum, AllOnesAdjacency) {
  for (Index c = 2; c <= 12; ++c) {
    const auto dec = eigendecompose(degree_and_laplacian(Matrix::Ones(c, c)).laplacian);
    EXPECT_NEAR(dec.values(0), 0.0, 1e-8);
    for (Index k = 1; k < c; ++k) EXPECT_NEAR(dec.values(k), 1.0, 1e-8);
  }
}

TEST(Spectrum, BoundsNullVectorAndReconstruction) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 100; ++t) {
    const auto m = testing::random_map(testing::random_shape(rng, 2, 12, 1, 5), rng, testing::Entries::AbsNormal);
    const auto lp = degree_and_laplacian(build_adjacency(m).adjacency);
    const auto dec = eigendecompose(lp.laplacian);
    EXPECT_GE(dec.values.minCoeff(), -1e-9);
    EXPECT_LE(dec.values.maxCoeff(), 2.0 + 1e-9);
    const Vector expected = lp.degree.cwiseSqrt().normalized();
    EXPECT_LE((dec.basis.col(0) - expected).cwiseAbs().maxCoeff(), 1e-8);
    const Matrix rec = dec.basis * dec.values.asDiagonal() * dec.basis.transpose();
    EXPECT_LE((rec - lp.laplacian).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Spectrum, MatchesJacobiOracle) {
  std::mt19937_64 rng(32);
  for (int t = 0; t < 200; ++t) {
    const Index c = 1 + static_cast<Index>(t % 16);
    const Matrix s = testing::random_symmetric(c, rng);
    const auto dec = eigendecompose(s);
    EXPECT_LE((dec.values - testing::jacobi_eigenvalues(s)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LE((dec.basis.transpose() * dec.basis - Matrix::Identity(c, c)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((dec.basis * dec.values.asDiagonal() * dec.basis.transpose() - s).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Spectrum, SignConventionHolds) {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 100; ++t) {
    const auto dec = eigendecompose(testing::random_symmetric(1 + t % 10, rng));
    for (Index k = 0; k < dec.basis.cols(); ++k) {
      Index arg = 0;
      dec.basis.col(k).cwiseAbs().maxCoeff(&arg);
      EXPECT_GT(dec.basis(arg, k), 0.0);
    }
  }
}

TEST(Spectrum, PermutationEquivariance) {
  std::mt19937_64 rng(34);
  int checked = 0;
  while (checked < 30) {
    const auto m = testing::random_map(testing::random_shape(rng, 3, 8, 1, 4), rng);
    const Index n = default_n(m.channels());
    if (!testing::well_posed(m, n)) continue;
    ++checked;
    const auto perm = testing::random_permutation(m.channels(), rng);
    const Matrix p = testing::permutation_matrix(perm);
    const auto e = spectral_embedding(build_adjacency(m).adjacency, n);
    const auto ep = spectral_embedding(build_adjacency(testing::permute_channels(m, perm)).adjacency, n);
    EXPECT_LE((e.eigenvalues - ep.eigenvalues).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((p * e.embedding - ep.embedding).cwiseAbs().maxCoeff(), 1e-8);
  }
}

}  // namespace
}  // namespace crgkd
