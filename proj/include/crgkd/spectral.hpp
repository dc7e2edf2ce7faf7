#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "crgkd/error.hpp"
#include "crgkd/tensor_io.hpp"

namespace crgkd {

// Eigenvalues closer than this are treated as repeated.
inline constexpr double kSpectralGap = 1e-6;
// Eigenvector entries whose magnitudes differ by less than this count as tied
// for sign canonicalization.
inline constexpr double kSignTie = 1e-12;

enum class EigenSelection { Largest, Smallest };

struct LaplacianPair {
  Vector degree;     // D_ii = sum_j A_ij
  Matrix laplacian;  // I - D^{-1/2} A D^{-1/2}
};

struct Eigendecomposition {
  Vector values;  // ascending
  Matrix basis;   // orthonormal columns, sign-canonicalized
};

struct SpectralEmbedding {
  Vector eigenvalues;              // ascending, all C
  Matrix basis;                    // C x C
  Matrix embedding;                // C x N, columns by descending eigenvalue (Largest)
  std::vector<Index> columns;      // basis column feeding each embedding column
  Index n_selected = 0;
  EigenSelection selection = EigenSelection::Largest;
  bool degenerate = false;         // a selected eigenvalue is within kSpectralGap of another
};

inline LaplacianPair degree_and_laplacian(const Eigen::Ref<const Matrix>& adjacency) {
  if (adjacency.rows() != adjacency.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "adjacency must be square");
  }
  const Index c = adjacency.rows();
  LaplacianPair out;
  out.degree = adjacency.rowwise().sum();
  Vector inv_sqrt(c);
  for (Index i = 0; i < c; ++i) {
    if (!(out.degree(i) > 1e-12)) {
      throw Error(ErrorCode::NonPositiveDegree,
                  "row " + std::to_string(i) + " of the adjacency sums to " + std::to_string(out.degree(i)));
    }
    inv_sqrt(i) = 1.0 / std::sqrt(out.degree(i));
  }
  out.laplacian.resize(c, c);
  for (Index j = 0; j < c; ++j) {
    for (Index i = 0; i <= j; ++i) {
      const double w = inv_sqrt(i) * adjacency(i, j) * inv_sqrt(j);
      out.laplacian(i, j) = (i == j ? 1.0 : 0.0) - w;
      out.laplacian(j, i) = out.laplacian(i, j);
    }
  }
  return out;
}

// Flip `v` so its largest-magnitude entry is positive; near-ties go to the
// lowest row index.
template <typename Derived>
void canonicalize_sign(const Eigen::MatrixBase<Derived>& column) {
  auto& v = const_cast<Eigen::MatrixBase<Derived>&>(column);
  const double peak = v.cwiseAbs().maxCoeff();
  for (Index r = 0; r < v.size(); ++r) {
    if (std::abs(v(r)) >= peak - kSignTie) {
      if (v(r) < 0) v = -v;
      return;
    }
  }
}

inline Eigendecomposition eigendecompose(const Eigen::Ref<const Matrix>& symmetric) {
  if (symmetric.rows() != symmetric.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "eigendecomposition needs a square matrix");
  }
  const Matrix sym = 0.5 * (symmetric + symmetric.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    // Eigen's tridiagonal QR gives up after 30 sweeps per row.
    const auto budget = static_cast<std::size_t>(30 * sym.rows());
    throw Error(ErrorCode::ConvergenceFailure,
                "symmetric eigensolver did not converge within " + std::to_string(budget) + " iterations", budget);
  }
  Eigendecomposition out{solver.eigenvalues(), solver.eigenvectors()};
  for (Index k = 0; k < out.basis.cols(); ++k) canonicalize_sign(out.basis.col(k));
  return out;
}

// Smallest distance from eigenvalue `k` to any other eigenvalue.
inline double isolation_gap(const Vector& values, Index k) {
  double gap = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < values.size(); ++i) {
    if (i != k) gap = std::min(gap, std::abs(values(k) - values(i)));
  }
  return gap;
}

inline std::vector<Index> selected_columns(Index c, Index n, EigenSelection selection) {
  std::vector<Index> cols;
  cols.reserve(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) cols.push_back(selection == EigenSelection::Largest ? c - 1 - j : j);
  return cols;
}

inline SpectralEmbedding embed(const Eigendecomposition& dec, Index n,
                               EigenSelection selection = EigenSelection::Largest) {
  const Index c = dec.values.size();
  if (n < 1 || n > c) {
    throw Error(ErrorCode::BadN, "N = " + std::to_string(n) + " outside [1, " + std::to_string(c) + "]");
  }
  SpectralEmbedding e;
  e.eigenvalues = dec.values;
  e.basis = dec.basis;
  e.n_selected = n;
  e.selection = selection;
  e.columns = selected_columns(c, n, selection);
  e.embedding.resize(c, n);
  for (Index j = 0; j < n; ++j) {
    const Index col = e.columns[static_cast<std::size_t>(j)];
    e.embedding.col(j) = dec.basis.col(col);
    if (isolation_gap(dec.values, col) < kSpectralGap) e.degenerate = true;
  }
  return e;
}

// Default N: floor(C/2), at least 1.
inline Index default_n(Index channels) { return std::max<Index>(1, channels / 2); }

inline SpectralEmbedding spectral_embedding(const Eigen::Ref<const Matrix>& adjacency, Index n,
                                            EigenSelection selection = EigenSelection::Largest) {
  return embed(eigendecompose(degree_and_laplacian(adjacency).laplacian), n, selection);
}

}  // namespace crgkd
