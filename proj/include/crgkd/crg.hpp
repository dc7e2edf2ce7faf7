#pragma once

#include <Eigen/Core>

#include "crgkd/tensor_io.hpp"

namespace crgkd {

// Channel norms below this are treated as zero (isolated vertex).
inline constexpr double kZeroNorm = 1e-12;

enum class AdjacencyMode {
  Cosine,            // A_ij = <v_i, v_j> / (|v_i| |v_j|)
  UnnormalizedGram,  // A = V V^T, the literal pipeline-listing form
};

// Channels relational graph of one feature map.
struct ChannelGraph {
  RowMatrix channel_vectors;  // C x (H*W)
  Matrix adjacency;           // C x C, exactly symmetric
  MapShape source_shape;
  AdjacencyMode mode = AdjacencyMode::Cosine;
};

inline RowMatrix vectorize_channels(const FeatureMap& map) { return map.channel_matrix(); }

// Rows scaled to unit length; zero-norm rows stay zero.
inline RowMatrix normalized_rows(const Eigen::Ref<const RowMatrix>& v, Vector* norms = nullptr) {
  RowMatrix n = v;
  Vector r = v.rowwise().norm();
  for (Index k = 0; k < n.rows(); ++k) {
    if (r(k) >= kZeroNorm) n.row(k) /= r(k);
    else n.row(k).setZero();
  }
  if (norms) *norms = std::move(r);
  return n;
}

inline Matrix adjacency_from_vectors(const Eigen::Ref<const RowMatrix>& v,
                                     AdjacencyMode mode = AdjacencyMode::Cosine) {
  const Index c = v.rows();
  Matrix a(c, c);
  if (mode == AdjacencyMode::UnnormalizedGram) {
    a.noalias() = v * v.transpose();
  } else {
    Vector norms;
    const RowMatrix n = normalized_rows(v, &norms);
    a.noalias() = n * n.transpose();
    for (Index k = 0; k < c; ++k) {
      // Unit diagonal for every channel; a zero-norm row already has zero
      // off-diagonal entries.
      a(k, k) = 1.0;
    }
  }
  // One value per unordered pair.
  for (Index j = 0; j < c; ++j) {
    for (Index i = j + 1; i < c; ++i) a(i, j) = a(j, i);
  }
  return a;
}

inline ChannelGraph build_adjacency(const FeatureMap& map, AdjacencyMode mode = AdjacencyMode::Cosine) {
  ChannelGraph g;
  g.channel_vectors = vectorize_channels(map);
  g.adjacency = adjacency_from_vectors(g.channel_vectors, mode);
  g.source_shape = map.shape();
  g.mode = mode;
  return g;
}

}  // namespace crgkd
