#pragma once

#include <Eigen/Core>

#include <cmath>

#include "crgkd/crg.hpp"

namespace crgkd {

enum class RelationSoftmax { Global, Row };

// Teacher-derived weights for the vertex (spatial, channel) and edge
// (relation) losses.
struct AttentionMasks {
  Matrix spatial;   // H x W, sums to H*W
  Vector channel;   // C, sums to C
  Matrix relation;  // C x C, sums to 1 (global) or each row to 1 (row)
};

// Max-shifted softmax over all entries of `scores`.
template <typename Derived>
typename Derived::PlainObject stable_softmax(const Eigen::DenseBase<Derived>& scores) {
  typename Derived::PlainObject out = scores.derived();
  const double shift = out.maxCoeff();
  out = (out.array() - shift).exp();
  out /= out.sum();
  return out;
}

// Mean of |F| over channels, H x W.
inline Matrix spatial_scores(const FeatureMap& teacher) {
  Matrix m = Matrix::Zero(teacher.height(), teacher.width());
  for (Index k = 0; k < teacher.channels(); ++k) {
    for (Index i = 0; i < teacher.height(); ++i) {
      for (Index j = 0; j < teacher.width(); ++j) m(i, j) += std::abs(teacher(k, i, j));
    }
  }
  return m / static_cast<double>(teacher.channels());
}

// Mean of |F| over spatial positions, length C.
inline Vector channel_scores(const FeatureMap& teacher) {
  return teacher.channel_matrix().cwiseAbs().rowwise().mean();
}

inline Matrix spatial_mask(const FeatureMap& teacher) {
  return static_cast<double>(teacher.spatial_size()) * stable_softmax(spatial_scores(teacher));
}

inline Vector channel_mask(const FeatureMap& teacher) {
  return static_cast<double>(teacher.channels()) * stable_softmax(channel_scores(teacher));
}

inline Matrix relation_mask(const Eigen::Ref<const Matrix>& teacher_adjacency,
                            RelationSoftmax axis = RelationSoftmax::Global) {
  if (teacher_adjacency.rows() != teacher_adjacency.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "relation mask needs a square adjacency, got " +
                                                  std::to_string(teacher_adjacency.rows()) + "x" +
                                                  std::to_string(teacher_adjacency.cols()));
  }
  const Matrix mag = teacher_adjacency.cwiseAbs();
  if (axis == RelationSoftmax::Global) return stable_softmax(mag);
  Matrix out(mag.rows(), mag.cols());
  for (Index r = 0; r < mag.rows(); ++r) out.row(r) = stable_softmax(mag.row(r));
  return out;
}

inline AttentionMasks compute_masks(const FeatureMap& teacher, const Eigen::Ref<const Matrix>& teacher_adjacency,
                                    RelationSoftmax axis = RelationSoftmax::Global) {
  return {spatial_mask(teacher), channel_mask(teacher), relation_mask(teacher_adjacency, axis)};
}

}  // namespace crgkd
