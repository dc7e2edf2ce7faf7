#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crgkd/attention.hpp"
#include "crgkd/crg.hpp"
#include "crgkd/spectral.hpp"
#include "crgkd/tensor_io.hpp"

namespace crgkd {

struct LossWeights {
  double alpha = 1.0;  // vertex
  double beta = 1.0;   // edge
  double gamma = 1.0;  // spectral

  void validate() const {
    for (double w : {alpha, beta, gamma}) {
      if (!std::isfinite(w) || w < 0.0) {
        throw Error(ErrorCode::InvalidArgument, "loss weights must be finite and >= 0");
      }
    }
  }
};

struct LossToggles {
  bool vertex = true;
  bool edge = true;
  bool spectral = true;
};

struct MaskToggles {
  bool spatial = true;
  bool channel = true;
  bool relation = true;
};

enum class SpectralVariant {
  Eigenvector,  // compare top-N embeddings
  Eigenvalue,   // compare full ascending spectra
};

struct LossOptions {
  LossWeights weights;
  LossToggles terms;
  MaskToggles masks;
  Index n = 0;  // selected eigenvectors; 0 picks default_n(C)
  AdjacencyMode adjacency = AdjacencyMode::Cosine;
  RelationSoftmax relation_softmax = RelationSoftmax::Global;
  EigenSelection eigen = EigenSelection::Largest;
  SpectralVariant spectral_variant = SpectralVariant::Eigenvector;

  Index resolved_n(Index channels) const { return n == 0 ? default_n(channels) : n; }
};

struct LossReport {
  double vertex = 0.0;
  double edge = 0.0;
  double spectral = 0.0;
  double multi_level = 0.0;
  bool degenerate_spectrum = false;
};

// Pointwise (1x1) channel projection applied to the student before alignment.
struct ChannelAdapter {
  Matrix weights;  // C_out x C_in
  Vector bias;     // C_out, empty means zero

  explicit ChannelAdapter(Matrix w, Vector b = {}) : weights(std::move(w)), bias(std::move(b)) {
    if (bias.size() != 0 && bias.size() != weights.rows()) {
      throw Error(ErrorCode::ShapeMismatch, "adapter bias length must equal C_out");
    }
    if (!weights.allFinite() || !bias.allFinite()) {
      throw Error(ErrorCode::InvalidArgument, "adapter parameters must be finite");
    }
  }
};

inline FeatureMap apply_adapter(const FeatureMap& student, const ChannelAdapter& adapter) {
  if (adapter.weights.cols() != student.channels()) {
    throw Error(ErrorCode::ShapeMismatch, "adapter expects " + std::to_string(adapter.weights.cols()) +
                                              " input channels, student has " + std::to_string(student.channels()));
  }
  auto out = FeatureMap::zeros({adapter.weights.rows(), student.height(), student.width()});
  auto dst = out.channel_matrix();
  dst.noalias() = adapter.weights * student.channel_matrix();
  if (adapter.bias.size() != 0) dst.colwise() += adapter.bias;
  return out;
}

inline void require_same_shape(const MapShape& a, const MapShape& b) {
  if (a != b) {
    throw Error(ErrorCode::ShapeMismatch, "teacher shape " + to_string(a) + " vs student shape " + to_string(b) +
                                              " (apply a channel adapter first when C differs)");
  }
}

inline void require_square_same(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b,
                                const Eigen::Ref<const Matrix>& m) {
  const Index c = a.rows();
  for (const auto* x : {&a, &b, &m}) {
    if (x->rows() != c || x->cols() != c) throw Error(ErrorCode::ShapeMismatch, "edge loss inputs must all be CxC");
  }
}

// Per-entry weight M^s_ij * M^c_k as a C x (H*W) matrix; disabled masks are ones.
inline RowMatrix vertex_weights(const MapShape& shape, const AttentionMasks& masks, bool use_spatial,
                                bool use_channel) {
  RowMatrix w = RowMatrix::Ones(shape.channels, shape.height * shape.width);
  if (use_spatial) {
    if (masks.spatial.rows() != shape.height || masks.spatial.cols() != shape.width) {
      throw Error(ErrorCode::ShapeMismatch, "spatial mask does not match H x W");
    }
    const RowMatrix s = masks.spatial;  // row-major flatten matches vec()
    const Eigen::Map<const Eigen::RowVectorXd> flat(s.data(), s.size());
    w.array().rowwise() *= flat.array();
  }
  if (use_channel) {
    if (masks.channel.size() != shape.channels) throw Error(ErrorCode::ShapeMismatch, "channel mask length != C");
    w.array().colwise() *= masks.channel.array();
  }
  return w;
}

inline double vertex_loss(const FeatureMap& teacher, const FeatureMap& student, const AttentionMasks& masks,
                          bool use_spatial = true, bool use_channel = true) {
  require_same_shape(teacher.shape(), student.shape());
  const RowMatrix w = vertex_weights(teacher.shape(), masks, use_spatial, use_channel);
  const RowMatrix diff = teacher.channel_matrix() - student.channel_matrix();
  return (diff.array().square() * w.array()).sum() / static_cast<double>(teacher.size());
}

inline double edge_loss(const Eigen::Ref<const Matrix>& teacher_adj, const Eigen::Ref<const Matrix>& student_adj,
                        const Eigen::Ref<const Matrix>& relation, bool use_relation = true) {
  require_square_same(teacher_adj, student_adj, relation);
  const auto c2 = static_cast<double>(teacher_adj.size());
  const auto sq = (teacher_adj - student_adj).array().square();
  return (use_relation ? (sq * relation.array()).sum() : sq.sum()) / c2;
}

inline double spectral_loss(const SpectralEmbedding& teacher, const SpectralEmbedding& student) {
  if (teacher.embedding.rows() != student.embedding.rows() || teacher.embedding.cols() != student.embedding.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "spectral embeddings differ in C or N");
  }
  return (teacher.embedding - student.embedding).squaredNorm() / static_cast<double>(teacher.embedding.size());
}

inline double spectral_value_loss_variant(const Eigen::Ref<const Vector>& teacher_vals,
                                          const Eigen::Ref<const Vector>& student_vals) {
  if (teacher_vals.size() != student_vals.size() || teacher_vals.size() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "eigenvalue vectors must share a non-zero length");
  }
  return (teacher_vals - student_vals).squaredNorm() / static_cast<double>(teacher_vals.size());
}

// Everything the forward pass derives from one teacher/student pair. The
// gradient routines reuse it.
struct PairAnalysis {
  ChannelGraph teacher_graph;
  ChannelGraph student_graph;
  AttentionMasks masks;
  std::optional<SpectralEmbedding> teacher_embedding;
  std::optional<SpectralEmbedding> student_embedding;
  Index n = 0;
};

inline PairAnalysis analyze_pair(const FeatureMap& teacher, const FeatureMap& student, const LossOptions& opt) {
  require_same_shape(teacher.shape(), student.shape());
  PairAnalysis p;
  p.teacher_graph = build_adjacency(teacher, opt.adjacency);
  p.student_graph = build_adjacency(student, opt.adjacency);
  p.masks = compute_masks(teacher, p.teacher_graph.adjacency, opt.relation_softmax);
  p.n = opt.resolved_n(teacher.channels());
  if (opt.terms.spectral) {
    p.teacher_embedding = spectral_embedding(p.teacher_graph.adjacency, p.n, opt.eigen);
    p.student_embedding = spectral_embedding(p.student_graph.adjacency, p.n, opt.eigen);
  }
  return p;
}

// L_M = alpha L_V + beta L_E + gamma L_S
inline double combine(const LossWeights& w, double vertex, double edge, double spectral) {
  return w.alpha * vertex + w.beta * edge + w.gamma * spectral;
}

inline LossReport multi_level_loss(const FeatureMap& teacher, const FeatureMap& student, const LossOptions& opt) {
  opt.weights.validate();
  const auto p = analyze_pair(teacher, student, opt);
  LossReport r;
  if (opt.terms.vertex) r.vertex = vertex_loss(teacher, student, p.masks, opt.masks.spatial, opt.masks.channel);
  if (opt.terms.edge) {
    r.edge = edge_loss(p.teacher_graph.adjacency, p.student_graph.adjacency, p.masks.relation, opt.masks.relation);
  }
  if (opt.terms.spectral) {
    const auto& te = *p.teacher_embedding;
    const auto& se = *p.student_embedding;
    r.spectral = opt.spectral_variant == SpectralVariant::Eigenvector
                     ? spectral_loss(te, se)
                     : spectral_value_loss_variant(te.eigenvalues, se.eigenvalues);
    r.degenerate_spectrum = te.degenerate || se.degenerate;
  }
  r.multi_level = combine(opt.weights, r.vertex, r.edge, r.spectral);
  return r;
}

// Left-to-right mean of per-sample (or per-layer) reports.
inline LossReport mean_report(std::span<const LossReport> reports) {
  LossReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.vertex += r.vertex;
    m.edge += r.edge;
    m.spectral += r.spectral;
    m.multi_level += r.multi_level;
    m.degenerate_spectrum = m.degenerate_spectrum || r.degenerate_spectrum;
  }
  const auto n = static_cast<double>(reports.size());
  m.vertex /= n;
  m.edge /= n;
  m.spectral /= n;
  m.multi_level /= n;
  return m;
}

// Left-to-right sum, e.g. over distilled layers.
inline LossReport total_report(std::span<const LossReport> reports) {
  LossReport t;
  for (const auto& r : reports) {
    t.vertex += r.vertex;
    t.edge += r.edge;
    t.spectral += r.spectral;
    t.multi_level += r.multi_level;
    t.degenerate_spectrum = t.degenerate_spectrum || r.degenerate_spectrum;
  }
  return t;
}

}  // namespace crgkd
