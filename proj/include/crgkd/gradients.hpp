#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "crgkd/losses.hpp"

namespace crgkd {

enum class GradientMode { Analytic, FiniteDifference };

// dL/dF^S for one student map.
struct GradientField {
  FeatureMap values;
  double loss_at_point = 0.0;
  GradientMode mode = GradientMode::Analytic;

  double max_abs() const {
    double m = 0.0;
    for (double v : values.values()) m = std::max(m, std::abs(v));
    return m;
  }
};

namespace backward {

inline FeatureMap as_map(const MapShape& shape, const Eigen::Ref<const RowMatrix>& g) {
  auto out = FeatureMap::zeros(shape);
  out.channel_matrix() = g;
  return out;
}

// Pulls dL/dA (any C x C matrix, entries treated as independent) back to the
// channel vectors.
inline RowMatrix adjacency(const Eigen::Ref<const RowMatrix>& vectors, Matrix d_adj, AdjacencyMode mode) {
  const Index c = vectors.rows();
  if (mode == AdjacencyMode::UnnormalizedGram) {
    return (d_adj + d_adj.transpose()) * vectors;
  }
  Vector norms;
  const RowMatrix unit = normalized_rows(vectors, &norms);
  for (Index k = 0; k < c; ++k) {
    if (norms(k) < kZeroNorm) {
      throw Error(ErrorCode::DegenerateChannel, "student channel " + std::to_string(k) + " has zero norm");
    }
  }
  d_adj.diagonal().setZero();  // A_kk is pinned to 1
  RowMatrix g = (d_adj + d_adj.transpose()) * unit;
  for (Index k = 0; k < c; ++k) {
    const double radial = g.row(k).dot(unit.row(k));
    g.row(k) = (g.row(k) - radial * unit.row(k)) / norms(k);
  }
  return g;
}

// dL/dL^sym -> dL/dA through L^sym = I - D^{-1/2} A D^{-1/2}, D = rowsum(A).
inline Matrix laplacian(const Eigen::Ref<const Matrix>& adj, const Eigen::Ref<const Vector>& degree,
                        const Eigen::Ref<const Matrix>& d_lap) {
  const Vector r = degree.cwiseSqrt().cwiseInverse();
  const Matrix d_w = -0.5 * (d_lap + d_lap.transpose());
  const Matrix p = d_w.cwiseProduct(adj);
  const Vector d_degree = -0.5 * r.array().cube() * ((p + p.transpose()) * r).array();
  Matrix d_adj = r.asDiagonal() * d_w * r.asDiagonal();
  d_adj.colwise() += d_degree;
  return d_adj;
}

// First-order eigenvector perturbation: dL/dS = U K U^T with
// K_ik = (U^T dU)_ik / (lambda_k - lambda_i), i != k. Only columns with a
// nonzero upstream gradient need to be simple eigenvalues.
inline Matrix eigenvectors(const Eigendecomposition& dec, const Eigen::Ref<const Matrix>& d_basis) {
  const Index c = dec.values.size();
  Matrix k = dec.basis.transpose() * d_basis;
  for (Index col = 0; col < c; ++col) {
    if (d_basis.col(col).isZero(0.0)) {
      k.col(col).setZero();
      continue;
    }
    for (Index i = 0; i < c; ++i) {
      k(i, col) = i == col ? 0.0 : k(i, col) / (dec.values(col) - dec.values(i));
    }
  }
  return dec.basis * k * dec.basis.transpose();
}

inline Matrix eigenvalues(const Eigendecomposition& dec, const Eigen::Ref<const Vector>& d_values) {
  return dec.basis * d_values.asDiagonal() * dec.basis.transpose();
}

}  // namespace backward

inline GradientField grad_vertex(const FeatureMap& teacher, const FeatureMap& student, const AttentionMasks& masks,
                                 bool use_spatial = true, bool use_channel = true) {
  require_same_shape(teacher.shape(), student.shape());
  const RowMatrix w = vertex_weights(teacher.shape(), masks, use_spatial, use_channel);
  const RowMatrix diff = teacher.channel_matrix() - student.channel_matrix();
  const double scale = 1.0 / static_cast<double>(teacher.size());
  const RowMatrix g = -2.0 * scale * diff.cwiseProduct(w);
  return {backward::as_map(student.shape(), g), scale * diff.array().square().cwiseProduct(w.array()).sum(),
          GradientMode::Analytic};
}

inline GradientField grad_edge(const Eigen::Ref<const Matrix>& teacher_adj, const FeatureMap& student,
                               const Eigen::Ref<const Matrix>& relation, bool use_relation = true,
                               AdjacencyMode mode = AdjacencyMode::Cosine) {
  const Matrix student_adj = adjacency_from_vectors(student.channel_matrix(), mode);
  require_square_same(teacher_adj, student_adj, relation);
  const auto c2 = static_cast<double>(student_adj.size());
  Matrix d_adj = -(2.0 / c2) * (teacher_adj - student_adj);
  if (use_relation) d_adj = d_adj.cwiseProduct(relation);
  const RowMatrix g = backward::adjacency(student.channel_matrix(), d_adj, mode);
  return {backward::as_map(student.shape(), g), edge_loss(teacher_adj, student_adj, relation, use_relation),
          GradientMode::Analytic};
}

inline GradientField grad_spectral(const SpectralEmbedding& teacher_emb, const FeatureMap& student, Index n,
                                   EigenSelection selection = EigenSelection::Largest,
                                   AdjacencyMode mode = AdjacencyMode::Cosine) {
  const Matrix adj = adjacency_from_vectors(student.channel_matrix(), mode);
  const auto lap = degree_and_laplacian(adj);
  const auto dec = eigendecompose(lap.laplacian);
  const auto emb = embed(dec, n, selection);
  if (emb.degenerate) {
    throw Error(ErrorCode::DegenerateSpectrum, "a selected student eigenvalue is within " +
                                                   std::to_string(kSpectralGap) + " of another");
  }
  const double loss = spectral_loss(teacher_emb, emb);
  const Matrix d_emb = -(2.0 / static_cast<double>(emb.embedding.size())) * (teacher_emb.embedding - emb.embedding);
  // The sign convention is locally constant, so d/dE maps straight onto the
  // canonicalized basis columns.
  Matrix d_basis = Matrix::Zero(dec.basis.rows(), dec.basis.cols());
  for (Index j = 0; j < n; ++j) d_basis.col(emb.columns[static_cast<std::size_t>(j)]) = d_emb.col(j);
  const Matrix d_lap = backward::eigenvectors(dec, d_basis);
  const Matrix d_adj = backward::laplacian(adj, lap.degree, d_lap);
  const RowMatrix g = backward::adjacency(student.channel_matrix(), d_adj, mode);
  return {backward::as_map(student.shape(), g), loss, GradientMode::Analytic};
}

// Gradient of the eigenvalue-spectrum variant of the spectral loss.
inline GradientField grad_spectral_values(const Eigen::Ref<const Vector>& teacher_vals, const FeatureMap& student,
                                          AdjacencyMode mode = AdjacencyMode::Cosine) {
  const Matrix adj = adjacency_from_vectors(student.channel_matrix(), mode);
  const auto lap = degree_and_laplacian(adj);
  const auto dec = eigendecompose(lap.laplacian);
  const double loss = spectral_value_loss_variant(teacher_vals, dec.values);
  const Vector d_vals = -(2.0 / static_cast<double>(dec.values.size())) * (teacher_vals - dec.values);
  const Matrix d_adj = backward::laplacian(adj, lap.degree, backward::eigenvalues(dec, d_vals));
  const RowMatrix g = backward::adjacency(student.channel_matrix(), d_adj, mode);
  return {backward::as_map(student.shape(), g), loss, GradientMode::Analytic};
}

using LossEvaluator = std::function<double(const FeatureMap&)>;

// Central differences with per-entry step h = step * max(1, |x|).
inline GradientField fd_gradient(const LossEvaluator& loss, const FeatureMap& student, double step = 1e-6) {
  if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "finite-difference step must be > 0");
  FeatureMap probe = student;
  auto g = FeatureMap::zeros(student.shape());
  auto x = probe.values();
  for (std::size_t e = 0; e < x.size(); ++e) {
    const double orig = x[e];
    const double h = step * std::max(1.0, std::abs(orig));
    x[e] = orig + h;
    const double up = loss(probe);
    x[e] = orig - h;
    const double down = loss(probe);
    x[e] = orig;
    g.values()[e] = (up - down) / (2.0 * h);
  }
  return {std::move(g), loss(student), GradientMode::FiniteDifference};
}

// ---------------------------------------------------------------------------
// Per-term losses as functions of the student alone, with everything
// teacher-side frozen.

struct TermEvaluators {
  LossEvaluator vertex;
  LossEvaluator edge;
  LossEvaluator spectral;
};

inline TermEvaluators term_evaluators(const FeatureMap& teacher, const PairAnalysis& p, const LossOptions& opt) {
  TermEvaluators t;
  const auto masks = p.masks;
  const Matrix teacher_adj = p.teacher_graph.adjacency;
  t.vertex = [teacher, masks, opt](const FeatureMap& s) {
    return vertex_loss(teacher, s, masks, opt.masks.spatial, opt.masks.channel);
  };
  t.edge = [teacher_adj, masks, opt](const FeatureMap& s) {
    return edge_loss(teacher_adj, adjacency_from_vectors(s.channel_matrix(), opt.adjacency), masks.relation,
                     opt.masks.relation);
  };
  if (p.teacher_embedding) {
    const auto te = *p.teacher_embedding;
    const Index n = p.n;
    t.spectral = [te, n, opt](const FeatureMap& s) {
      const auto se = spectral_embedding(adjacency_from_vectors(s.channel_matrix(), opt.adjacency), n, opt.eigen);
      return opt.spectral_variant == SpectralVariant::Eigenvector
                 ? spectral_loss(te, se)
                 : spectral_value_loss_variant(te.eigenvalues, se.eigenvalues);
    };
  }
  return t;
}

inline GradientField analytic_spectral_term(const PairAnalysis& p, const FeatureMap& student,
                                            const LossOptions& opt) {
  return opt.spectral_variant == SpectralVariant::Eigenvector
             ? grad_spectral(*p.teacher_embedding, student, p.n, opt.eigen, opt.adjacency)
             : grad_spectral_values(p.teacher_embedding->eigenvalues, student, opt.adjacency);
}

struct MultiLevelGradient {
  GradientField total;  // d(alpha L_V + beta L_E + gamma L_S)/dF^S
  LossReport report;
  bool spectral_fd_fallback = false;
};

// Weighted gradient of the enabled terms. A degenerate student spectrum falls
// back to central differences for the spectral term.
inline MultiLevelGradient grad_multi_level(const FeatureMap& teacher, const FeatureMap& student,
                                           const LossOptions& opt) {
  opt.weights.validate();
  const auto p = analyze_pair(teacher, student, opt);
  MultiLevelGradient out;
  out.total.values = FeatureMap::zeros(student.shape());
  auto acc = out.total.values.channel_matrix();
  if (opt.terms.vertex) {
    const auto g = grad_vertex(teacher, student, p.masks, opt.masks.spatial, opt.masks.channel);
    acc += opt.weights.alpha * g.values.channel_matrix();
    out.report.vertex = g.loss_at_point;
  }
  if (opt.terms.edge) {
    const auto g = grad_edge(p.teacher_graph.adjacency, student, p.masks.relation, opt.masks.relation, opt.adjacency);
    acc += opt.weights.beta * g.values.channel_matrix();
    out.report.edge = g.loss_at_point;
  }
  if (opt.terms.spectral) {
    out.report.degenerate_spectrum = p.teacher_embedding->degenerate || p.student_embedding->degenerate;
    GradientField g;
    try {
      g = analytic_spectral_term(p, student, opt);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateSpectrum) throw;
      g = fd_gradient(term_evaluators(teacher, p, opt).spectral, student);
      out.spectral_fd_fallback = true;
    }
    acc += opt.weights.gamma * g.values.channel_matrix();
    out.report.spectral = g.loss_at_point;
  }
  out.report.multi_level = combine(opt.weights, out.report.vertex, out.report.edge, out.report.spectral);
  out.total.loss_at_point = out.report.multi_level;
  out.total.mode = out.spectral_fd_fallback ? GradientMode::FiniteDifference : GradientMode::Analytic;
  return out;
}

// ---------------------------------------------------------------------------
// Certification of the analytic gradients against central differences.

enum class LossTerm { Vertex, Edge, Spectral };

enum class CheckStatus { Checked, SkippedDegenerate, Disabled };

inline std::string_view to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::Checked: return "checked";
    case CheckStatus::SkippedDegenerate: return "skipped_degenerate";
    case CheckStatus::Disabled: return "disabled";
  }
  return "unknown";
}

struct GradientTolerances {
  double vertex = 1e-6;
  double edge = 1e-5;
  double spectral = 1e-4;
};

struct TermCheck {
  CheckStatus status = CheckStatus::Disabled;
  double relative_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return status != CheckStatus::Checked || relative_error <= tolerance; }
};

struct GradientCheckReport {
  TermCheck vertex;
  TermCheck edge;
  TermCheck spectral;

  bool passed() const { return vertex.passed() && edge.passed() && spectral.passed(); }
};

// Test seam: lets callers tamper with an analytic gradient before comparison.
using GradientHook = std::function<void(LossTerm, FeatureMap&)>;

// At a stationary point (analytic gradient below kStationary) the reference is
// pure central-difference noise; discrepancies under kFdNoiseFloor there are
// reported as 0.
inline constexpr double kStationary = 1e-10;
inline constexpr double kFdNoiseFloor = 1e-8;

// ||a - b||_inf / max(||b||_inf, 1e-12)
inline double relative_error(const FeatureMap& analytic, const FeatureMap& reference) {
  double diff = 0.0;
  double ref = 0.0;
  double ana = 0.0;
  for (std::size_t e = 0; e < analytic.values().size(); ++e) {
    diff = std::max(diff, std::abs(analytic.values()[e] - reference.values()[e]));
    ref = std::max(ref, std::abs(reference.values()[e]));
    ana = std::max(ana, std::abs(analytic.values()[e]));
  }
  if (ana <= kStationary && diff <= kFdNoiseFloor) return 0.0;
  return diff / std::max(ref, 1e-12);
}

inline GradientCheckReport check_gradients(const FeatureMap& teacher, const FeatureMap& student,
                                           const LossOptions& opt, const GradientTolerances& tol = {},
                                           const GradientHook& hook = {}, double fd_step = 1e-6) {
  opt.weights.validate();
  const auto p = analyze_pair(teacher, student, opt);
  const auto evals = term_evaluators(teacher, p, opt);
  GradientCheckReport rep;

  auto run = [&](LossTerm term, bool enabled, double weight, double tolerance, const LossEvaluator& eval,
                 const std::function<GradientField()>& analytic) {
    TermCheck t;
    t.tolerance = tolerance;
    if (!enabled) return t;
    GradientField g;
    try {
      g = analytic();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateSpectrum) throw;
      t.status = CheckStatus::SkippedDegenerate;
      return t;
    }
    g.values.channel_matrix() *= weight;
    if (hook) hook(term, g.values);
    const auto weighted = [&](const FeatureMap& s) { return weight * eval(s); };
    const auto fd = fd_gradient(weighted, student, fd_step);
    t.status = CheckStatus::Checked;
    t.relative_error = relative_error(g.values, fd.values);
    return t;
  };

  rep.vertex = run(LossTerm::Vertex, opt.terms.vertex, opt.weights.alpha, tol.vertex, evals.vertex, [&] {
    return grad_vertex(teacher, student, p.masks, opt.masks.spatial, opt.masks.channel);
  });
  rep.edge = run(LossTerm::Edge, opt.terms.edge, opt.weights.beta, tol.edge, evals.edge, [&] {
    return grad_edge(p.teacher_graph.adjacency, student, p.masks.relation, opt.masks.relation, opt.adjacency);
  });
  rep.spectral = run(LossTerm::Spectral, opt.terms.spectral, opt.weights.gamma, tol.spectral, evals.spectral,
                     [&] { return analytic_spectral_term(p, student, opt); });
  return rep;
}

}  // namespace crgkd
