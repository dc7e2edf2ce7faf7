#include <gtest/gtest.h>

#include <random>

#include "crgkd/gradients.hpp"
#include "test_support.hpp"

namespace crgkd {
namespace {

using testing::max_abs;

TEST(Gradients, VertexSingleton) {
  const FeatureMap t(1, 1, 1, {2.0});
  const FeatureMap s(1, 1, 1, {0.0});
  const auto p = analyze_pair(t, s, {});
  const auto g = grad_vertex(t, s, p.masks);
  EXPECT_EQ(g.values(0, 0, 0), -4.0);
  EXPECT_EQ(g.loss_at_point, 4.0);
  const auto fd = fd_gradient([&](const FeatureMap& x) { return vertex_loss(t, x, p.masks); }, s);
  EXPECT_NEAR(fd.values(0, 0, 0), -4.0, 1e-8);
  EXPECT_EQ(fd.mode, GradientMode::FiniteDifference);
}

TEST(FiniteDifference, ExactOnQuadratic) {
  const FeatureMap ones(2, 3, 2, std::vector<double>(12, 1.0));
  const auto g = fd_gradient([](const FeatureMap& x) { return x.channel_matrix().squaredNorm(); }, ones);
  for (double v : g.values.values()) EXPECT_NEAR(v, 2.0, 1e-9);
}

TEST(FiniteDifference, ZeroOnConstant) {
  const FeatureMap ones(2, 1, 2, std::vector<double>(4, 1.0));
  EXPECT_EQ(max_abs(fd_gradient([](const FeatureMap&) { return 3.0; }, ones).values), 0.0);
  EXPECT_THROW(fd_gradient([](const FeatureMap&) { return 3.0; }, ones, 0.0), Error);
}

TEST(Gradients, EdgeZeroNormStudentChannel) {
  const FeatureMap t(2, 1, 2, {1, 0, 1, 1});
  const FeatureMap s(2, 1, 2, {0, 0, 1, 1});
  try {
    grad_edge(build_adjacency(t).adjacency, s, Matrix::Constant(2, 2, 0.25));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateChannel);
  }
}

TEST(Gradients, RadialComponentVanishes) {
  std::mt19937_64 rng(50);
  for (int t = 0; t < 30; ++t) {
    const auto inst = testing::well_posed_instance(rng);
    const auto p = analyze_pair(inst.teacher, inst.student, {});
    const auto ge = grad_edge(p.teacher_graph.adjacency, inst.student, p.masks.relation);
    const auto gs = grad_spectral(*p.teacher_embedding, inst.student, p.n);
    const RowMatrix v = inst.student.channel_matrix();
    for (Index k = 0; k < v.rows(); ++k) {
      EXPECT_LE(std::abs(ge.values.channel_matrix().row(k).dot(v.row(k))), 1e-8);
      EXPECT_LE(std::abs(gs.values.channel_matrix().row(k).dot(v.row(k))), 1e-6);
    }
  }
}

TEST(Gradients, MultiLevelIsWeightedSum) {
  std::mt19937_64 rng(51);
  const auto inst = testing::well_posed_instance(rng);
  LossOptions o;
  o.weights = {0.3, 2.0, 5.0};
  const auto p = analyze_pair(inst.teacher, inst.student, o);
  const auto total = grad_multi_level(inst.teacher, inst.student, o);
  const RowMatrix expected =
      0.3 * grad_vertex(inst.teacher, inst.student, p.masks).values.channel_matrix() +
      2.0 * grad_edge(p.teacher_graph.adjacency, inst.student, p.masks.relation).values.channel_matrix() +
      5.0 * grad_spectral(*p.teacher_embedding, inst.student, p.n).values.channel_matrix();
  EXPECT_LE((total.total.values.channel_matrix() - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_FALSE(total.spectral_fd_fallback);
  EXPECT_NEAR(total.report.multi_level, multi_level_loss(inst.teacher, inst.student, o).multi_level, 1e-14);
}

TEST(Gradients, FixedPoint) {
  std::mt19937_64 rng(52);
  for (int t = 0; t < 20; ++t) {
    const auto inst = testing::well_posed_instance(rng);
    const auto g = grad_multi_level(inst.teacher, inst.teacher, {});
    EXPECT_LE(max_abs(g.total.values), 1e-10);
    const auto rep = check_gradients(inst.teacher, inst.teacher, {});
    EXPECT_TRUE(rep.passed());
    EXPECT_EQ(rep.vertex.relative_error, 0.0);
    EXPECT_EQ(rep.edge.relative_error, 0.0);
    EXPECT_EQ(rep.spectral.relative_error, 0.0);
  }
}

TEST(Gradients, DegenerateSpectrumIsSkippedNotFailed) {
  // Three identical channels: spectrum {0, 1, 1}.
  const FeatureMap s(3, 1, 2, {1, 2, 1, 2, 1, 2});
  const FeatureMap t(3, 1, 2, {1, 2, 2, 1, 1, 1});
  EXPECT_THROW(grad_spectral(spectral_embedding(build_adjacency(t).adjacency, 1), s, 1), Error);
  LossOptions o;
  o.n = 1;
  const auto rep = check_gradients(t, s, o);
  EXPECT_EQ(rep.spectral.status, CheckStatus::SkippedDegenerate);
  EXPECT_TRUE(rep.passed());
  const auto g = grad_multi_level(t, s, o);
  EXPECT_TRUE(g.spectral_fd_fallback);
  EXPECT_EQ(g.total.mode, GradientMode::FiniteDifference);
}

TEST(Gradients, DisabledTermsAreNotChecked) {
  std::mt19937_64 rng(53);
  const auto inst = testing::well_posed_instance(rng);
  LossOptions o;
  o.terms = {true, false, false};
  const auto rep = check_gradients(inst.teacher, inst.student, o);
  EXPECT_EQ(rep.vertex.status, CheckStatus::Checked);
  EXPECT_EQ(rep.edge.status, CheckStatus::Disabled);
  EXPECT_EQ(rep.spectral.status, CheckStatus::Disabled);
}

TEST(Gradients, CorruptionHookIsDetected) {
  std::mt19937_64 rng(54);
  const auto inst = testing::well_posed_instance(rng);
  for (auto term : {LossTerm::Vertex, LossTerm::Edge, LossTerm::Spectral}) {
    const auto rep = check_gradients(inst.teacher, inst.student, {}, {}, [term](LossTerm t, FeatureMap& g) {
      if (t == term) g.values()[0] += 1.0;
    });
    EXPECT_FALSE(rep.passed());
  }
}

TEST(Gradients, FixedShapesAgreeWithFiniteDifferences) {
  std::mt19937_64 rng(55);
  auto pair = [&](MapShape shape) {
    for (;;) {
      testing::Instance inst{testing::random_map(shape, rng), testing::random_map(shape, rng),
                             default_n(shape.channels)};
      if (testing::well_posed(inst.teacher, inst.n) && testing::well_posed(inst.student, inst.n)) return inst;
    }
  };
  const auto v = pair({4, 3, 3});
  EXPECT_LE(check_gradients(v.teacher, v.student, {}).vertex.relative_error, 1e-6);
  const auto e = pair({3, 2, 2});
  EXPECT_LE(check_gradients(e.teacher, e.student, {}).edge.relative_error, 1e-5);
  const auto s = pair({4, 2, 2});
  const auto rs = check_gradients(s.teacher, s.student, {});
  EXPECT_EQ(rs.spectral.status, CheckStatus::Checked);
  EXPECT_LE(rs.spectral.relative_error, 1e-4);
}

TEST(Gradients, RandomInstancesAgreeWithFiniteDifferences) {
  std::mt19937_64 rng(56);
  for (int t = 0; t < 25; ++t) {
    const auto inst = testing::well_posed_instance(rng);
    const auto rep = check_gradients(inst.teacher, inst.student, {});
    EXPECT_EQ(rep.spectral.status, CheckStatus::Checked);
    EXPECT_TRUE(rep.passed()) << "V " << rep.vertex.relative_error << " E " << rep.edge.relative_error << " S "
                              << rep.spectral.relative_error;
  }
}

TEST(Gradients, OptionVariantsAgreeWithFiniteDifferences) {
  std::mt19937_64 rng(57);
  for (int t = 0; t < 10; ++t) {
    const auto inst = testing::well_posed_instance(rng);
    LossOptions o;
    o.relation_softmax = RelationSoftmax::Row;
    o.masks.spatial = false;
    EXPECT_TRUE(check_gradients(inst.teacher, inst.student, o).passed());
    LossOptions v;
    v.spectral_variant = SpectralVariant::Eigenvalue;
    const auto rv = check_gradients(inst.teacher, inst.student, v);
    EXPECT_LE(rv.spectral.relative_error, 1e-4);
  }
}

TEST(Gradients, GramAdjacencyAgreesWithFiniteDifferences) {
  std::mt19937_64 rng(58);
  const auto t = testing::random_map({3, 2, 2}, rng, testing::Entries::AbsNormal);
  const auto s = testing::random_map({3, 2, 2}, rng, testing::Entries::AbsNormal);
  LossOptions o;
  o.adjacency = AdjacencyMode::UnnormalizedGram;
  o.terms.spectral = false;
  const auto rep = check_gradients(t, s, o);
  EXPECT_LE(rep.edge.relative_error, 1e-5);
}

}  // namespace
}  // namespace crgkd
