#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cdrsteer/cdr.hpp"
#include "cdrsteer/kernels.hpp"
#include "generators.hpp"
#include "json.hpp"

using namespace cdrsteer;

namespace {

Model planted() {
  const ModelConfig cfg;
  return build_model(cfg, PlantSpec::standard(cfg));
}

// Splice oracle written out with plain loops.
Vector splice_oracle(const Vector& x, const Vector& delta, const std::vector<int>& units, const LayerWeights& w) {
  const std::size_t dm = x.size();
  const std::size_t dff = w.w_up.cols();
  auto act = [&](const Vector& in) {
    Vector m(dff);
    for (std::size_t r = 0; r < dff; ++r) {
      double g = 0.0;
      double u = 0.0;
      for (std::size_t c = 0; c < dm; ++c) {
        g += in[c] * w.w_gate(c, r);
        u += in[c] * w.w_up(c, r);
      }
      m[r] = g / (1.0 + std::exp(-g)) * u;
    }
    return m;
  };
  Vector shifted = x;
  for (std::size_t c = 0; c < dm; ++c) shifted[c] += delta[c];
  Vector m = act(x);
  const Vector mt = act(shifted);
  for (int r : units) m[static_cast<std::size_t>(r)] = mt[static_cast<std::size_t>(r)];
  Vector out(dm, 0.0);
  for (std::size_t c = 0; c < dm; ++c)
    for (std::size_t r = 0; r < dff; ++r) out[c] += m[r] * w.w_down(r, c);
  return out;
}

}  // namespace

TEST(Branch, JaccardFixtures) {
  EXPECT_DOUBLE_EQ(jaccard(std::vector<int>{1, 2, 3}, std::vector<int>{3, 4}), 0.25);
  EXPECT_EQ(jaccard(std::vector<int>{}, std::vector<int>{}), 1.0);
  EXPECT_EQ(jaccard(std::vector<int>{1}, std::vector<int>{}), 0.0);
  EXPECT_EQ(jaccard(std::vector<int>{5, 6}, std::vector<int>{6, 5}), 1.0);
}

TEST(Branch, DetectionFixture) {
  const std::vector<LayerSets> layers{
      {{1, 2}, {2, 3}, {1, 2, 3}, {3, 4}},  // shared {2}, J = 0.25
      {{0}, {1}, {1}, {2}},                 // no shared head
      {{0, 1}, {1}, {5, 6}, {5, 6}},        // J = 1
  };
  const BranchPointSet set = detect_branch_points(layers, 1.0);
  ASSERT_EQ(set.points.size(), 1u);
  const BranchPoint& p = set.points[0];
  EXPECT_EQ(p.layer, 0);
  EXPECT_EQ(p.shared_heads, (std::vector<int>{2}));
  EXPECT_DOUBLE_EQ(p.jaccard, 0.25);
  EXPECT_EQ(p.u_only, (std::vector<int>{1, 2}));
  EXPECT_EQ(p.d_only, (std::vector<int>{4}));
  EXPECT_EQ(set.layers(), (std::vector<int>{0}));
  EXPECT_EQ(set.find(1), nullptr);
  EXPECT_TRUE(detect_branch_points(layers, 0.25).empty());
}

TEST(Branch, PlantedLayoutDetected) {
  const Model m = planted();
  const PlantSpec& p = *m.plant;
  HeadScoreMap heads;
  heads.n_layers = 4;
  heads.n_heads = 4;
  for (Framework f : kFrameworks) {
    heads.scores[framework_index(f)].assign(16, 0.0);
    for (int l = 0; l < 4; ++l)
      for (int h : p.of(f).heads[static_cast<std::size_t>(l)]) heads.scores[framework_index(f)][static_cast<std::size_t>(l * 4 + h)] = 1.0;
  }
  reselect(heads, HeadThresholds{0.5, 0.5});
  const auto ffn_u = score_and_select(m, target_direction(m, p.utilitarian.indicator_token), 0.5, Framework::Utilitarian);
  const auto ffn_d = score_and_select(m, target_direction(m, p.deontological.indicator_token), 0.5, Framework::Deontological);
  const BranchPointSet set = detect_branch_points(heads, ffn_u, ffn_d, 1.0);
  ASSERT_EQ(set.layers(), (std::vector<int>{1, 3}));
  EXPECT_EQ(set.points[0].shared_heads, (std::vector<int>{2}));
  EXPECT_DOUBLE_EQ(set.points[0].jaccard, 0.2);
  EXPECT_EQ(set.points[0].u_only, (std::vector<int>{8, 9, 10, 11}));
  EXPECT_EQ(set.points[0].d_only, (std::vector<int>{14, 15, 16, 17}));
  EXPECT_EQ(set.points[1].shared_heads, (std::vector<int>{3}));
  EXPECT_EQ(set.points[1].jaccard, 0.0);
}

TEST(Gating, MaskingDeviationFixture) {
  // Two heads of width 1, W_o = I: masking head 0 removes z_0.
  const Matrix w_o = Matrix::identity(2);
  EXPECT_EQ(masking_deviation(Vector{1.0, 2.0}, std::vector<int>{0}, w_o, 1), (Vector{-1.0, 0.0}));
  EXPECT_EQ(masking_deviation(Vector{1.0, 2.0}, std::vector<int>{}, w_o, 1), (Vector{0.0, 0.0}));
}

TEST(Gating, MaskingAllHeadsNegatesAttentionOutput) {
  Rng rng(11);
  const Matrix w_o = gen::matrix(rng, 8, 5);
  const Vector z = gen::vector(rng, 8);
  const Vector delta = masking_deviation(z, std::vector<int>{0, 1, 2, 3}, w_o, 2);
  for (std::size_t c = 0; c < 5; ++c) {
    double zw = 0.0;
    for (std::size_t i = 0; i < 8; ++i) zw += z[i] * w_o(i, c);
    EXPECT_NEAR(delta[c], -zw, 1e-12);
  }
  EXPECT_THROW(masking_deviation(z, std::vector<int>{4}, w_o, 2), std::invalid_argument);
  EXPECT_THROW(masking_deviation(z, std::vector<int>{0}, w_o, 3), std::invalid_argument);
}

TEST(Gating, PropertyMatchesSpliceOracle) {
  const Model m = build_model(ModelConfig{});
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const LayerWeights& w = m.layers[rng.below(4)];
    const Vector x = gen::vector(rng, 32);
    const Vector delta = gen::vector(rng, 32, 0.5);
    std::vector<int> units;
    for (int r = 0; r < 64; ++r)
      if (rng.uniform() < 0.3) units.push_back(r);
    const Vector got = gated_ffn(x, delta, units, w);
    const Vector want = splice_oracle(x, delta, units, w);
    for (std::size_t c = 0; c < 32; ++c) EXPECT_NEAR(got[c], want[c], 1e-10);
  }
}

TEST(Gating, EdgeCases) {
  const Model m = build_model(ModelConfig{});
  Rng rng(13);
  const LayerWeights& w = m.layers[0];
  const Vector x = gen::vector(rng, 32);
  const Vector delta = gen::vector(rng, 32);
  const Vector plain = kernels::serial::vecmat(ffn_activation(x, w), w.w_down);
  EXPECT_EQ(gated_ffn(x, delta, std::vector<int>{}, w), plain);
  EXPECT_EQ(gated_ffn(x, Vector(32, 0.0), std::vector<int>{1, 2, 3}, w), plain);
  std::vector<int> all(64);
  for (int r = 0; r < 64; ++r) all[static_cast<std::size_t>(r)] = r;
  Vector shifted = x;
  for (std::size_t c = 0; c < 32; ++c) shifted[c] += delta[c];
  const Vector full = kernels::serial::vecmat(ffn_activation(shifted, w), w.w_down);
  EXPECT_EQ(gated_ffn(x, delta, all, w), full);
  EXPECT_THROW(gated_ffn(x, delta, std::vector<int>{64}, w), std::invalid_argument);
  EXPECT_THROW(gated_ffn(x, Vector(3, 0.0), all, w), std::invalid_argument);
}

TEST(Gating, BinaryPreferenceOnlyAtCorners) {
  EXPECT_TRUE(BinaryPreference::from_weights(1.0, 0.0).is_utilitarian());
  EXPECT_FALSE(BinaryPreference::from_weights(0.0, 1.0).is_utilitarian());
  EXPECT_THROW(BinaryPreference::from_weights(0.5, 0.5), std::invalid_argument);
}

TEST(Gating, InterventionsOverwriteOppositeUnits) {
  BranchPointSet set;
  set.points.push_back(BranchPoint{1, {2}, 0.2, {8, 9}, {14, 15}});
  const auto u = gating_interventions(set, BinaryPreference::utilitarian());
  const auto d = gating_interventions(set, BinaryPreference::deontological());
  ASSERT_EQ(u.size(), 1u);
  EXPECT_EQ(std::get<FfnGate>(u[0]).units, (std::vector<int>{14, 15}));
  EXPECT_EQ(std::get<FfnGate>(d[0]).units, (std::vector<int>{8, 9}));
  EXPECT_EQ(std::get<FfnGate>(d[0]).shared_heads, (std::vector<int>{2}));
}

TEST(Gating, EmptyBranchSetIsBaseline) {
  const Model m = planted();
  const auto prompts = make_prompts(m, 6, 2);
  const GenerationOptions opts{2, HookSet{HookKind::ResidualPostFfn}};
  const auto gated = run_binary_control(m, prompts, BinaryPreference::utilitarian(), BranchPointSet{}, opts);
  const auto base = run_batch(m, prompts, std::vector<Intervention>{}, opts);
  ASSERT_EQ(gated.size(), base.size());
  for (std::size_t i = 0; i < gated.size(); ++i) {
    EXPECT_EQ(gated[i].tokens, base[i].tokens);
    EXPECT_EQ(gated[i].trace, base[i].trace);
  }
}

TEST(Gating, LayersBeforeFirstBranchUntouched) {
  const Model m = planted();
  BranchPointSet set;
  set.points.push_back(BranchPoint{1, {2}, 0.2, {8, 9, 10, 11}, {14, 15, 16, 17}});
  const auto prompts = make_prompts(m, 4, 3);
  const GenerationOptions opts{1, HookSet{HookKind::ResidualPostFfn}};
  const auto base = run_batch(m, prompts, std::vector<Intervention>{}, opts);
  const auto gated = run_binary_control(m, prompts, BinaryPreference::deontological(), set, opts);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    EXPECT_EQ(gated[i].trace[0].layer, 0);
    EXPECT_EQ(gated[i].trace[0].values, base[i].trace[0].values);
    EXPECT_NE(gated[i].trace[1].values, base[i].trace[1].values);
  }
}

TEST(Residuals, MeanOverSteps) {
  std::vector<HookRecord> recs{
      {0, 1, 0, HookKind::ResidualPostFfn, std::nullopt, {1.0, 3.0}},
      {0, 1, 1, HookKind::ResidualPostFfn, std::nullopt, {3.0, 5.0}},
      {1, 1, 0, HookKind::ResidualPostFfn, std::nullopt, {7.0, 7.0}},
      {0, 1, 0, HookKind::FfnDownOut, std::nullopt, {100.0, 100.0}},
  };
  const auto out = record_residuals(recs, std::vector<int>{1, 0}, std::vector<int>{1});
  const Matrix& x = out.at(1);
  EXPECT_EQ(Vector(x.row(0).begin(), x.row(0).end()), (Vector{7.0, 7.0}));
  EXPECT_EQ(Vector(x.row(1).begin(), x.row(1).end()), (Vector{2.0, 4.0}));
  EXPECT_THROW(record_residuals(recs, std::vector<int>{0, 2}, std::vector<int>{1}), std::invalid_argument);
}

TEST(Residuals, PairNeedsSamePrompts) {
  std::vector<HookRecord> u{{0, 1, 0, HookKind::ResidualPostFfn, std::nullopt, {1.0}}};
  std::vector<HookRecord> d{{1, 1, 0, HookKind::ResidualPostFfn, std::nullopt, {1.0}}};
  EXPECT_THROW(record_residual_pair(u, d, std::vector<int>{1}), std::invalid_argument);
  EXPECT_NO_THROW(record_residual_pair(u, u, std::vector<int>{1}));
}

TEST(Branch, JsonRoundTripIsOneBased) {
  BranchPointSet set;
  set.points.push_back(BranchPoint{1, {2}, 0.2, {8, 9}, {14}});
  set.points.push_back(BranchPoint{3, {0, 3}, 0.0, {}, {34}});
  std::stringstream ss;
  write_branch_points_json(ss, set);
  EXPECT_EQ(nlohmann::json::parse(ss.str())[0]["shared_heads"], nlohmann::json::array({3}));
  const BranchPointSet back = read_branch_points_json(ss);
  EXPECT_EQ(back.points, set.points);
}
