#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "spinepose/error.hpp"
#include "spinepose/gradcheck.hpp"
#include "spinepose/losses.hpp"

namespace spinepose {
namespace {

// Logits whose softmax reproduces `d` exactly up to rounding.
std::vector<double> logits_of(const std::vector<KeypointDistribution>& dists) {
  std::vector<double> z;
  for (const auto& kd : dists) {
    for (double p : kd.x.bins) z.push_back(std::log(p));
    for (double p : kd.y.bins) z.push_back(std::log(p));
  }
  return z;
}

TEST(TotalLossTest, BreakdownIsWeightedSum) {
  const auto c = make_gradcheck_case(3);
  const auto b = total_loss(c.batch(), c.spec, c.grid, c.weights);
  EXPECT_NEAR(b.total,
              5.0 * b.pos + 2.5 * b.distill + 0.1 * b.structure + 0.5 * b.spine,
              1e-9);
  EXPECT_GT(b.pos, 0);
  EXPECT_GT(b.distill, 0);
  EXPECT_GT(b.structure, 0);
  EXPECT_GT(b.spine, 0);
}

TEST(TotalLossTest, AblationBaselineIsPositionalOnly) {
  auto c = make_gradcheck_case(4);
  c.weights.beta = c.weights.gamma1 = c.weights.gamma2 = 0.0;
  const auto b = total_loss(c.batch(), c.spec, c.grid, c.weights);
  EXPECT_DOUBLE_EQ(b.total, 5.0 * b.pos);
}

TEST(TotalLossTest, DoublingGamma2DoublesSpineContribution) {
  auto c = make_gradcheck_case(5);
  const auto a = total_loss(c.batch(), c.spec, c.grid, c.weights);
  c.weights.gamma2 *= 2;
  const auto b = total_loss(c.batch(), c.spec, c.grid, c.weights);
  EXPECT_EQ(a.pos, b.pos);
  EXPECT_EQ(a.distill, b.distill);
  EXPECT_EQ(a.structure, b.structure);
  EXPECT_EQ(a.spine, b.spine);
  EXPECT_NEAR(b.total - a.total, 0.5 * a.spine, 1e-9);
}

TEST(TotalLossTest, PredictionsEqualToTargets) {
  auto c = make_gradcheck_case(6, 3);
  for (std::size_t i = 0; i < c.logits.size(); ++i) {
    c.logits[i] = logits_of(c.targets[i].dists);
    // Targets and teacher agree; ground-truth pose equals the decode.
    c.teacher[i].clear();
    for (std::size_t k : c.spec.body_set) {
      c.teacher[i].push_back(c.targets[i].dists[k]);
    }
    const auto dists = distributions_from_logits(c.logits[i], c.grid);
    c.targets[i].pose.coords = decode_pose(dists, c.spec).coords;
  }
  const auto g = grad_total(c.batch(), c.spec, c.grid, c.weights);
  EXPECT_NEAR(g.breakdown.pos, 0.0, 1e-12);
  EXPECT_NEAR(g.breakdown.distill, 0.0, 1e-12);
  EXPECT_NEAR(g.breakdown.structure, 0.0, 1e-9);
  double expected_spine = 0;
  for (const auto& t : c.targets) {
    std::vector<Vec2> chain;
    for (std::size_t k : c.spec.spine_chain) chain.push_back(t.pose.coords[k]);
    expected_spine += spine_smoothness_loss(chain, 16, 0.25);
  }
  EXPECT_NEAR(g.breakdown.spine, expected_spine / 3, 1e-9);

  // Positional gradient alone vanishes at its minimum.
  auto pos_only = c.weights;
  pos_only.beta = pos_only.gamma1 = pos_only.gamma2 = 0;
  const auto gp = grad_total(c.batch(), c.spec, c.grid, pos_only);
  for (const auto& row : gp.grad) {
    for (double v : row) EXPECT_LE(std::abs(v), 1e-8);
  }
}

TEST(TotalLossTest, UnlabeledSpineChainExcludedFromSpineTerm) {
  auto c = make_gradcheck_case(7, 2);
  const auto full = total_loss(c.batch(), c.spec, c.grid, c.weights);
  c.targets[1].pose.visibility[c.spec.spine_chain[4]] = Visibility::kNotLabeled;
  const auto masked = total_loss(c.batch(), c.spec, c.grid, c.weights);
  auto only_first = c;
  only_first.logits.resize(1);
  only_first.targets.resize(1);
  only_first.teacher.resize(1);
  const auto first = total_loss(only_first.batch(), c.spec, c.grid, c.weights);
  EXPECT_NEAR(masked.spine, first.spine, 1e-12);
  EXPECT_LT(masked.pos, full.pos);
}

TEST(TotalLossTest, ShapeErrors) {
  auto c = make_gradcheck_case(8);
  c.teacher.clear();
  EXPECT_THROW(total_loss(c.batch(), c.spec, c.grid, c.weights), Error);
  c.weights.beta = 0;
  EXPECT_NO_THROW(total_loss(c.batch(), c.spec, c.grid, c.weights));
  c.logits[0].pop_back();
  try {
    total_loss(c.batch(), c.spec, c.grid, c.weights);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(GradTotalTest, MatchesFiniteDifferencesSeveralSeeds) {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    const auto r = check_gradients(make_gradcheck_case(seed));
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GradTotalTest, CandidateFirstDirectionAlsoMatches) {
  auto c = make_gradcheck_case(21);
  c.weights.kl_direction = KlDirection::kCandidateFirst;
  EXPECT_LT(check_gradients(c).max_rel_error, 1e-4);
}

TEST(GradTotalTest, IndividualTermsMatch) {
  const auto base = make_gradcheck_case(22);
  const LossWeights only[] = {
      {1, 0, 0, 0, 16, 0.25, KlDirection::kReferenceFirst},
      {0, 1, 0, 0, 16, 0.25, KlDirection::kReferenceFirst},
      {0, 0, 1, 0, 16, 0.25, KlDirection::kReferenceFirst},
      {0, 0, 0, 1, 16, 0.25, KlDirection::kReferenceFirst}};
  for (const auto& w : only) {
    auto c = base;
    c.weights = w;
    EXPECT_LT(check_gradients(c).max_rel_error, 1e-4);
  }
}

}  // namespace
}  // namespace spinepose
