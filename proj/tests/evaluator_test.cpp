#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "spinepose/error.hpp"
#include "spinepose/evaluator.hpp"
#include "oracles.hpp"

namespace spinepose {
namespace {

using namespace oracles;

TEST(OksTest, Examples) {
  const auto& s = spec();
  std::mt19937_64 rng(1);
  const Pose2D gt = random_pose(rng, {0, 0}, 100);
  std::vector<std::size_t> all(s.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  EXPECT_EQ(oks(gt, 1e4, gt, all, s.sigmas), 1.0);
  Pose2D far = gt;
  for (auto& c : far.coords) c += Vec2{1e6, 0};
  EXPECT_NEAR(oks(gt, 1e4, far, all, s.sigmas), 0.0, 1e-300);
}

TEST(OksTest, TwoKeypointScalarOracle) {
  Pose2D gt(std::vector<Vec2>{{0, 0}, {5, 5}});
  Pose2D pred(std::vector<Vec2>{{20, 0}, {5, 5}});
  const std::vector<double> sig{0.079, 0.079};
  const std::vector<std::size_t> both{0, 1};
  const double expected = (std::exp(-400.0 / (2.0 * 1e4 * 0.079 * 0.079)) + 1.0) / 2.0;
  EXPECT_NEAR(oks(gt, 1e4, pred, both, sig), expected, 1e-15);
}

TEST(OksTest, InvarianceAndSubsetRestriction) {
  std::mt19937_64 rng(4);
  const Pose2D gt = random_pose(rng, {0, 0}, 100);
  const Pose2D pred = jittered(gt, rng, 5.0);
  const auto subsets = default_subsets(spec());
  const auto& body = subsets[0].keypoints;
  const double base = oks(gt, 5000, pred, body, spec().sigmas);
  Pose2D gt2 = gt, pred2 = pred;
  for (auto& c : gt2.coords) c += Vec2{37, -12};
  for (auto& c : pred2.coords) c += Vec2{37, -12};
  EXPECT_NEAR(oks(gt2, 5000, pred2, body, spec().sigmas), base, 1e-12);
  for (auto& c : gt2.coords) c = 3.0 * c;
  for (auto& c : pred2.coords) c = 3.0 * c;
  EXPECT_NEAR(oks(gt2, 5000 * 9.0, pred2, body, spec().sigmas), base, 1e-12);
  // Keypoints outside the subset do not matter.
  Pose2D moved = pred;
  for (std::size_t k : spec().spine_set) moved.coords[k] += Vec2{500, 500};
  EXPECT_EQ(oks(gt, 5000, moved, body, spec().sigmas), base);
}

TEST(OksTest, NoLabeledKeypointsRaises) {
  Pose2D gt(spec().size(), Visibility::kNotLabeled);
  std::vector<std::size_t> all{0, 1, 2};
  try {
    oks(gt, 100, gt, all, spec().sigmas);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoLabeledKeypoints);
  }
}

TEST(SubsetTest, DefaultSizes) {
  const auto s = default_subsets(spec());
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0].name, "body");
  EXPECT_EQ(s[0].keypoints.size(), 20u);
  EXPECT_EQ(s[1].keypoints.size(), 6u);
  EXPECT_EQ(s[2].keypoints.size(), 11u);
  EXPECT_EQ(s[3].keypoints.size(), 37u);
}

TEST(EvaluateTest, PerfectPredictionsScoreOne) {
  const auto c = random_corpus(2);
  std::vector<Prediction> preds;
  for (const auto& g : c.gt) preds.push_back({g.id, g.image_id, g.pose, 1.0});
  const auto subsets = default_subsets(spec());
  const auto r = evaluate(c.set(), preds, spec(), subsets);
  for (const auto& s : r.subsets) {
    EXPECT_EQ(s.ap, 1.0) << s.name;
    EXPECT_EQ(s.ar, 1.0) << s.name;
  }
}

TEST(EvaluateTest, NoPredictionsScoreZero) {
  const auto c = random_corpus(2);
  const auto subsets = default_subsets(spec());
  const auto r = evaluate(c.gt, {}, spec(), subsets);
  for (const auto& s : r.subsets) {
    EXPECT_EQ(s.ap, 0.0);
    EXPECT_EQ(s.ar, 0.0);
  }
}

TEST(EvaluateTest, ThreeInstanceCorpusWithOnePartialMatch) {
  std::mt19937_64 rng(8);
  std::vector<GtInstance> gt;
  for (int i = 0; i < 3; ++i) gt.push_back({i + 1, i < 2 ? 0 : 1, random_pose(rng, {i * 100.0, 0}, 80), 5000});
  std::vector<Prediction> preds = {{10, 0, gt[0].pose, 0.9}, {11, 0, gt[1].pose, 0.8}};
  Pose2D partial = gt[2].pose;
  for (std::size_t k = 0; k < spec().size(); ++k) {
    const double s = spec().sigmas[k];
    partial.coords[k].x += std::sqrt(-2.0 * 5000 * s * s * std::log(0.72));
  }
  preds.push_back({12, 1, partial, 0.7});
  const std::vector<EvalSubset> overall{default_subsets(spec())[3]};
  const auto r = evaluate(gt, preds, spec(), overall);
  const auto& s = r.subsets[0];
  for (const auto& m : s.matches) {
    if (m.prediction_id == 12 && m.gt_id) EXPECT_NEAR(m.oks, 0.72, 1e-12);
  }
  for (const auto& t : s.thresholds) {
    const bool loose = t.threshold < 0.72;
    EXPECT_EQ(t.true_positives, loose ? 3u : 2u) << t.threshold;
    EXPECT_EQ(t.false_positives, loose ? 0u : 1u) << t.threshold;
    EXPECT_NEAR(t.ap, loose ? 1.0 : 67.0 / 101.0, 1e-15);
  }
  EXPECT_NEAR(s.ap, (5.0 + 5.0 * 67.0 / 101.0) / 10.0, 1e-15);
  EXPECT_NEAR(s.ar, (5.0 + 5.0 * 2.0 / 3.0) / 10.0, 1e-15);
}

TEST(EvaluateTest, MatchesExhaustiveOracleExactly) {
  const auto subsets = default_subsets(spec());
  std::size_t ignored = 0, partial = 0;
  for (std::uint64_t seed = 0; seed < 150; ++seed) {
    const auto c = random_corpus(seed);
    EvalOptions opt;
    opt.max_detections = seed % 3 == 0 ? 2 : 20;
    const auto r = evaluate(c.set(), c.preds, spec(), subsets, opt);
    for (const auto& s : r.subsets) {
      for (const auto& m : s.matches) ignored += m.ignored;
      partial += s.ap > 0.0 && s.ap < 1.0;
    }
    for (std::size_t si = 0; si < subsets.size(); ++si) {
      const auto ref = oracle(c.gt, c.preds, subsets[si].keypoints, opt.max_detections);
      const auto& got = r.subsets[si];
      double ap = 0, ar = 0;
      for (std::size_t t = 0; t < 10; ++t) {
        ASSERT_EQ(got.thresholds[t].true_positives, ref[t].tp) << seed << " " << si << " " << t;
        ASSERT_EQ(got.thresholds[t].false_positives, ref[t].fp);
        ASSERT_EQ(got.thresholds[t].ap, ref[t].ap);
        ASSERT_EQ(got.thresholds[t].recall, ref[t].recall);
        ap += ref[t].ap;
        ar += ref[t].recall;
      }
      EXPECT_EQ(got.ap, ap / 10.0);
      EXPECT_EQ(got.ar, ar / 10.0);
    }
  }
  // The corpora exercise the ignore path and fractional AP.
  EXPECT_GT(ignored, 0u);
  EXPECT_GT(partial, 100u);
}

TEST(EvaluateTest, InputOrderDoesNotMatter) {
  const auto subsets = default_subsets(spec());
  auto c = random_corpus(11);
  const auto base = to_json(evaluate(c.set(), c.preds, spec(), subsets));
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(c.preds.begin(), c.preds.end(), rng);
    std::shuffle(c.gt.begin(), c.gt.end(), rng);
    const auto r = to_json(evaluate(c.set(), c.preds, spec(), subsets));
    for (std::size_t s = 0; s < subsets.size(); ++s) {
      EXPECT_EQ(r["subsets"][s]["ap"], base["subsets"][s]["ap"]);
      EXPECT_EQ(r["subsets"][s]["thresholds"], base["subsets"][s]["thresholds"]);
    }
  }
}

TEST(EvaluateTest, AllKeypointSubsetEqualsOverall) {
  const auto c = random_corpus(21);
  const auto subsets = default_subsets(spec());
  std::vector<EvalSubset> custom{{"everything", subsets[3].keypoints}};
  const auto a = evaluate(c.set(), c.preds, spec(), custom);
  const auto b = evaluate(c.set(), c.preds, spec(), subsets);
  EXPECT_EQ(a.subsets[0].ap, b.subset("overall").ap);
  EXPECT_EQ(a.subsets[0].ar, b.subset("overall").ar);
}

TEST(EvaluateTest, Errors) {
  const auto c = random_corpus(3);
  const auto subsets = default_subsets(spec());
  auto dup = c.preds;
  ASSERT_FALSE(dup.empty());
  dup.push_back(dup.front());
  try {
    evaluate(c.set(), dup, spec(), subsets);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicatePredictionId);
  }
  auto stray = c.preds;
  stray.push_back({99999, 4242, c.gt.front().pose, 0.5});
  try {
    evaluate(c.set(), stray, spec(), subsets);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownImageId);
  }
}

nlohmann::json triples(const Pose2D& p, bool gt) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t k = 0; k < p.size(); ++k) {
    out.push_back(p.coords[k].x);
    out.push_back(p.coords[k].y);
    out.push_back(gt ? static_cast<int>(p.visibility[k]) : 0.9);
  }
  return out;
}

TEST(CocoIoTest, JsonRoundTripMatchesInMemory) {
  const auto c = random_corpus(6);
  nlohmann::json gt_doc = {{"images", nlohmann::json::array()},
                           {"annotations", nlohmann::json::array()}};
  for (const auto& g : c.gt) {
    gt_doc["annotations"].push_back({{"id", g.id},
                                     {"image_id", g.image_id},
                                     {"keypoints", triples(g.pose, true)},
                                     {"bbox", {0.0, 0.0, g.area / 50.0, 50.0}},
                                     {"area", g.area}});
  }
  for (auto id : c.images) gt_doc["images"].push_back({{"id", id}});
  gt_doc["images"].push_back({{"id", 777}});
  nlohmann::json pred_doc = nlohmann::json::array();
  for (const auto& p : c.preds) {
    pred_doc.push_back({{"id", p.id}, {"image_id", p.image_id}, {"score", p.score},
                        {"keypoints", triples(p.pose, false)}});
  }
  pred_doc.push_back({{"id", 5555}, {"image_id", 777}, {"score", 0.01},
                      {"keypoints", triples(c.gt.front().pose, false)}});
  const auto gt = gt_from_json(gt_doc, spec(), BboxMode::kGt);
  const auto gt_area = gt_from_json(gt_doc, spec(), BboxMode::kProvided);
  ASSERT_EQ(gt.instances.size(), c.gt.size());
  for (std::size_t i = 0; i < gt.instances.size(); ++i) {
    EXPECT_NEAR(gt.instances[i].area, c.gt[i].area, 1e-9);
    EXPECT_EQ(gt_area.instances[i].area, c.gt[i].area);
  }
  const auto preds = predictions_from_json(pred_doc, spec());
  const auto subsets = default_subsets(spec());
  // An image with no gt is known, so its prediction is a false positive.
  const auto r = evaluate(gt_area, preds, spec(), subsets);
  auto inmem = c.preds;
  const auto base = evaluate(c.set(), inmem, spec(), subsets);
  EXPECT_EQ(r.subset("overall").thresholds[0].false_positives,
            base.subset("overall").thresholds[0].false_positives + 1);
  EXPECT_THROW(evaluate(c.set(), preds, spec(), subsets), Error);
  const auto j = to_json(r);
  EXPECT_EQ(j["subsets"].size(), 4u);
  EXPECT_EQ(j["subsets"][0]["thresholds"][0]["precision"].size(), kRecallPoints);
  const auto table = format_table(r, "model");
  EXPECT_NE(table.find("spine"), std::string::npos);
  EXPECT_NE(table.find("overall"), std::string::npos);
}

TEST(CocoIoTest, MalformedInputs) {
  EXPECT_THROW(gt_from_json(nlohmann::json::array(), spec(), BboxMode::kGt), Error);
  nlohmann::json bad = {{"annotations", {{{"id", 1}, {"image_id", 1}, {"keypoints", {1, 2, 3}}}}}};
  EXPECT_THROW(gt_from_json(bad, spec(), BboxMode::kGt), Error);
  EXPECT_THROW(predictions_from_json(nlohmann::json{{"foo", 1}}, spec()), Error);
  EXPECT_THROW(bbox_mode_from_string("detector"), Error);
}

TEST(CocoIoTest, SigmaOverrides) {
  const auto sig = sigmas_from_json(nlohmann::json{{"spine_T8", 0.1}}, spec());
  EXPECT_EQ(sig[spec().index_of("spine_T8")], 0.1);
  EXPECT_EQ(sig[0], spec().sigmas[0]);
  EXPECT_THROW(sigmas_from_json(nlohmann::json::array({0.1}), spec()), Error);
  EXPECT_THROW(sigmas_from_json(nlohmann::json{{"spine_T8", -1.0}}, spec()), Error);
}

}  // namespace
}  // namespace spinepose
