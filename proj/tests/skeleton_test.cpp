#include "spinepose/skeleton.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <random>
#include <set>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

TEST(SkeletonTest, DefaultSpecCounts) {
  const auto spec = default_extended_skeleton();
  // 17 COCO + head top + neck + hip center + 6 feet, then 9 spine + 2 SC.
  EXPECT_EQ(17 + 1 + 1 + 1 + 6, 26);
  EXPECT_EQ(spec.body_set.size(), 26u);
  EXPECT_EQ(spec.spine_set.size(), 11u);
  EXPECT_EQ(spec.size(), 37u);
  EXPECT_TRUE(validate_spec(spec).empty());
}

TEST(SkeletonTest, SpineChainOrder) {
  const auto spec = default_extended_skeleton();
  ASSERT_EQ(spec.spine_chain.size(), 9u);
  const char* expected[] = {"spine_sacrum", "spine_L5", "spine_L3",
                            "spine_L1",     "spine_T8", "spine_T3",
                            "spine_C7",     "spine_C4", "spine_C1"};
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(spec.keypoints[spec.spine_chain[i]].name, expected[i]);
  }
}

TEST(SkeletonTest, PartitionDisjointAndCovering) {
  const auto spec = default_extended_skeleton();
  std::set<std::size_t> body(spec.body_set.begin(), spec.body_set.end());
  for (std::size_t s : spec.spine_set) EXPECT_FALSE(body.contains(s));
  EXPECT_EQ(body.size() + spec.spine_set.size(), spec.size());
}

TEST(SkeletonTest, ChainNeighboursAreBones) {
  const auto spec = default_extended_skeleton();
  for (std::size_t i = 0; i + 1 < 9; ++i) {
    const Bone b{spec.spine_chain[i], spec.spine_chain[i + 1]};
    EXPECT_NE(std::find(spec.bones.begin(), spec.bones.end(), b),
              spec.bones.end());
  }
  // 19 COCO + 6 feet + 8 chain + 2 sternoclavicular + hip_center->sacrum.
  EXPECT_EQ(spec.bones.size(), 36u);
}

TEST(SkeletonTest, ValidateReportsDuplicateName) {
  auto spec = default_extended_skeleton();
  spec.keypoints[1].name = spec.keypoints[0].name;
  const auto v = validate_spec(spec);
  ASSERT_FALSE(v.empty());
  EXPECT_NE(std::find(v.begin(), v.end(), "duplicate keypoint name: nose"),
            v.end());
}

TEST(SkeletonTest, ValidateReportsShortChain) {
  auto spec = default_extended_skeleton();
  spec.spine_chain.pop_back();
  const auto v = validate_spec(spec);
  EXPECT_NE(std::find(v.begin(), v.end(), "spine_chain length 8 ≠ 9"),
            v.end());
}

TEST(SkeletonTest, ValidateReportsBadBonesAndSigmas) {
  auto spec = default_extended_skeleton();
  spec.bones.push_back({3, 3});
  spec.bones.push_back(spec.bones.front());
  spec.bones.push_back({0, 99});
  spec.sigmas[4] = 0.0;
  spec.body_set.push_back(spec.spine_set.front());
  const auto v = validate_spec(spec);
  EXPECT_GE(v.size(), 5u);
}

TEST(SkeletonTest, JsonRoundTrip) {
  const auto spec = default_extended_skeleton();
  const auto back = skeleton_from_json(to_json(spec));
  EXPECT_EQ(back.names(), spec.names());
  EXPECT_EQ(back.bones, spec.bones);
  EXPECT_EQ(back.spine_chain, spec.spine_chain);
  EXPECT_EQ(back.sigmas, spec.sigmas);
  EXPECT_THROW(skeleton_from_json(nlohmann::json::parse("{\"keypoints\":3}")),
               Error);
}

TEST(SkeletonTest, BoneAngleExamples) {
  EXPECT_DOUBLE_EQ(*bone_angle({0, 0}, {1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(*bone_angle({0, 0}, {0, 1}), std::numbers::pi / 2);
  EXPECT_DOUBLE_EQ(*bone_angle({0, 0}, {-1, -1}), -3 * std::numbers::pi / 4);
  EXPECT_DOUBLE_EQ(*bone_angle({0, 0}, {-1, -0.0}), std::numbers::pi);
  EXPECT_FALSE(bone_angle({2, 3}, {2, 3}).has_value());
}

TEST(SkeletonTest, BoneAnglesDegenerateThrows) {
  const auto spec = default_extended_skeleton();
  Pose2D pose(std::vector<Vec2>(spec.size()));
  for (std::size_t k = 0; k < spec.size(); ++k) {
    pose.coords[k] = {double(k), double(k * k % 7)};
  }
  EXPECT_NO_THROW(bone_angles(pose, spec));
  pose.coords[spec.bones[0].to] = pose.coords[spec.bones[0].from];
  try {
    bone_angles(pose, spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateBone);
  }
}

TEST(SkeletonTest, BoneAnglesRotationEquivariant) {
  const auto spec = default_extended_skeleton();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> coord(-100, 100), ang(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    Pose2D pose(std::vector<Vec2>(spec.size()));
    for (auto& c : pose.coords) c = {coord(rng), coord(rng)};
    const double theta = ang(rng);
    Pose2D rotated = pose;
    for (auto& c : rotated.coords) c = rotate(c, theta);
    const auto a = bone_angles(pose, spec);
    const auto b = bone_angles(rotated, spec);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double diff = std::remainder(b[i] - a[i] - theta,
                                         2 * std::numbers::pi);
      EXPECT_NEAR(diff, 0.0, 1e-9);
      EXPECT_GT(b[i], -std::numbers::pi);
      EXPECT_LE(b[i], std::numbers::pi);
    }
  }
}

TEST(SkeletonTest, DatasetSkeletonMapsOntoModel) {
  const auto data = dataset_annotation_skeleton();
  const auto model = default_extended_skeleton();
  EXPECT_EQ(data.size(), 35u);
  EXPECT_TRUE(validate_spec(data).empty());

  Pose2D ann(data.size(), Visibility::kLabeledVisible);
  for (std::size_t k = 0; k < data.size(); ++k) {
    ann.coords[k] = {10.0 * k, 5.0 * k};
    ann.confidence[k] = 0.9;
  }
  const auto mapped = map_pose(ann, data, model);
  const Vec2 ls = ann.coords[data.index_of("left_shoulder")];
  const Vec2 rs = ann.coords[data.index_of("right_shoulder")];
  EXPECT_EQ(mapped.coords[model.index_of("neck")], midpoint(ls, rs));
  const Vec2 lh = ann.coords[data.index_of("left_hip")];
  const Vec2 rh = ann.coords[data.index_of("right_hip")];
  EXPECT_EQ(mapped.coords[model.index_of("hip_center")], midpoint(lh, rh));
  EXPECT_EQ(mapped.coords[model.index_of("spine_T8")],
            ann.coords[data.index_of("spine_T8")]);
  for (std::size_t k = 0; k < model.size(); ++k) EXPECT_TRUE(mapped.labeled(k));
}

TEST(SkeletonTest, BodyOnlyRestriction) {
  const auto spec = default_extended_skeleton();
  const auto body = body_only(spec);
  EXPECT_EQ(body.size(), 26u);
  EXPECT_TRUE(body.spine_set.empty());
  EXPECT_TRUE(body.spine_chain.empty());
  EXPECT_EQ(body.bones.size(), 25u);
}

}  // namespace
}  // namespace spinepose
