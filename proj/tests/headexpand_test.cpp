#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "spinepose/error.hpp"
#include "spinepose/headexpand.hpp"

namespace spinepose {
namespace {

const AxisGrid kGrid{12, 16, 4.0};

LinearHead random_head(const SkeletonSpec& body, std::size_t in_dim,
                       double mean, double sd, std::uint64_t seed) {
  LinearHead h = make_head(body.names(), kGrid, in_dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(mean, sd);
  for (Eigen::Index i = 0; i < h.weights.size(); ++i) h.weights.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < h.bias.size(); ++i) h.bias(i) = n(rng);
  return h;
}

ToyModel random_model(const SkeletonSpec& body, std::uint64_t seed) {
  ToyModel m;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  m.hidden_weights.resize(10, 6);
  m.hidden_bias.resize(10);
  for (Eigen::Index i = 0; i < m.hidden_weights.size(); ++i) {
    m.hidden_weights.data()[i] = n(rng);
  }
  for (Eigen::Index i = 0; i < m.hidden_bias.size(); ++i) m.hidden_bias(i) = n(rng);
  m.head = random_head(body, 10, 0.0, 0.5, seed + 1);
  return m;
}

TEST(HeadExpandTest, BodyRowsCopiedBitExact) {
  const auto spec = default_extended_skeleton();
  const auto body = body_only(spec);
  const auto teacher = random_head(body, 5, 0.1, 0.4, 1);
  const auto student = expand_head(teacher, spec, 9);
  ASSERT_EQ(student.keypoints.size(), spec.size());
  const std::size_t stride = kGrid.bins_per_keypoint();
  for (std::size_t j = 0; j < spec.body_set.size(); ++j) {
    const std::size_t k = spec.body_set[j];
    const std::size_t t = body.index_of(spec.keypoints[k].name);
    for (std::size_t r = 0; r < stride; ++r) {
      for (Eigen::Index c = 0; c < 5; ++c) {
        ASSERT_EQ(student.weights(static_cast<Eigen::Index>(k * stride + r), c),
                  teacher.weights(static_cast<Eigen::Index>(t * stride + r), c));
      }
      ASSERT_EQ(student.bias(static_cast<Eigen::Index>(k * stride + r)),
                teacher.bias(static_cast<Eigen::Index>(t * stride + r)));
    }
  }
  EXPECT_NO_THROW(check_head(student));
}

TEST(HeadExpandTest, EmptySpineSetReturnsTeacher) {
  const auto body = body_only(default_extended_skeleton());
  const auto teacher = random_head(body, 4, 0.0, 1.0, 2);
  const auto student = expand_head(teacher, body, 3);
  EXPECT_EQ(student.weights, teacher.weights);
  EXPECT_EQ(student.bias, teacher.bias);
  EXPECT_EQ(student.row_map, teacher.row_map);
}

TEST(HeadExpandTest, DeterministicGivenSeed) {
  const auto spec = default_extended_skeleton();
  const auto teacher = random_head(body_only(spec), 3, 0.0, 1.0, 4);
  EXPECT_EQ(expand_head(teacher, spec, 5).weights, expand_head(teacher, spec, 5).weights);
  EXPECT_NE(expand_head(teacher, spec, 5).weights, expand_head(teacher, spec, 6).weights);
}

TEST(HeadExpandTest, NewRowsFollowTeacherStatistics) {
  // 11 spine keypoints x 28 bins x 33 columns > 1e4 fresh entries.
  const auto spec = default_extended_skeleton();
  const auto body = body_only(spec);
  const auto teacher = random_head(body, 33, 0.1, 0.02, 7);
  const auto stats = entry_statistics(teacher.weights);
  const auto student = expand_head(teacher, spec, 8);
  const std::size_t stride = kGrid.bins_per_keypoint();
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (std::size_t k : spec.spine_set) {
    const auto rows = student.weights.middleRows(static_cast<Eigen::Index>(k * stride),
                                                 static_cast<Eigen::Index>(stride));
    sum += rows.sum();
    sq += rows.array().square().sum();
    n += static_cast<std::size_t>(rows.size());
  }
  ASSERT_GE(n, 10000u);
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  const double se = stats.stddev / std::sqrt(static_cast<double>(n));
  EXPECT_NEAR(mean, stats.mean, 3 * se);
  // Standard error of a sample sd is about sd / sqrt(2n).
  EXPECT_NEAR(sd, stats.stddev, 3 * stats.stddev / std::sqrt(2.0 * static_cast<double>(n)));
  EXPECT_NEAR(stats.mean, 0.1, 0.001);
}

TEST(HeadExpandTest, TenThousandEntriesAtStatedStatistics) {
  // A teacher whose entries have exactly mean 0.1 and sd 0.02.
  SkeletonSpec spec;
  spec.keypoints = {{0, "a"}, {1, "b"}};
  spec.body_set = {0};
  spec.spine_set = {1};
  spec.sigmas = {0.05, 0.05};
  const AxisGrid grid{50, 50, 1.0};
  LinearHead teacher = make_head({"a"}, grid, 100);
  for (Eigen::Index i = 0; i < teacher.weights.size(); ++i) {
    teacher.weights.data()[i] = (i % 2 == 0) ? 0.12 : 0.08;
  }
  const auto student = expand_head(teacher, spec, 11);
  const auto fresh = student.weights.bottomRows(100);
  ASSERT_EQ(fresh.size(), 10000);
  EXPECT_NEAR(fresh.mean(), 0.1, 3 * 0.02 / 100);
}

TEST(HeadExpandTest, PerColumnAndZeroBiasModes) {
  const auto spec = default_extended_skeleton();
  auto teacher = random_head(body_only(spec), 2, 0.0, 1.0, 12);
  teacher.weights.col(1).array() += 50.0;
  const auto student = expand_head(teacher, spec, 13,
                                   {StatisticsMode::kPerColumn, BiasInit::kZero});
  const std::size_t stride = kGrid.bins_per_keypoint();
  const auto spine = student.weights.middleRows(
      static_cast<Eigen::Index>(spec.spine_set[0] * stride),
      static_cast<Eigen::Index>(stride));
  EXPECT_NEAR(spine.col(0).mean(), 0.0, 1.0);
  EXPECT_NEAR(spine.col(1).mean(), 50.0, 1.0);
  EXPECT_EQ(student.bias(static_cast<Eigen::Index>(spec.spine_set[0] * stride)), 0.0);
}

TEST(HeadExpandTest, ShapeMismatch) {
  const auto spec = default_extended_skeleton();
  auto teacher = random_head(body_only(spec), 2, 0, 1, 1);
  auto renamed = teacher;
  renamed.keypoints[0] = "tail";
  try {
    expand_head(renamed, spec, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
  auto short_head = teacher;
  short_head.keypoints.pop_back();
  EXPECT_THROW(expand_head(short_head, spec, 0), Error);
  auto dup = teacher;
  dup.row_map[1] = dup.row_map[0];
  EXPECT_THROW(check_head(dup), Error);
}

TEST(HeadExpandTest, PermutedTeacherRowsAreHonored) {
  const auto spec = default_extended_skeleton();
  const auto teacher = random_head(body_only(spec), 3, 0, 1, 14);
  auto permuted = teacher;
  const auto n = static_cast<Eigen::Index>(teacher.out_rows());
  for (Eigen::Index r = 0; r < n; ++r) {
    permuted.weights.row(r) = teacher.weights.row(n - 1 - r);
    permuted.bias(r) = teacher.bias(n - 1 - r);
    permuted.row_map[static_cast<std::size_t>(r)] =
        teacher.row_map[static_cast<std::size_t>(n - 1 - r)];
  }
  EXPECT_EQ(expand_head(permuted, spec, 1).weights, expand_head(teacher, spec, 1).weights);
}

TEST(EquivalenceTest, ZeroAtInitNonzeroAfterUpdate) {
  const auto spec = default_extended_skeleton();
  const auto teacher = random_model(body_only(spec), 20);
  auto student = expand_model(teacher, spec, 21);
  Eigen::MatrixXd probes = Eigen::MatrixXd::Random(6, 100);
  EXPECT_EQ(initial_equivalence_check(student, teacher, probes), 0.0);
  student.hidden_weights(0, 0) += 0.1;
  EXPECT_GT(initial_equivalence_check(student, teacher, probes), 0.0);
}

TEST(ContainerTest, ModelRoundTripsBitExact) {
  const auto spec = default_extended_skeleton();
  const auto model = expand_model(random_model(body_only(spec), 30), spec, 31);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_model(buf, model);
  const auto back = read_model(buf);
  EXPECT_EQ(back.hidden_weights, model.hidden_weights);
  EXPECT_EQ(back.hidden_bias, model.hidden_bias);
  EXPECT_EQ(back.head.weights, model.head.weights);
  EXPECT_EQ(back.head.bias, model.head.bias);
  EXPECT_EQ(back.head.keypoints, model.head.keypoints);
  EXPECT_EQ(back.head.row_map, model.head.row_map);
}

TEST(ContainerTest, HeadRoundTripAndLayout) {
  LinearHead h = make_head({"a"}, {1, 1, 2.0}, 1);
  h.weights(0, 0) = 1.0;
  h.weights(1, 0) = -2.0;
  h.bias << 0.5, 0.25;
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_head(buf, h);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "SPHD");
  // Trailing float64 is the last bias entry, little-endian.
  double last;
  std::memcpy(&last, bytes.data() + bytes.size() - 8, 8);
  EXPECT_EQ(last, 0.25);
  const auto back = read_head(buf);
  EXPECT_EQ(back.weights, h.weights);
  EXPECT_EQ(back.grid.bin_width, 2.0);
}

TEST(ContainerTest, RejectsCorruptInput) {
  std::stringstream bad("SPHX\x01\x00\x00\x00");
  EXPECT_THROW(read_model(bad), Error);
  LinearHead h = make_head({"a"}, {2, 2, 1.0}, 2);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_head(buf, h);
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream truncated(bytes);
  try {
    read_head(truncated);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseError);
  }
}

TEST(ManifestTest, RecordsSeedAndModes) {
  const auto h = random_head(body_only(default_extended_skeleton()), 2, 0, 1, 1);
  const auto m = expansion_manifest(42, {}, h);
  EXPECT_EQ(m["seed"], 42);
  EXPECT_EQ(m["statistics_mode"], "global");
  EXPECT_EQ(m["bias_init"], "statistics");
}

}  // namespace
}  // namespace spinepose
