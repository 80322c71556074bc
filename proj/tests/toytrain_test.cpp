#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "spinepose/error.hpp"
#include "spinepose/toytrain.hpp"

namespace spinepose {
namespace {

TrainConfig short_config(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.warmup_steps = steps / 10;
  c.hidden = 32;
  c.batch_size = 16;
  return c;
}

const ToyCorpus& shared_corpus() {
  static const ToyCorpus corpus =
      make_synthetic_corpus(256, 3, default_extended_skeleton());
  return corpus;
}

const TeacherResult& shared_teacher() {
  static const TeacherResult t = [] {
    TrainConfig c = short_config(600);
    c.hidden = 64;
    return pretrain_teacher(shared_corpus(), c);
  }();
  return t;
}

TEST(CorpusTest, DeterministicAndSeedSensitive) {
  const auto spec = default_extended_skeleton();
  const auto a = make_synthetic_corpus(5, 1, spec);
  const auto b = make_synthetic_corpus(5, 1, spec);
  const auto c = make_synthetic_corpus(5, 2, spec);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.instances[i].features, b.instances[i].features);
    EXPECT_EQ(a.instances[i].gt_pose.coords, b.instances[i].gt_pose.coords);
  }
  EXPECT_NE(a.instances[0].features, c.instances[0].features);
}

TEST(CorpusTest, CountZeroIsAnError) {
  EXPECT_THROW(make_synthetic_corpus(0, 1, default_extended_skeleton()), Error);
}

TEST(CorpusTest, GroundTruthChainsStayBelowDeclaredBound) {
  const auto corpus = make_synthetic_corpus(2000, 9, default_extended_skeleton());
  for (const auto& inst : corpus.instances) {
    std::vector<Vec2> chain;
    for (std::size_t k : corpus.spec.spine_chain) chain.push_back(inst.gt_pose.coords[k]);
    ASSERT_LT(spine_smoothness_loss(chain, 16.0, 0.25), kCorpusSmoothnessBound);
  }
}

TEST(CorpusTest, CoordinatesInsideCropAndFeaturesFinite) {
  const auto& corpus = shared_corpus();
  for (const auto& inst : corpus.instances) {
    ASSERT_EQ(inst.features.size(), corpus.config.in_dim);
    for (double f : inst.features) ASSERT_TRUE(std::isfinite(f));
    for (Vec2 v : inst.gt_pose.coords) {
      ASSERT_GE(v.x, 0.0);
      ASSERT_LT(v.x, corpus.config.grid.width());
      ASSERT_GE(v.y, 0.0);
      ASSERT_LT(v.y, corpus.config.grid.height());
    }
  }
}

TEST(CorpusTest, DerivedKeypointsAreMidpoints) {
  const auto& corpus = shared_corpus();
  const auto& s = corpus.spec;
  const auto& p = corpus.instances[0].gt_pose.coords;
  const Vec2 neck = midpoint(p[s.index_of("left_shoulder")], p[s.index_of("right_shoulder")]);
  EXPECT_NEAR(norm(p[s.index_of("neck")] - neck), 0.0, 1e-12);
  const Vec2 hip = midpoint(p[s.index_of("left_hip")], p[s.index_of("right_hip")]);
  EXPECT_NEAR(norm(p[s.index_of("hip_center")] - hip), 0.0, 1e-12);
}

TEST(CorpusTest, LabelNoiseOnlyTouchesSpine) {
  CorpusConfig cfg;
  cfg.spine_label_noise_px = 3.0;
  const auto spec = default_extended_skeleton();
  const auto noisy = make_synthetic_corpus(4, 1, spec, cfg);
  const auto clean = make_synthetic_corpus(4, 1, spec);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(noisy.instances[i].gt_pose.coords, clean.instances[i].gt_pose.coords);
    for (std::size_t k = 0; k < spec.size(); ++k) {
      const bool moved = !(noisy.instances[i].label_pose.coords[k] ==
                           noisy.instances[i].gt_pose.coords[k]);
      EXPECT_EQ(moved, spec.in_spine_set(k));
    }
  }
}

TEST(ScheduleTest, DefaultsAndShape) {
  const TrainConfig c;
  EXPECT_EQ(c.base_lr, 4e-3);
  EXPECT_EQ(c.final_lr_fraction, 0.05);
  EXPECT_NEAR(learning_rate(c, 0), c.base_lr / 200.0, 1e-18);
  EXPECT_NEAR(learning_rate(c, 200), c.base_lr, 1e-12);
  EXPECT_NEAR(learning_rate(c, 1999), 0.05 * c.base_lr, 1e-12);
  const auto lr = lr_timeline(c);
  for (std::size_t s = 1; s < 200; ++s) EXPECT_GT(lr[s], lr[s - 1]);
  for (std::size_t s = 201; s < 2000; ++s) EXPECT_LE(lr[s], lr[s - 1]);
  EXPECT_NEAR(*std::max_element(lr.begin(), lr.end()), c.base_lr, 1e-12);
}

TEST(ScheduleTest, CosineMatchesClosedForm) {
  TrainConfig c;
  c.steps = 102;
  c.warmup_steps = 1;
  // Halfway through the decay the cosine factor is exactly 0.5.
  EXPECT_NEAR(learning_rate(c, 51), 0.5 * (c.base_lr + 0.05 * c.base_lr), 1e-15);
}

TEST(ScheduleTest, InvalidConfigs) {
  TrainConfig c;
  c.warmup_steps = c.steps;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.final_lr_fraction = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c.final_lr_fraction = 1.5;
  EXPECT_THROW(c.validate(), Error);
}

TEST(TeacherTest, ConvergesWithoutSpineRows) {
  const auto& t = shared_teacher();
  const auto body = body_only(default_extended_skeleton());
  EXPECT_EQ(t.model.head.keypoints, body.names());
  EXPECT_EQ(t.model.head.out_rows(), body.size() * shared_corpus().config.grid.bins_per_keypoint());
  EXPECT_LE(t.heldout_error, 2.0 * shared_corpus().config.grid.bin_width);
}

TEST(TeacherTest, LossTrendsDownOverTrailingWindow) {
  const auto& steps = shared_teacher().steps;
  ASSERT_GE(steps.size(), 100u);
  double last = 0, prev = 0;
  for (std::size_t i = steps.size() - 50; i < steps.size(); ++i) last += steps[i].loss.total;
  for (std::size_t i = steps.size() - 100; i < steps.size() - 50; ++i) prev += steps[i].loss.total;
  EXPECT_LE(last, prev * 1.02);
  EXPECT_LT(steps.back().loss.total, steps.front().loss.total);
}

TEST(TeacherTest, ImpossibleThresholdRaises) {
  TrainConfig c = short_config(5);
  c.teacher_threshold_bins = 1e-6;
  try {
    pretrain_teacher(shared_corpus(), c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDidNotConverge);
  }
}

TEST(StudentTest, RetentionZeroAtInitAndSpineImproves) {
  const auto& teacher = shared_teacher().model;
  TrainConfig c = short_config(300);
  c.hidden = 64;
  c.eval_every = 300;
  const auto run = train_student(teacher, shared_corpus(), c);
  ASSERT_EQ(run.evals.size(), 2u);
  EXPECT_EQ(run.evals.front().body_retention, 0.0);
  EXPECT_LT(run.evals.back().spine_error, run.evals.front().spine_error);
  ASSERT_EQ(run.steps.size(), 300u);
  for (std::size_t s = 0; s < 300; ++s) {
    EXPECT_EQ(run.steps[s].lr, learning_rate(c, s));
  }
}

TEST(StudentTest, BitIdenticalTimelines) {
  const auto& teacher = shared_teacher().model;
  TrainConfig c = short_config(20);
  c.hidden = 64;
  const auto a = train_student(teacher, shared_corpus(), c);
  const auto b = train_student(teacher, shared_corpus(), c);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].loss.total, b.steps[i].loss.total);
  }
  EXPECT_EQ(a.model.head.weights, b.model.head.weights);
}

TEST(StudentTest, DistillationKeepsBodyCloserToTeacher) {
  const auto& teacher = shared_teacher().model;
  TrainConfig c = short_config(300);
  c.hidden = 64;
  c.eval_every = 300;
  c.weights.gamma1 = c.weights.gamma2 = 0;
  const auto with = train_student(teacher, shared_corpus(), c);
  c.weights.beta = 0;
  const auto without = train_student(teacher, shared_corpus(), c);
  EXPECT_GT(without.evals.back().body_retention, 0.0);
  EXPECT_LT(with.evals.back().body_retention, without.evals.back().body_retention);
}

TEST(StudentTest, NonFiniteInputAbortsWithStep) {
  auto corpus = shared_corpus();
  for (auto& inst : corpus.instances) inst.features[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig c = short_config(10);
  c.hidden = 64;
  try {
    train_student(shared_teacher().model, corpus, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(StudentTest, DefaultConfigStableAcrossSeeds) {
  const auto& teacher = shared_teacher().model;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TrainConfig c = short_config(40);
    c.hidden = 64;
    c.warmup_steps = 2;
    c.seed = seed;
    EXPECT_NO_THROW(train_student(teacher, shared_corpus(), c)) << "seed " << seed;
  }
}

TEST(AblationTest, RowsAndFlags) {
  TrainConfig c = short_config(30);
  c.hidden = 16;
  c.teacher_threshold_bins = 100;
  const auto corpus = make_synthetic_corpus(64, 4, default_extended_skeleton());
  const auto t = ablation_suite(corpus, c);
  ASSERT_EQ(t.rows.size(), 5u);
  EXPECT_EQ(t.rows[0].name, "baseline");
  EXPECT_FALSE(t.rows[0].distill || t.rows[0].structure || t.rows[0].spine);
  EXPECT_TRUE(t.rows[4].distill && t.rows[4].structure && t.rows[4].spine);
  EXPECT_TRUE(t.rows[2].spine && !t.rows[2].structure);
  EXPECT_TRUE(t.rows[3].structure && !t.rows[3].spine);
  const auto j = to_json(t);
  EXPECT_EQ(j["rows"].size(), 5u);
  EXPECT_NE(format_table(t).find("+distill+structure"), std::string::npos);
}

TEST(ModelTest, CheckpointRoundTrip) {
  const auto& m = shared_teacher().model;
  const std::string path = ::testing::TempDir() + "/teacher.sphd";
  save_model(path, m);
  const auto back = load_model(path);
  EXPECT_EQ(back.hidden_weights, m.hidden_weights);
  EXPECT_EQ(back.head.weights, m.head.weights);
}

}  // namespace
}  // namespace spinepose
