#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "spinepose/headexpand.hpp"
#include "spinepose/losses.hpp"

namespace spinepose {

/// Parameters of the synthetic figure generator and its feature "sensor".
struct CorpusConfig {
  AxisGrid grid{48, 64, 4.0};  // 192 x 256 px crop, 4 px bins
  std::size_t in_dim = 64;
  double feature_noise = 0.02;        // added to normalized coordinates
  double target_sigma_bins = 1.0;     // label Gaussian width
  double spine_label_noise_px = 0.0;  // jitter on spine training labels
  std::uint64_t projection_seed = 7;  // fixed across corpora
};

/// Upper bound on spine_smoothness_loss (default T, kappa) of any generated
/// ground-truth chain, in px^2. Generated chains peak near 10.2 (torso 72 px,
/// widest segment 16.4 px); the mean is about 4.4.
inline constexpr double kCorpusSmoothnessBound = 12.0;

struct ToyInstance {
  std::vector<double> features;
  Pose2D gt_pose;     // clean geometry, used for evaluation
  Pose2D label_pose;  // training annotation (spine may carry label noise)
  std::vector<KeypointDistribution> gt_dists;  // encoded from label_pose
};

struct ToyCorpus {
  SkeletonSpec spec;
  CorpusConfig config;
  std::vector<ToyInstance> instances;
};

/// Deterministic corpus of `count` figures over `spec` (keypoints matched by
/// name against the extended skeleton). Throws Error(kInvalidArgument) for
/// count 0 or unknown keypoint names.
ToyCorpus make_synthetic_corpus(std::size_t count, std::uint64_t seed,
                                const SkeletonSpec& spec,
                                const CorpusConfig& config = {});

/// Same instances re-expressed over `spec` (a subset of the corpus skeleton).
ToyCorpus restrict_corpus(const ToyCorpus& corpus, const SkeletonSpec& spec);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double base_lr = 4e-3;
  std::size_t warmup_steps = 200;
  double final_lr_fraction = 0.05;
  std::uint64_t seed = 0;
  LossWeights weights;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  std::size_t hidden = 128;
  double holdout_fraction = 0.2;
  std::size_t eval_every = 0;  // 0: once per epoch
  double teacher_threshold_bins = 2.0;

  /// Throws Error(kInvalidArgument) when the invariants fail.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);

/// Linear warm-up from base/warmup at step 0 to base at step warmup-1, held
/// at step warmup, then cosine annealing to final_fraction*base at the last
/// step.
double learning_rate(const TrainConfig& c, std::size_t step);
std::vector<double> lr_timeline(const TrainConfig& c);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct EvalRecord {
  std::size_t step = 0;
  double body_error = 0.0;      // mean px over body keypoints
  double spine_error = 0.0;     // mean px over spine-set keypoints
  double body_retention = 0.0;  // mean symmetric KL to the teacher
};

struct TrainResult {
  ToyModel model;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
};

/// Train/held-out split used by every training entry point.
struct CorpusSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};
CorpusSplit split_corpus(std::size_t count, double holdout_fraction);

/// Fresh model over `spec` with small random weights.
ToyModel init_model(const SkeletonSpec& spec, const AxisGrid& grid,
                    std::size_t in_dim, std::size_t hidden, std::uint64_t seed);

/// Mean decode error in px over `keypoints` on the given instances.
double decode_error(const ToyModel& model, const ToyCorpus& corpus,
                    std::span<const std::size_t> instances,
                    std::span<const std::size_t> keypoints);

/// Mean over instances and teacher keypoints of
/// 0.5 (KL(p || q) + KL(q || p)), summed over both axes.
double body_retention(const ToyModel& student, const ToyModel& teacher,
                      const ToyCorpus& corpus,
                      std::span<const std::size_t> instances);

struct TeacherResult {
  ToyModel model;
  std::vector<StepRecord> steps;
  double heldout_error = 0.0;  // px
};

/// Positional-loss-only training over the corpus's body set. Throws
/// Error(kDidNotConverge) when the held-out body decode error exceeds
/// teacher_threshold_bins bins.
TeacherResult pretrain_teacher(const ToyCorpus& corpus, const TrainConfig& config);

/// Expands `teacher` to the corpus skeleton and fine-tunes with the total
/// objective. Throws Error(kNonFiniteLoss) naming the offending step.
TrainResult train_student(const ToyModel& teacher, const ToyCorpus& corpus,
                          const TrainConfig& config);

/// Continues training an existing student model on given instances.
TrainResult fine_tune(const ToyModel& student, const ToyModel& teacher,
                      const ToyCorpus& corpus, std::span<const std::size_t> train,
                      std::span<const std::size_t> heldout,
                      const TrainConfig& config);

struct AblationRow {
  std::string name;
  bool distill = false;
  bool structure = false;
  bool spine = false;
  double body_retention = 0.0;
  double spine_error = 0.0;
  double body_error = 0.0;
};

struct AblationTable {
  double teacher_error = 0.0;
  std::vector<AblationRow> rows;
  double seconds = 0.0;
};

/// The five loss configurations: baseline, +distill, +distill+spine,
/// +distill+structure, all. Disabled terms get weight zero; enabled terms
/// use `config.weights`. Every row shares teacher, corpus, and seeds.
AblationTable ablation_suite(const ToyCorpus& corpus, const TrainConfig& config);

nlohmann::json to_json(const AblationTable& t);
std::string format_table(const AblationTable& t);

}  // namespace spinepose
