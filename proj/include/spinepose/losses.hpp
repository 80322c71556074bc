#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinepose/distcodec.hpp"
#include "spinepose/skeleton.hpp"

namespace spinepose {

/// Weights of the combined objective plus the spine smoothing parameters.
/// `smoothing_threshold` is the distance (px) below which the smoothing gate
/// stays near 1; `smoothing_sharpness` (1/px) sets how fast it turns toward
/// 0.5 past that distance.
struct LossWeights {
  double alpha = 5.0;
  double beta = 2.5;
  double gamma1 = 0.1;
  double gamma2 = 0.5;
  double smoothing_threshold = 16.0;
  double smoothing_sharpness = 0.25;
  KlDirection kl_direction = KlDirection::kReferenceFirst;

  /// Throws Error(kInvalidArgument) on negative weights or non-positive
  /// smoothing parameters.
  void validate() const;
};

struct LossBreakdown {
  double pos = 0.0;
  double distill = 0.0;
  double structure = 0.0;
  double spine = 0.0;
  double total = 0.0;
};

nlohmann::json to_json(const LossBreakdown& b);
nlohmann::json to_json(const LossWeights& w);

/// Sum of per-axis KL terms over keypoints whose visibility is labeled.
/// An empty `visibility` span means every keypoint is labeled.
double positional_loss(std::span<const KeypointDistribution> pred,
                       std::span<const KeypointDistribution> target,
                       std::span<const Visibility> visibility = {},
                       KlDirection direction = KlDirection::kReferenceFirst);

/// Sum over the body set of KL(teacher, student). `teacher[j]` corresponds to
/// keypoint `spec.body_set[j]`; spine keypoints never contribute.
double distillation_loss(std::span<const KeypointDistribution> student,
                         std::span<const KeypointDistribution> teacher,
                         const SkeletonSpec& spec,
                         KlDirection direction = KlDirection::kReferenceFirst);

/// Wrapped bone-orientation difference, (1 / (pi |B|)) sum |dphi_b|, over
/// bones labeled in both poses and non-degenerate in both. Throws
/// Error(kEmptyBoneSet) when no bone qualifies.
double structure_loss(const Pose2D& pred, const Pose2D& gt,
                      const SkeletonSpec& spec);

/// As structure_loss, additionally accumulating d(loss)/d(pred coord) * scale
/// into `grad` (one entry per keypoint). The subgradient of |dphi| at 0 is 0.
double structure_loss_grad(const Pose2D& pred, const Pose2D& gt,
                           const SkeletonSpec& spec, double scale,
                           std::span<Vec2> grad);

/// Sigmoid-gated recursive smoothing of an ordered chain:
/// s~_1 = s_1, s~_i = s~_{i-1} + w_i (s_i - s~_{i-1}),
/// w_i = 1 - 0.5 sigmoid(sharpness (|s_i - s~_{i-1}| - threshold)).
std::vector<Vec2> smooth_spine(std::span<const Vec2> chain, double threshold,
                               double sharpness);

/// The gate values w_2..w_n produced while smoothing `chain` (size n - 1).
std::vector<double> smoothing_gates(std::span<const Vec2> chain,
                                    double threshold, double sharpness);

/// (1/n) sum_i |s_i - s~_i|^2.
double spine_smoothness_loss(std::span<const Vec2> chain, double threshold,
                             double sharpness);

/// As spine_smoothness_loss, accumulating scale * d(loss)/d(chain) into
/// `grad`. Reverse-mode through the recurrence: every s~_i depends on all
/// s_j with j <= i.
double spine_smoothness_grad(std::span<const Vec2> chain, double threshold,
                             double sharpness, double scale,
                             std::span<Vec2> grad);

/// Ground truth for one training instance over the student skeleton.
struct InstanceTarget {
  Pose2D pose;
  std::vector<KeypointDistribution> dists;
};

/// One batch. `student_logits[i]` is the flat keypoint-major logit vector of
/// instance i over the full spec; `teacher[i]` holds the teacher's
/// distributions over `spec.body_set` (may be empty when beta == 0 and the
/// distillation value is not wanted).
struct LossBatch {
  std::span<const std::vector<double>> student_logits;
  std::span<const InstanceTarget> targets;
  std::span<const std::vector<KeypointDistribution>> teacher;
};

/// Batch objective. Per-instance terms are averaged over the batch; the spine
/// term averages over instances whose ground-truth chain is fully labeled.
/// Structure and spine terms use soft_argmax-decoded coordinates.
LossBreakdown total_loss(const LossBatch& batch, const SkeletonSpec& spec,
                         const AxisGrid& grid, const LossWeights& weights);

struct LossGradient {
  LossBreakdown breakdown;
  std::vector<std::vector<double>> grad;  // same layout as student_logits
};

/// Value and analytic gradient of the total objective w.r.t. every student
/// logit.
LossGradient grad_total(const LossBatch& batch, const SkeletonSpec& spec,
                        const AxisGrid& grid, const LossWeights& weights);

/// Numerically stable logistic function.
double sigmoid(double x);

/// Wraps an angle difference into (-pi, pi] via atan2(sin, cos).
double wrap_angle(double delta);

}  // namespace spinepose
