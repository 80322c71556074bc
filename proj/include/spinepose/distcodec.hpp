#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinepose/skeleton.hpp"

namespace spinepose {

/// Categorical distribution over the bins of one image axis. Bin i covers
/// [i*bin_width, (i+1)*bin_width) pixels.
struct AxisDistribution {
  std::vector<double> bins;
  double bin_width = 1.0;

  std::size_t size() const { return bins.size(); }
  double center(std::size_t i) const {
    return (static_cast<double>(i) + 0.5) * bin_width;
  }
};

struct KeypointDistribution {
  AxisDistribution x;
  AxisDistribution y;
};

/// Binning of the model input. Defaults to one bin per pixel of a 192x256
/// (width x height) crop.
struct AxisGrid {
  std::size_t x_bins = 192;
  std::size_t y_bins = 256;
  double bin_width = 1.0;

  std::size_t bins_per_keypoint() const { return x_bins + y_bins; }
  double width() const { return static_cast<double>(x_bins) * bin_width; }
  double height() const { return static_cast<double>(y_bins) * bin_width; }
};

/// Which distribution leads the KL divergence. kReferenceFirst computes
/// D(reference || candidate) with reference = target or teacher.
enum class KlDirection { kReferenceFirst, kCandidateFirst };

/// Throws Error(kInvalidArgument) when `d` is not a valid distribution.
void check_distribution(const AxisDistribution& d, double tolerance = 1e-9);

/// Discretized Gaussian label centred at `coord`, floored at 1e-12 and
/// renormalized. Throws Error(kOutOfRange) outside [0, resolution*bin_width).
AxisDistribution encode_target(double coord, std::size_t axis_resolution,
                               double bin_width, double gauss_sigma_bins);

KeypointDistribution encode_keypoint(Vec2 coord, const AxisGrid& grid,
                                     double gauss_sigma_bins);

/// Max-subtracted softmax.
AxisDistribution softmax(std::span<const double> logits,
                         double bin_width = 1.0);

/// Vector-Jacobian product of softmax: returns dL/dlogits given dL/dp.
std::vector<double> softmax_backward(const AxisDistribution& p,
                                     std::span<const double> grad_p);

/// sum_i reference_i * ln(reference_i / candidate_i), with 0*ln(0/q) = 0.
/// Throws Error(kNonFiniteResult) when candidate is zero where reference is
/// positive.
double kl(const AxisDistribution& reference, const AxisDistribution& candidate);

/// Divergence between a fixed reference and a candidate in the configured
/// direction.
double directed_kl(const AxisDistribution& reference,
                   const AxisDistribution& candidate, KlDirection direction);

/// Gradient of directed_kl with respect to the candidate's softmax logits.
/// Accumulates `scale * grad` into `out`.
void directed_kl_grad_logits(const AxisDistribution& reference,
                             const AxisDistribution& candidate,
                             KlDirection direction, double scale,
                             std::span<double> out);

/// Expectation of the bin centres, in pixels.
double soft_argmax(const AxisDistribution& dist);

/// Gradient of soft_argmax with respect to the softmax logits that produced
/// `dist`, scaled and accumulated into `out`.
void soft_argmax_grad_logits(const AxisDistribution& dist, double scale,
                             std::span<double> out);

/// Index of the most probable bin; ties resolve toward the higher index.
std::size_t argmax_bin(const AxisDistribution& dist);
double max_probability(const AxisDistribution& dist);

/// Coordinates via soft_argmax, confidence = min over axes of the peak bin
/// probability. Every keypoint is reported labeled-visible.
Pose2D decode_pose(std::span<const KeypointDistribution> dists,
                   const SkeletonSpec& spec);

/// Splits a flat logit vector laid out keypoint-major (x bins then y bins)
/// into per-keypoint softmax distributions.
std::vector<KeypointDistribution> distributions_from_logits(
    std::span<const double> logits, const AxisGrid& grid);

nlohmann::json to_json(const AxisDistribution& dist);

}  // namespace spinepose
