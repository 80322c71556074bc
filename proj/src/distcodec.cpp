#include "spinepose/distcodec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

constexpr double kTargetFloor = 1e-12;

void check_same_shape(const AxisDistribution& a, const AxisDistribution& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "distribution sizes differ: " + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()));
  }
}

}  // namespace

void check_distribution(const AxisDistribution& d, double tolerance) {
  if (d.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "distribution needs >= 2 bins");
  }
  if (!(d.bin_width > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "bin_width must be positive");
  }
  double sum = 0.0;
  for (double p : d.bins) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "distribution entry negative or non-finite");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > tolerance) {
    throw Error(ErrorCode::kInvalidArgument,
                "distribution sums to " + std::to_string(sum));
  }
}

AxisDistribution encode_target(double coord, std::size_t axis_resolution,
                               double bin_width, double gauss_sigma_bins) {
  if (axis_resolution < 2 || !(bin_width > 0.0) || !(gauss_sigma_bins > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                "encode_target: resolution >= 2, bin_width > 0, sigma > 0");
  }
  const double extent = static_cast<double>(axis_resolution) * bin_width;
  if (!(coord >= 0.0 && coord < extent)) {
    throw Error(ErrorCode::kOutOfRange, "coordinate " + std::to_string(coord) +
                                            " outside [0, " +
                                            std::to_string(extent) + ")");
  }
  AxisDistribution out;
  out.bin_width = bin_width;
  out.bins.resize(axis_resolution);
  const double mu = coord / bin_width;
  const double inv = 1.0 / (2.0 * gauss_sigma_bins * gauss_sigma_bins);
  double sum = 0.0;
  for (std::size_t i = 0; i < axis_resolution; ++i) {
    const double d = static_cast<double>(i) + 0.5 - mu;
    const double v = std::max(std::exp(-d * d * inv), kTargetFloor);
    out.bins[i] = v;
    sum += v;
  }
  for (double& v : out.bins) v /= sum;
  return out;
}

KeypointDistribution encode_keypoint(Vec2 coord, const AxisGrid& grid,
                                     double gauss_sigma_bins) {
  return {encode_target(coord.x, grid.x_bins, grid.bin_width, gauss_sigma_bins),
          encode_target(coord.y, grid.y_bins, grid.bin_width,
                        gauss_sigma_bins)};
}

AxisDistribution softmax(std::span<const double> logits, double bin_width) {
  AxisDistribution out;
  out.bin_width = bin_width;
  out.bins.resize(logits.size());
  if (logits.empty()) return out;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.bins[i] = std::exp(logits[i] - peak);
    sum += out.bins[i];
  }
  for (double& v : out.bins) v /= sum;
  return out;
}

std::vector<double> softmax_backward(const AxisDistribution& p,
                                     std::span<const double> grad_p) {
  if (grad_p.size() != p.size()) {
    throw Error(ErrorCode::kShapeMismatch, "softmax_backward size mismatch");
  }
  double inner = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) inner += p.bins[i] * grad_p[i];
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i] = p.bins[i] * (grad_p[i] - inner);
  }
  return out;
}

double kl(const AxisDistribution& reference,
          const AxisDistribution& candidate) {
  check_same_shape(reference, candidate);
  double total = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double r = reference.bins[i];
    if (r == 0.0) continue;
    const double q = candidate.bins[i];
    if (!(q > 0.0)) {
      throw Error(ErrorCode::kNonFiniteResult,
                  "candidate has zero mass at bin " + std::to_string(i) +
                      " where reference is positive");
    }
    total += r * std::log(r / q);
  }
  // Rounding can leave a tiny negative value for identical inputs.
  return std::max(total, 0.0);
}

double directed_kl(const AxisDistribution& reference,
                   const AxisDistribution& candidate, KlDirection direction) {
  return direction == KlDirection::kReferenceFirst ? kl(reference, candidate)
                                                   : kl(candidate, reference);
}

void directed_kl_grad_logits(const AxisDistribution& reference,
                             const AxisDistribution& candidate,
                             KlDirection direction, double scale,
                             std::span<double> out) {
  check_same_shape(reference, candidate);
  const std::size_t n = candidate.size();
  if (out.size() != n) {
    throw Error(ErrorCode::kShapeMismatch, "kl gradient buffer size");
  }
  const auto& q = candidate.bins;
  const auto& r = reference.bins;
  if (direction == KlDirection::kReferenceFirst) {
    const double mass = std::accumulate(r.begin(), r.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      out[j] += scale * (q[j] * mass - r[j]);
    }
    return;
  }
  // d/dz_j sum_i q_i ln(q_i/r_i) = q_j (ln(q_j/r_j) - KL(q||r)).
  std::vector<double> log_ratio(n);
  double value = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!(r[j] > 0.0)) {
      throw Error(ErrorCode::kNonFiniteResult,
                  "reference has zero mass where candidate is positive");
    }
    log_ratio[j] = q[j] > 0.0 ? std::log(q[j] / r[j]) : 0.0;
    value += q[j] * log_ratio[j];
  }
  for (std::size_t j = 0; j < n; ++j) {
    out[j] += scale * q[j] * (log_ratio[j] - value);
  }
}

double soft_argmax(const AxisDistribution& dist) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    acc += dist.bins[i] * (static_cast<double>(i) + 0.5);
  }
  return acc * dist.bin_width;
}

void soft_argmax_grad_logits(const AxisDistribution& dist, double scale,
                             std::span<double> out) {
  if (out.size() != dist.size()) {
    throw Error(ErrorCode::kShapeMismatch, "soft_argmax gradient buffer size");
  }
  const double mean = soft_argmax(dist);
  for (std::size_t j = 0; j < dist.size(); ++j) {
    out[j] += scale * dist.bins[j] * (dist.center(j) - mean);
  }
}

std::size_t argmax_bin(const AxisDistribution& dist) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < dist.size(); ++i) {
    if (dist.bins[i] >= dist.bins[best]) best = i;
  }
  return best;
}

double max_probability(const AxisDistribution& dist) {
  return dist.bins.empty()
             ? 0.0
             : *std::max_element(dist.bins.begin(), dist.bins.end());
}

Pose2D decode_pose(std::span<const KeypointDistribution> dists,
                   const SkeletonSpec& spec) {
  if (dists.size() != spec.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "decode_pose: " + std::to_string(dists.size()) +
                    " distributions for " + std::to_string(spec.size()) +
                    " keypoints");
  }
  Pose2D pose(spec.size(), Visibility::kLabeledVisible);
  for (std::size_t k = 0; k < dists.size(); ++k) {
    pose.coords[k] = {soft_argmax(dists[k].x), soft_argmax(dists[k].y)};
    pose.confidence[k] =
        std::min(max_probability(dists[k].x), max_probability(dists[k].y));
  }
  return pose;
}

std::vector<KeypointDistribution> distributions_from_logits(
    std::span<const double> logits, const AxisGrid& grid) {
  const std::size_t stride = grid.bins_per_keypoint();
  if (stride == 0 || logits.size() % stride != 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "logit vector of size " + std::to_string(logits.size()) +
                    " is not a multiple of " + std::to_string(stride));
  }
  const std::size_t count = logits.size() / stride;
  std::vector<KeypointDistribution> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto row = logits.subspan(k * stride, stride);
    out.push_back({softmax(row.first(grid.x_bins), grid.bin_width),
                   softmax(row.subspan(grid.x_bins), grid.bin_width)});
  }
  return out;
}

nlohmann::json to_json(const AxisDistribution& dist) {
  return {{"bin_width", dist.bin_width}, {"bins", dist.bins}};
}

}  // namespace spinepose
