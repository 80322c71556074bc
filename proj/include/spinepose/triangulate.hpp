#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "spinepose/skeleton.hpp"

namespace spinepose {

using ProjectionMatrix = Eigen::Matrix<double, 3, 4>;

/// Pinhole camera: world meters -> homogeneous pixels.
struct CameraModel {
  std::string id;
  ProjectionMatrix projection;

  /// Throws Error(kInvalidArgument) when the left 3x3 block is singular.
  void check() const;
  Eigen::Vector2d project(const Eigen::Vector3d& world) const;
  /// Optical centre (null vector of the projection).
  Eigen::Vector3d centre() const;
};

/// Camera at `position` looking at `target` with focal length `focal` px and
/// principal point (cx, cy). World up is +y; image y grows downward.
CameraModel look_at_camera(std::string id, const Eigen::Vector3d& position,
                           const Eigen::Vector3d& target, double focal,
                           double cx, double cy);

struct Observation {
  const CameraModel* camera = nullptr;
  Eigen::Vector2d pixel;
};

/// Condition number (largest over third singular value) above which the
/// design matrix counts as rank-deficient.
inline constexpr double kDegenerateCondition = 1e12;

/// Linear DLT: two rows per view, unit-normalised, solved by the smallest
/// right singular vector. Throws Error(kInsufficientViews) for fewer than
/// `min_views` observations (or fewer than 2) and Error(kDegenerateGeometry)
/// for rank-deficient systems or a solution at infinity.
Eigen::Vector3d triangulate_point(std::span<const Observation> observations,
                                  std::size_t min_views = 2);

/// First-order covariance sigma^2 (J^T J)^-1 of the reprojection-error
/// minimiser at `point`, for isotropic pixel noise of std `pixel_sigma`.
Eigen::Matrix3d first_order_covariance(std::span<const Observation> observations,
                                       const Eigen::Vector3d& point,
                                       double pixel_sigma);

using Skeleton3D = std::vector<Eigen::Vector3d>;  // one entry per keypoint

/// frames[f][v] is the 2D pose seen by cameras[v] in frame f; unlabeled
/// points are skipped.
using ViewSequence = std::vector<std::vector<Pose2D>>;

inline constexpr double kRefinementGate = 0.10;  // m

struct ValidationReport {
  double threshold = kRefinementGate;
  std::vector<double> rmse;          // m, per keypoint (0 when unmeasured)
  std::vector<std::size_t> samples;  // frames triangulated, per keypoint
  std::vector<std::size_t> failures; // frames excluded, per keypoint
  std::vector<std::size_t> flagged;  // rmse > threshold
  std::vector<std::size_t> unmeasured;  // no frame succeeded

  /// Mean of the per-keypoint rmse over measured `keypoints`.
  double mean_rmse(std::span<const std::size_t> keypoints) const;
};

/// Triangulates every keypoint per frame and compares with `reference`.
/// Frames where a keypoint has fewer than two labeled views or degenerate
/// geometry are excluded for that keypoint and counted. Throws
/// Error(kShapeMismatch) on inconsistent frame, view or keypoint counts.
ValidationReport validate_sequence(const ViewSequence& frames,
                                   std::span<const CameraModel> cameras,
                                   std::span<const Skeleton3D> reference,
                                   double threshold = kRefinementGate);

/// Keypoints whose rmse exceeds `threshold`.
std::vector<std::size_t> flag_keypoints(const ValidationReport& report, double threshold);

// Synthetic stand-ins for a calibrated capture.

/// `count` cameras on a ring of radius 3-6 m at 1-2 m height looking at the
/// subject area, with jittered aim and focal length. Deterministic in seed.
std::vector<CameraModel> make_ring_rig(std::size_t count, std::uint64_t seed);

/// Smooth motion of a 1.75 m figure over `spec` (keypoints matched by name
/// against the extended skeleton): walking on a circle, trunk flexion and
/// arm swing at 30 fps.
std::vector<Skeleton3D> synthetic_motion(const SkeletonSpec& spec, std::size_t frames,
                                         std::uint64_t seed);

struct ProjectionNoise {
  double pixel_sigma = 0.0;
  std::uint64_t seed = 0;
  /// Constant 3D offsets applied before projection, per keypoint (empty or
  /// one entry per keypoint).
  std::vector<Eigen::Vector3d> bias;
};

ViewSequence project_sequence(std::span<const Skeleton3D> reference,
                              std::span<const CameraModel> cameras,
                              const ProjectionNoise& noise);

/// Pixel noise std for which the Monte-Carlo mean rmse over `keypoints`
/// equals `target_rmse`. Runs one pass at 1 px and scales linearly.
double calibrate_pixel_noise(std::span<const CameraModel> cameras,
                             std::span<const Skeleton3D> reference,
                             std::span<const std::size_t> keypoints,
                             double target_rmse, std::uint64_t seed);

/// {"units": {"world": "m", "image": "px"}, "cameras": [{"id", "projection":
/// 3 rows of 4}]}. Reading throws Error(kParseError).
nlohmann::json cameras_to_json(std::span<const CameraModel> cameras);
std::vector<CameraModel> cameras_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const ValidationReport& r, const SkeletonSpec& spec);
std::string format_summary(const ValidationReport& r, const SkeletonSpec& spec);

}  // namespace spinepose
