#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace spinepose {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  Vec2& operator-=(Vec2 o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 midpoint(Vec2 a, Vec2 b) { return 0.5 * (a + b); }
/// Counter-clockwise rotation about the origin.
inline Vec2 rotate(Vec2 a, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * a.x - s * a.y, s * a.x + c * a.y};
}

// Numeric values follow the COCO `v` flag.
enum class Visibility : int {
  kNotLabeled = 0,
  kLabeledInvisible = 1,
  kLabeledVisible = 2,
};

inline bool is_labeled(Visibility v) { return v != Visibility::kNotLabeled; }

struct KeypointId {
  std::size_t index = 0;
  std::string name;
};

struct Bone {
  std::size_t from = 0;
  std::size_t to = 0;
  friend bool operator==(const Bone&, const Bone&) = default;
};

/// Keypoint vocabulary of a model or dataset. `body_set` and `spine_set`
/// partition the keypoint indices; `spine_chain` lists the nine vertebral
/// landmarks from sacrum to C1.
struct SkeletonSpec {
  std::vector<KeypointId> keypoints;
  std::vector<std::size_t> body_set;
  std::vector<std::size_t> spine_set;
  std::vector<Bone> bones;
  std::vector<std::size_t> spine_chain;
  std::vector<double> sigmas;

  std::size_t size() const { return keypoints.size(); }
  std::optional<std::size_t> find(const std::string& name) const;
  /// Throws Error(kInvalidArgument) for an unknown name.
  std::size_t index_of(const std::string& name) const;
  bool in_spine_set(std::size_t index) const;
  bool in_body_set(std::size_t index) const;
  std::vector<std::string> names() const;
};

inline constexpr std::size_t kSpineChainLength = 9;

/// Anatomical order of the spine chain.
inline constexpr const char* kSpineChainNames[kSpineChainLength] = {
    "spine_sacrum", "spine_L5", "spine_L3", "spine_L1", "spine_T8",
    "spine_T3",     "spine_C7", "spine_C4", "spine_C1"};

/// 37-keypoint model skeleton: 17 COCO + head top, neck, hip center and six
/// feet points (26 body) followed by nine vertebral landmarks and the two
/// sternoclavicular joints (11 spine-set keypoints).
SkeletonSpec default_extended_skeleton();

/// The 35-keypoint annotation vocabulary (no neck, no hip center).
SkeletonSpec dataset_annotation_skeleton();

/// Restricts `spec` to its body set, renumbering indices. Used to build the
/// teacher vocabulary.
SkeletonSpec body_only(const SkeletonSpec& spec);

/// Returns one human-readable description per violated invariant; empty when
/// the spec is valid.
std::vector<std::string> validate_spec(const SkeletonSpec& spec);

nlohmann::json to_json(const SkeletonSpec& spec);
/// Throws Error(kParseError) on malformed documents. Does not validate
/// invariants; call validate_spec.
SkeletonSpec skeleton_from_json(const nlohmann::json& doc);

struct Pose2D {
  std::vector<Vec2> coords;
  std::vector<Visibility> visibility;
  std::vector<double> confidence;

  Pose2D() = default;
  /// All keypoints labeled-visible with confidence 1.
  explicit Pose2D(std::vector<Vec2> points);
  Pose2D(std::size_t count, Visibility v);

  std::size_t size() const { return coords.size(); }
  bool labeled(std::size_t k) const { return is_labeled(visibility[k]); }
  friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

/// Angle of a single bone against the +x axis, in (-pi, pi]. Returns nullopt
/// when the endpoints coincide exactly.
std::optional<double> bone_angle(Vec2 from, Vec2 to);

/// Per-bone angles in spec order. Throws Error(kDegenerateBone) when a bone
/// has zero length and Error(kInvalidArgument) when an endpoint is unlabeled.
std::vector<double> bone_angles(const Pose2D& pose, const SkeletonSpec& spec);

/// Maps a pose annotated in `from` onto `to` by keypoint name. Keypoints of
/// `to` absent from `from` stay unlabeled, except neck and hip_center which
/// are derived as shoulder / hip midpoints when both drivers are labeled.
Pose2D map_pose(const Pose2D& pose, const SkeletonSpec& from,
                const SkeletonSpec& to);

}  // namespace spinepose
