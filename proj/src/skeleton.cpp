#include "spinepose/skeleton.hpp"

#include <algorithm>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

// COCO-17 order, then Halpe26 extras.
constexpr const char* kBodyNames[] = {
    "nose",           "left_eye",        "right_eye",      "left_ear",
    "right_ear",      "left_shoulder",   "right_shoulder", "left_elbow",
    "right_elbow",    "left_wrist",      "right_wrist",    "left_hip",
    "right_hip",      "left_knee",       "right_knee",     "left_ankle",
    "right_ankle",    "head_top",        "neck",           "hip_center",
    "left_big_toe",   "right_big_toe",   "left_small_toe", "right_small_toe",
    "left_heel",      "right_heel"};

constexpr double kBodySigmas[] = {
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
    0.026,  // head_top
    0.026,  // neck
    0.079,  // hip_center
    0.068, 0.068, 0.066, 0.066, 0.066, 0.066};

constexpr double kTrunkSigma = 0.079;

constexpr const char* kSternoclavicularNames[] = {"left_sternoclavicular",
                                                  "right_sternoclavicular"};

// COCO limb skeleton, zero-based.
constexpr std::size_t kCocoBones[][2] = {
    {15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12},
    {5, 6},   {5, 7},   {6, 8},   {7, 9},   {8, 10},  {1, 2},  {0, 1},
    {0, 2},   {1, 3},   {2, 4},   {3, 5},   {4, 6}};

constexpr const char* kFeetBones[][2] = {
    {"left_ankle", "left_big_toe"},   {"left_ankle", "left_small_toe"},
    {"left_ankle", "left_heel"},      {"right_ankle", "right_big_toe"},
    {"right_ankle", "right_small_toe"}, {"right_ankle", "right_heel"}};

Error parse_error(const std::string& what) {
  return Error(ErrorCode::kParseError, "skeleton json: " + what);
}

}  // namespace

std::optional<std::size_t> SkeletonSpec::find(const std::string& name) const {
  for (const auto& kp : keypoints) {
    if (kp.name == name) return kp.index;
  }
  return std::nullopt;
}

std::size_t SkeletonSpec::index_of(const std::string& name) const {
  if (auto idx = find(name)) return *idx;
  throw Error(ErrorCode::kInvalidArgument, "unknown keypoint name: " + name);
}

bool SkeletonSpec::in_spine_set(std::size_t index) const {
  return std::find(spine_set.begin(), spine_set.end(), index) !=
         spine_set.end();
}

bool SkeletonSpec::in_body_set(std::size_t index) const {
  return std::find(body_set.begin(), body_set.end(), index) != body_set.end();
}

std::vector<std::string> SkeletonSpec::names() const {
  std::vector<std::string> out;
  out.reserve(keypoints.size());
  for (const auto& kp : keypoints) out.push_back(kp.name);
  return out;
}

SkeletonSpec default_extended_skeleton() {
  SkeletonSpec spec;
  auto add = [&spec](const std::string& name, double sigma) {
    spec.keypoints.push_back({spec.keypoints.size(), name});
    spec.sigmas.push_back(sigma);
    return spec.keypoints.back().index;
  };

  for (std::size_t i = 0; i < std::size(kBodyNames); ++i) {
    spec.body_set.push_back(add(kBodyNames[i], kBodySigmas[i]));
  }
  for (const char* name : kSpineChainNames) {
    const std::size_t idx = add(name, kTrunkSigma);
    spec.spine_set.push_back(idx);
    spec.spine_chain.push_back(idx);
  }
  for (const char* name : kSternoclavicularNames) {
    spec.spine_set.push_back(add(name, kTrunkSigma));
  }

  for (const auto& b : kCocoBones) spec.bones.push_back({b[0], b[1]});
  for (const auto& b : kFeetBones) {
    spec.bones.push_back({spec.index_of(b[0]), spec.index_of(b[1])});
  }
  for (std::size_t i = 0; i + 1 < spec.spine_chain.size(); ++i) {
    spec.bones.push_back({spec.spine_chain[i], spec.spine_chain[i + 1]});
  }
  spec.bones.push_back({spec.index_of("left_sternoclavicular"),
                        spec.index_of("left_shoulder")});
  spec.bones.push_back({spec.index_of("right_sternoclavicular"),
                        spec.index_of("right_shoulder")});
  spec.bones.push_back(
      {spec.index_of("hip_center"), spec.index_of("spine_sacrum")});
  return spec;
}

namespace {

// Keeps the keypoints of `spec` selected by `keep`, renumbering everything.
SkeletonSpec restrict(const SkeletonSpec& spec,
                      const std::vector<bool>& keep) {
  std::vector<std::optional<std::size_t>> remap(spec.size());
  SkeletonSpec out;
  for (const auto& kp : spec.keypoints) {
    if (!keep[kp.index]) continue;
    remap[kp.index] = out.keypoints.size();
    out.keypoints.push_back({out.keypoints.size(), kp.name});
    out.sigmas.push_back(spec.sigmas[kp.index]);
  }
  auto map_set = [&remap](const std::vector<std::size_t>& in) {
    std::vector<std::size_t> res;
    for (std::size_t i : in) {
      if (remap[i]) res.push_back(*remap[i]);
    }
    return res;
  };
  out.body_set = map_set(spec.body_set);
  out.spine_set = map_set(spec.spine_set);
  out.spine_chain = map_set(spec.spine_chain);
  for (const auto& b : spec.bones) {
    if (remap[b.from] && remap[b.to]) {
      out.bones.push_back({*remap[b.from], *remap[b.to]});
    }
  }
  return out;
}

}  // namespace

SkeletonSpec dataset_annotation_skeleton() {
  const SkeletonSpec full = default_extended_skeleton();
  std::vector<bool> keep(full.size(), true);
  keep[full.index_of("neck")] = false;
  keep[full.index_of("hip_center")] = false;
  return restrict(full, keep);
}

SkeletonSpec body_only(const SkeletonSpec& spec) {
  std::vector<bool> keep(spec.size(), false);
  for (std::size_t i : spec.body_set) {
    if (i < keep.size()) keep[i] = true;
  }
  return restrict(spec, keep);
}

std::vector<std::string> validate_spec(const SkeletonSpec& spec) {
  std::vector<std::string> violations;
  const std::size_t n = spec.size();

  std::unordered_set<std::string> seen_names;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& kp = spec.keypoints[i];
    if (kp.index != i) {
      std::ostringstream os;
      os << "keypoint indices not contiguous: position " << i
         << " has index " << kp.index;
      violations.push_back(os.str());
    }
    if (!seen_names.insert(kp.name).second) {
      violations.push_back("duplicate keypoint name: " + kp.name);
    }
  }

  std::vector<int> membership(n, 0);
  auto check_set = [&](const std::vector<std::size_t>& set, const char* label) {
    std::set<std::size_t> unique;
    for (std::size_t i : set) {
      if (i >= n) {
        violations.push_back(std::string(label) + " index out of range: " +
                             std::to_string(i));
        continue;
      }
      if (!unique.insert(i).second) {
        violations.push_back(std::string(label) + " repeats index " +
                             std::to_string(i));
        continue;
      }
      ++membership[i];
    }
  };
  check_set(spec.body_set, "body_set");
  check_set(spec.spine_set, "spine_set");
  for (std::size_t i = 0; i < n; ++i) {
    if (membership[i] == 0) {
      violations.push_back("keypoint " + std::to_string(i) +
                           " in neither body_set nor spine_set");
    } else if (membership[i] > 1 && spec.in_body_set(i) &&
               spec.in_spine_set(i)) {
      violations.push_back("keypoint " + std::to_string(i) +
                           " in both body_set and spine_set");
    }
  }

  if (spec.spine_chain.size() != kSpineChainLength) {
    violations.push_back("spine_chain length " +
                         std::to_string(spec.spine_chain.size()) + " ≠ " +
                         std::to_string(kSpineChainLength));
  }
  for (std::size_t i : spec.spine_chain) {
    if (i >= n || !spec.in_spine_set(i)) {
      violations.push_back("spine_chain index " + std::to_string(i) +
                           " not in spine_set");
    }
  }

  std::set<std::pair<std::size_t, std::size_t>> bone_keys;
  for (const auto& b : spec.bones) {
    if (b.from >= n || b.to >= n) {
      std::ostringstream os;
      os << "bone (" << b.from << ", " << b.to << ") has invalid endpoint";
      violations.push_back(os.str());
      continue;
    }
    if (b.from == b.to) {
      violations.push_back("bone self-loop at " + std::to_string(b.from));
      continue;
    }
    const auto key = std::minmax(b.from, b.to);
    if (!bone_keys.insert(key).second) {
      std::ostringstream os;
      os << "duplicate bone (" << b.from << ", " << b.to << ")";
      violations.push_back(os.str());
    }
  }
  for (std::size_t i = 0; i + 1 < spec.spine_chain.size(); ++i) {
    const auto key = std::minmax(spec.spine_chain[i], spec.spine_chain[i + 1]);
    if (!bone_keys.contains(key)) {
      std::ostringstream os;
      os << "spine_chain neighbours " << key.first << " and " << key.second
         << " not joined by a bone";
      violations.push_back(os.str());
    }
  }

  if (spec.sigmas.size() != n) {
    violations.push_back("sigmas length " + std::to_string(spec.sigmas.size()) +
                         " ≠ keypoint count " + std::to_string(n));
  }
  for (std::size_t i = 0; i < spec.sigmas.size(); ++i) {
    if (!(spec.sigmas[i] > 0.0)) {
      violations.push_back("sigma " + std::to_string(i) + " not positive");
    }
  }
  return violations;
}

nlohmann::json to_json(const SkeletonSpec& spec) {
  nlohmann::json bones = nlohmann::json::array();
  for (const auto& b : spec.bones) bones.push_back({b.from, b.to});
  return {{"keypoints", spec.names()},
          {"body_set", spec.body_set},
          {"spine_set", spec.spine_set},
          {"bones", bones},
          {"spine_chain", spec.spine_chain},
          {"sigmas", spec.sigmas}};
}

SkeletonSpec skeleton_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw parse_error("expected an object");
  for (const char* key : {"keypoints", "body_set", "spine_set", "bones",
                          "spine_chain", "sigmas"}) {
    if (!doc.contains(key) || !doc[key].is_array()) {
      throw parse_error(std::string("missing array '") + key + "'");
    }
  }
  SkeletonSpec spec;
  try {
    const auto names = doc["keypoints"].get<std::vector<std::string>>();
    for (std::size_t i = 0; i < names.size(); ++i) {
      spec.keypoints.push_back({i, names[i]});
    }
    spec.body_set = doc["body_set"].get<std::vector<std::size_t>>();
    spec.spine_set = doc["spine_set"].get<std::vector<std::size_t>>();
    spec.spine_chain = doc["spine_chain"].get<std::vector<std::size_t>>();
    spec.sigmas = doc["sigmas"].get<std::vector<double>>();
    for (const auto& b : doc["bones"]) {
      const auto pair = b.get<std::vector<std::size_t>>();
      if (pair.size() != 2) throw parse_error("bone must be a pair");
      spec.bones.push_back({pair[0], pair[1]});
    }
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(e.what());
  }
  return spec;
}

Pose2D::Pose2D(std::vector<Vec2> points)
    : coords(std::move(points)),
      visibility(coords.size(), Visibility::kLabeledVisible),
      confidence(coords.size(), 1.0) {}

Pose2D::Pose2D(std::size_t count, Visibility v)
    : coords(count), visibility(count, v), confidence(count, 0.0) {}

std::optional<double> bone_angle(Vec2 from, Vec2 to) {
  const double dx = to.x - from.x;
  const double dy = to.y - from.y;
  if (dx == 0.0 && dy == 0.0) return std::nullopt;
  const double a = std::atan2(dy, dx);
  // atan2 returns -pi for (negative x, -0.0 y); fold onto the open end.
  return a == -std::numbers::pi ? std::numbers::pi : a;
}

std::vector<double> bone_angles(const Pose2D& pose, const SkeletonSpec& spec) {
  std::vector<double> out;
  out.reserve(spec.bones.size());
  for (const auto& b : spec.bones) {
    if (b.from >= pose.size() || b.to >= pose.size()) {
      throw Error(ErrorCode::kShapeMismatch, "pose smaller than skeleton");
    }
    if (!pose.labeled(b.from) || !pose.labeled(b.to)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "bone endpoint unlabeled: " + spec.keypoints[b.from].name +
                      " -> " + spec.keypoints[b.to].name);
    }
    auto a = bone_angle(pose.coords[b.from], pose.coords[b.to]);
    if (!a) {
      throw Error(ErrorCode::kDegenerateBone,
                  "zero-length bone " + spec.keypoints[b.from].name + " -> " +
                      spec.keypoints[b.to].name);
    }
    out.push_back(*a);
  }
  return out;
}

Pose2D map_pose(const Pose2D& pose, const SkeletonSpec& from,
                const SkeletonSpec& to) {
  if (pose.size() != from.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "pose has " + std::to_string(pose.size()) +
                    " keypoints, source skeleton " +
                    std::to_string(from.size()));
  }
  Pose2D out(to.size(), Visibility::kNotLabeled);
  for (const auto& kp : to.keypoints) {
    if (auto src = from.find(kp.name)) {
      out.coords[kp.index] = pose.coords[*src];
      out.visibility[kp.index] = pose.visibility[*src];
      out.confidence[kp.index] = pose.confidence[*src];
    }
  }
  auto derive = [&](const char* target, const char* a, const char* b) {
    auto t = to.find(target);
    auto ia = to.find(a);
    auto ib = to.find(b);
    if (!t || !ia || !ib || out.labeled(*t)) return;
    if (!out.labeled(*ia) || !out.labeled(*ib)) return;
    out.coords[*t] = midpoint(out.coords[*ia], out.coords[*ib]);
    // Derived points inherit the weaker driver's visibility and confidence.
    out.visibility[*t] = static_cast<Visibility>(
        std::min(static_cast<int>(out.visibility[*ia]),
                 static_cast<int>(out.visibility[*ib])));
    out.confidence[*t] =
        std::min(out.confidence[*ia], out.confidence[*ib]);
  };
  derive("neck", "left_shoulder", "right_shoulder");
  derive("hip_center", "left_hip", "right_hip");
  return out;
}

}  // namespace spinepose
