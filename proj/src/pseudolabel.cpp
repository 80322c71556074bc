#include "spinepose/pseudolabel.hpp"

#include <algorithm>
#include <cmath>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

// Lateral head offset (as a fraction of torso length) at which the bow
// reaches its full size. Smaller offsets bow proportionally.
constexpr double kFullBowOffset = 0.1;

struct Driver {
  Vec2 at;
  double confidence;
};

Driver driver(const Pose2D& pose, const SkeletonSpec& spec, const char* name) {
  auto k = spec.find(name);
  if (!k || *k >= pose.size() || !pose.labeled(*k)) {
    throw Error(ErrorCode::kMissingDrivers,
                std::string("driver keypoint not labeled: ") + name);
  }
  return {pose.coords[*k], pose.confidence[*k]};
}

double mean(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double coefficient_of_variation(std::span<const double> v) {
  const double m = mean(v);
  if (m == 0.0) return 0.0;
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size())) / m;
}

const SkeletonSpec& coco17() {
  static const SkeletonSpec spec = [] {
    SkeletonSpec full = default_extended_skeleton();
    SkeletonSpec s;
    for (std::size_t i = 0; i < 17; ++i) {
      s.keypoints.push_back({i, full.keypoints[i].name});
      s.body_set.push_back(i);
      s.sigmas.push_back(full.sigmas[i]);
    }
    return s;
  }();
  return spec;
}

const SkeletonSpec& source_for(std::size_t triples) {
  static const SkeletonSpec body = body_only(default_extended_skeleton());
  static const SkeletonSpec annot = dataset_annotation_skeleton();
  static const SkeletonSpec full = default_extended_skeleton();
  for (const SkeletonSpec* s : {&coco17(), &body, &annot, &full}) {
    if (s->size() == triples) return *s;
  }
  throw Error(ErrorCode::kParseError,
              "detection has " + std::to_string(triples) +
                  " keypoints; expected 17, 26, 35 or 37");
}

}  // namespace

Vec2 CubicBezier::at(double t) const {
  const double u = 1.0 - t;
  return (u * u * u) * p[0] + (3 * u * u * t) * p[1] + (3 * u * t * t) * p[2] +
         (t * t * t) * p[3];
}

Vec2 CubicBezier::derivative(double t) const {
  const double u = 1.0 - t;
  return (3 * u * u) * (p[1] - p[0]) + (6 * u * t) * (p[2] - p[1]) +
         (3 * t * t) * (p[3] - p[2]);
}

std::vector<double> arc_length_params(const CubicBezier& curve,
                                      std::span<const double> fractions,
                                      std::size_t segments) {
  if (segments == 0) {
    throw Error(ErrorCode::kInvalidArgument, "quadrature needs at least one segment");
  }
  std::vector<double> cumulative(segments + 1, 0.0);
  Vec2 prev = curve.p[0];
  for (std::size_t i = 1; i <= segments; ++i) {
    const Vec2 cur = curve.at(static_cast<double>(i) / static_cast<double>(segments));
    cumulative[i] = cumulative[i - 1] + norm(cur - prev);
    prev = cur;
  }
  const double total = cumulative.back();
  std::vector<double> out;
  out.reserve(fractions.size());
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "arc-length fraction outside [0, 1]");
    }
    if (total == 0.0) {
      out.push_back(f);
      continue;
    }
    const double target = f * total;
    auto it = std::lower_bound(cumulative.begin() + 1, cumulative.end(), target);
    if (it == cumulative.end()) --it;
    const std::size_t i = static_cast<std::size_t>(it - cumulative.begin());
    const double seg = cumulative[i] - cumulative[i - 1];
    const double local = seg > 0 ? (target - cumulative[i - 1]) / seg : 0.0;
    out.push_back((static_cast<double>(i - 1) + std::clamp(local, 0.0, 1.0)) /
                  static_cast<double>(segments));
  }
  return out;
}

SpineInit init_spine(const Pose2D& pose, const SkeletonSpec& spec,
                     const SpineInitOptions& options) {
  const Driver ls = driver(pose, spec, "left_shoulder");
  const Driver rs = driver(pose, spec, "right_shoulder");
  const Driver lh = driver(pose, spec, "left_hip");
  const Driver rh = driver(pose, spec, "right_hip");
  const Vec2 hip = midpoint(lh.at, rh.at);
  const Vec2 shoulder = midpoint(ls.at, rs.at);
  const Vec2 axis = shoulder - hip;
  const double length = norm(axis);
  if (!(length > 0.0)) {
    throw Error(ErrorCode::kDegenerateTorso, "hip midpoint equals shoulder midpoint");
  }
  const Vec2 u = (1.0 / length) * axis;
  const Vec2 n{-u.y, u.x};

  Vec2 end = shoulder;
  double bow = 0.0;
  if (auto h = spec.find("head_top"); h && *h < pose.size() && pose.labeled(*h)) {
    const Vec2 head = pose.coords[*h];
    end = shoulder + options.head_base_fraction * (head - shoulder);
    const double lateral = dot(n, head - shoulder) / length;
    bow = options.bow_fraction * length *
          std::clamp(lateral / kFullBowOffset, -1.0, 1.0);
  }

  SpineInit out;
  out.curve.p = {hip, hip + (1.0 / 3.0) * axis + bow * n,
                 hip + (2.0 / 3.0) * axis + bow * n, end};
  const auto t = arc_length_params(out.curve, options.fractions,
                                   options.quadrature_segments);
  const double conf =
      std::min({ls.confidence, rs.confidence, lh.confidence, rh.confidence});
  for (std::size_t i = 0; i < kSpineChainLength; ++i) {
    out.params[i] = t[i];
    out.points[i] = out.curve.at(t[i]);
    out.confidence[i] = conf;
  }
  return out;
}

double equal_spacing_residual(std::span<const Vec2> chain) {
  if (chain.size() != kSpineChainLength) {
    throw Error(ErrorCode::kShapeMismatch,
                "spacing residual needs 9 chain points, got " +
                    std::to_string(chain.size()));
  }
  auto lengths = [&](std::size_t first, std::size_t last) {
    std::vector<double> v;
    for (std::size_t i = first; i < last; ++i) v.push_back(norm(chain[i + 1] - chain[i]));
    return v;
  };
  const double lumbar = coefficient_of_variation(lengths(0, 3));
  const double thoracic = coefficient_of_variation(lengths(3, 5));
  const double cervical = coefficient_of_variation(lengths(6, 8));
  return std::max({lumbar, thoracic, cervical});
}

void apply_spine_init(const SpineInit& init, const SkeletonSpec& spec,
                      Pose2D& pose) {
  if (spec.spine_chain.size() != kSpineChainLength || pose.size() != spec.size()) {
    throw Error(ErrorCode::kShapeMismatch, "pose does not match skeleton");
  }
  for (std::size_t i = 0; i < kSpineChainLength; ++i) {
    const std::size_t k = spec.spine_chain[i];
    pose.coords[k] = init.points[i];
    pose.visibility[k] = Visibility::kLabeledInvisible;
    pose.confidence[k] = init.confidence[i];
  }
}

nlohmann::json pseudo_label_document(const nlohmann::json& detections,
                                     const SkeletonSpec& target,
                                     const SpineInitOptions& options) {
  const nlohmann::json* list = &detections;
  if (detections.is_object()) {
    if (!detections.contains("annotations")) {
      throw Error(ErrorCode::kParseError, "detections object lacks 'annotations'");
    }
    list = &detections["annotations"];
  }
  if (!list->is_array()) throw Error(ErrorCode::kParseError, "detections must be an array");

  nlohmann::json annotations = nlohmann::json::array();
  nlohmann::json skipped = nlohmann::json::array();
  std::size_t next_id = 1;
  for (const auto& det : *list) {
    if (!det.is_object() || !det.contains("keypoints") || !det["keypoints"].is_array()) {
      throw Error(ErrorCode::kParseError, "detection lacks a keypoints array");
    }
    const auto flat = det["keypoints"].get<std::vector<double>>();
    if (flat.size() % 3 != 0) {
      throw Error(ErrorCode::kParseError, "keypoints length not a multiple of 3");
    }
    const SkeletonSpec& source = source_for(flat.size() / 3);
    Pose2D in(source.size(), Visibility::kNotLabeled);
    for (std::size_t k = 0; k < source.size(); ++k) {
      const double c = flat[3 * k + 2];
      if (c > 0.0) {
        in.coords[k] = {flat[3 * k], flat[3 * k + 1]};
        in.visibility[k] = Visibility::kLabeledVisible;
        in.confidence[k] = std::min(c, 1.0);
      }
    }
    Pose2D pose = map_pose(in, source, target);
    const std::size_t id =
        det.contains("id") ? det["id"].get<std::size_t>() : next_id;
    next_id = std::max(next_id, id) + 1;
    try {
      apply_spine_init(init_spine(pose, target, options), target, pose);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kMissingDrivers &&
          e.code() != ErrorCode::kDegenerateTorso) {
        throw;
      }
      skipped.push_back({{"id", id},
                         {"code", std::string(error_code_name(e.code()))},
                         {"message", e.what()}});
    }
    nlohmann::json kps = nlohmann::json::array();
    nlohmann::json conf = nlohmann::json::array();
    for (std::size_t k = 0; k < pose.size(); ++k) {
      kps.push_back(pose.coords[k].x);
      kps.push_back(pose.coords[k].y);
      kps.push_back(static_cast<int>(pose.visibility[k]));
      conf.push_back(pose.confidence[k]);
    }
    nlohmann::json ann = {{"id", id},
                          {"image_id", det.value("image_id", nlohmann::json())},
                          {"category_id", det.value("category_id", 1)},
                          {"keypoints", kps},
                          {"keypoint_confidence", conf},
                          {"provenance", "model-initialized"}};
    if (det.contains("bbox")) ann["bbox"] = det["bbox"];
    if (det.contains("score")) ann["score"] = det["score"];
    annotations.push_back(std::move(ann));
  }
  return {{"provenance", "model-initialized"},
          {"keypoint_names", target.names()},
          {"annotations", annotations},
          {"skipped", skipped}};
}

}  // namespace spinepose
