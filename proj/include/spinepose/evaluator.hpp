#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinepose/skeleton.hpp"

namespace spinepose {

struct GtInstance {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  Pose2D pose;
  double area = 0.0;  // OKS scale s^2
};

struct Prediction {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  Pose2D pose;
  double score = 0.0;
};

struct EvalSubset {
  std::string name;
  std::vector<std::size_t> keypoints;
};

/// body (body set without feet), feet, spine (spine set), overall.
std::vector<EvalSubset> default_subsets(const SkeletonSpec& spec);

/// Mean over labeled gt keypoints in `subset` of
/// exp(-d^2 / (2 area sigma_k^2)). Throws Error(kNoLabeledKeypoints).
double oks(const Pose2D& gt, double area, const Pose2D& pred,
           std::span<const std::size_t> subset, std::span<const double> sigmas);

/// The ten OKS thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> oks_thresholds();
inline constexpr std::size_t kRecallPoints = 101;

struct ThresholdResult {
  double threshold = 0.0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t positives = 0;  // gt instances with labeled subset keypoints
  double ap = 0.0;            // mean of the interpolated curve
  double recall = 0.0;        // final recall
  std::vector<double> precision;  // interpolated at r = 0, 0.01, ..., 1
};

struct MatchEntry {
  double threshold = 0.0;
  std::int64_t prediction_id = 0;
  std::optional<std::int64_t> gt_id;
  double oks = 0.0;       // with the matched gt, else 0
  bool ignored = false;  // absorbed by an instance not scored in the subset
};

struct SubsetResult {
  std::string name;
  double ap = 0.0;
  double ar = 0.0;
  std::vector<ThresholdResult> thresholds;
  std::vector<MatchEntry> matches;
};

struct EvalResult {
  std::vector<SubsetResult> subsets;
  const SubsetResult& subset(const std::string& name) const;
};

struct EvalOptions {
  std::size_t max_detections = 20;  // per image, by score
  bool keep_match_log = true;
};

/// COCO-style keypoint AP/AR. Per image and threshold, predictions in
/// (score desc, id asc) order take the unmatched gt of highest OKS >= the
/// threshold (ties to the lower gt id). gt instances without a labeled
/// keypoint in a subset do not count as positives; a prediction that matches
/// none of the scored instances but reaches the threshold against one of
/// those (OKS over all its labeled keypoints) is ignored rather than counted
/// as a false positive. Throws
/// Error(kDuplicatePredictionId) and Error(kUnknownImageId).
EvalResult evaluate(std::span<const GtInstance> gt,
                    std::span<const Prediction> predictions,
                    const SkeletonSpec& spec,
                    std::span<const EvalSubset> subsets,
                    const EvalOptions& options = {});

enum class BboxMode {
  kGt,        // s^2 = gt bbox width * height
  kProvided,  // s^2 = the gt "area" field
};

BboxMode bbox_mode_from_string(const std::string& s);

struct GtSet {
  std::vector<std::int64_t> image_ids;
  std::vector<GtInstance> instances;
};

/// COCO keypoint ground truth ({"images", "annotations"}); keypoints are flat
/// (x, y, v) triples over `spec`, v > 0 labeled. Throws Error(kParseError).
GtSet gt_from_json(const nlohmann::json& doc, const SkeletonSpec& spec,
                   BboxMode mode);

/// COCO results array (or {"annotations": [...]}). Entries without "id" get
/// their 1-based position. Throws Error(kParseError).
std::vector<Prediction> predictions_from_json(const nlohmann::json& doc,
                                              const SkeletonSpec& spec);

/// As evaluate, additionally rejecting predictions on images absent from
/// `gt.image_ids`.
EvalResult evaluate(const GtSet& gt, std::span<const Prediction> predictions,
                    const SkeletonSpec& spec, std::span<const EvalSubset> subsets,
                    const EvalOptions& options = {});

/// Per-keypoint sigmas from a JSON array (one per keypoint) or an object
/// mapping names to values (others keep `spec`'s defaults).
std::vector<double> sigmas_from_json(const nlohmann::json& doc,
                                     const SkeletonSpec& spec);

nlohmann::json to_json(const EvalResult& r);
/// One header row of subset names, AP / AR columns per subset.
std::string format_table(const EvalResult& r, const std::string& label);

}  // namespace spinepose
