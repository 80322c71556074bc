#include "spinepose/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

Error parse_error(const std::string& what) {
  return Error(ErrorCode::kParseError, "coco json: " + what);
}

bool ranks_before(const Prediction& a, const Prediction& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

Pose2D pose_from_triples(const nlohmann::json& kps, const SkeletonSpec& spec,
                         bool is_gt) {
  if (!kps.is_array()) throw parse_error("keypoints must be an array");
  if (kps.size() != 3 * spec.size()) {
    throw parse_error("expected " + std::to_string(3 * spec.size()) +
                      " keypoint values, got " + std::to_string(kps.size()));
  }
  Pose2D pose(spec.size(), Visibility::kNotLabeled);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    pose.coords[k] = {kps[3 * k].get<double>(), kps[3 * k + 1].get<double>()};
    const double v = kps[3 * k + 2].get<double>();
    if (is_gt) {
      if (v > 0) {
        pose.visibility[k] = v >= 2 ? Visibility::kLabeledVisible
                                    : Visibility::kLabeledInvisible;
        pose.confidence[k] = 1.0;
      }
    } else {
      // Predicted keypoints all count; the third value is a score.
      pose.visibility[k] = Visibility::kLabeledVisible;
      pose.confidence[k] = std::clamp(v, 0.0, 1.0);
    }
  }
  return pose;
}

const nlohmann::json& annotation_list(const nlohmann::json& doc) {
  if (doc.is_array()) return doc;
  if (doc.is_object() && doc.contains("annotations") && doc["annotations"].is_array()) {
    return doc["annotations"];
  }
  throw parse_error("expected an array or an object with 'annotations'");
}

struct ImageWork {
  std::vector<std::size_t> gts;      // indices into gt, scored in the subset
  std::vector<std::size_t> ignored;  // indices into gt, no subset labels
  std::vector<std::size_t> preds;    // indices into predictions, ranked, capped
  std::vector<std::vector<double>> ious;         // preds x gts
  std::vector<std::vector<double>> ignored_ious;  // preds x ignored
};

bool any_labeled(const Pose2D& pose, std::span<const std::size_t> keypoints) {
  for (std::size_t k : keypoints) {
    if (pose.labeled(k)) return true;
  }
  return false;
}

SubsetResult evaluate_subset(std::span<const GtInstance> gt,
                             std::span<const Prediction> predictions,
                             const SkeletonSpec& spec, const EvalSubset& subset,
                             const EvalOptions& options) {
  SubsetResult out;
  out.name = subset.name;

  std::vector<std::size_t> all(spec.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  std::vector<std::size_t> by_id(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) by_id[i] = i;
  std::sort(by_id.begin(), by_id.end(),
            [&](std::size_t a, std::size_t b) { return gt[a].id < gt[b].id; });

  std::map<std::int64_t, ImageWork> images;
  std::size_t npos = 0;
  for (std::size_t i : by_id) {
    auto& img = images[gt[i].image_id];
    if (any_labeled(gt[i].pose, subset.keypoints)) {
      img.gts.push_back(i);
      ++npos;
    } else if (any_labeled(gt[i].pose, all)) {
      img.ignored.push_back(i);
    }
  }
  std::vector<std::size_t> ranked(predictions.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) ranked[i] = i;
  std::sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    return ranks_before(predictions[a], predictions[b]);
  });
  for (std::size_t p : ranked) {
    auto& img = images[predictions[p].image_id];
    if (img.preds.size() < options.max_detections) img.preds.push_back(p);
  }
  for (auto& [id, img] : images) {
    img.ious.assign(img.preds.size(), std::vector<double>(img.gts.size(), 0.0));
    img.ignored_ious.assign(img.preds.size(), std::vector<double>(img.ignored.size(), 0.0));
    for (std::size_t d = 0; d < img.preds.size(); ++d) {
      const Pose2D& pp = predictions[img.preds[d]].pose;
      for (std::size_t g = 0; g < img.gts.size(); ++g) {
        const GtInstance& t = gt[img.gts[g]];
        img.ious[d][g] = oks(t.pose, t.area, pp, subset.keypoints, spec.sigmas);
      }
      // Unscored instances are compared on every labeled keypoint.
      for (std::size_t g = 0; g < img.ignored.size(); ++g) {
        const GtInstance& t = gt[img.ignored[g]];
        img.ignored_ious[d][g] = oks(t.pose, t.area, pp, all, spec.sigmas);
      }
    }
  }

  // Global ranking of the kept predictions.
  std::vector<std::size_t> kept;
  for (const auto& [id, img] : images) kept.insert(kept.end(), img.preds.begin(), img.preds.end());
  std::sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    return ranks_before(predictions[a], predictions[b]);
  });

  // Highest OKS >= thr among unused columns; ties keep the lower gt id.
  auto best_match = [](const std::vector<double>& row, const std::vector<char>& taken,
                       double thr) {
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < row.size(); ++g) {
      if (taken[g] || row[g] < thr) continue;
      if (!best || row[g] > row[*best]) best = g;
    }
    return best;
  };

  double ap_sum = 0.0, ar_sum = 0.0;
  for (double thr : oks_thresholds()) {
    // 0 false positive, 1 true positive, 2 ignored
    std::vector<char> outcome(predictions.size(), 0);
    for (const auto& [id, img] : images) {
      std::vector<char> taken(img.gts.size(), 0);
      std::vector<char> taken_ignored(img.ignored.size(), 0);
      for (std::size_t d = 0; d < img.preds.size(); ++d) {
        MatchEntry m;
        m.threshold = thr;
        m.prediction_id = predictions[img.preds[d]].id;
        if (auto g = best_match(img.ious[d], taken, thr)) {
          taken[*g] = 1;
          outcome[img.preds[d]] = 1;
          m.gt_id = gt[img.gts[*g]].id;
          m.oks = img.ious[d][*g];
        } else if (auto h = best_match(img.ignored_ious[d], taken_ignored, thr)) {
          taken_ignored[*h] = 1;
          outcome[img.preds[d]] = 2;
          m.gt_id = gt[img.ignored[*h]].id;
          m.oks = img.ignored_ious[d][*h];
          m.ignored = true;
        }
        if (options.keep_match_log) out.matches.push_back(m);
      }
    }

    ThresholdResult tr;
    tr.threshold = thr;
    tr.positives = npos;
    std::vector<double> precision, recall;
    std::size_t ctp = 0, cfp = 0;
    for (std::size_t p : kept) {
      if (outcome[p] == 2) continue;
      if (outcome[p] == 1) ++ctp; else ++cfp;
      precision.push_back(static_cast<double>(ctp) / static_cast<double>(ctp + cfp));
      recall.push_back(npos ? static_cast<double>(ctp) / static_cast<double>(npos) : 0.0);
    }
    tr.true_positives = ctp;
    tr.false_positives = cfp;
    for (std::size_t i = precision.size(); i-- > 1;) {
      precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    tr.precision.assign(kRecallPoints, 0.0);
    if (npos > 0) {
      for (std::size_t r = 0; r < kRecallPoints; ++r) {
        const double level = static_cast<double>(r) / 100.0;
        auto it = std::lower_bound(recall.begin(), recall.end(), level);
        if (it != recall.end()) tr.precision[r] = precision[static_cast<std::size_t>(it - recall.begin())];
      }
      tr.recall = static_cast<double>(ctp) / static_cast<double>(npos);
    }
    double s = 0.0;
    for (double q : tr.precision) s += q;
    tr.ap = s / static_cast<double>(kRecallPoints);
    ap_sum += tr.ap;
    ar_sum += tr.recall;
    out.thresholds.push_back(std::move(tr));
  }
  out.ap = ap_sum / static_cast<double>(out.thresholds.size());
  out.ar = ar_sum / static_cast<double>(out.thresholds.size());
  return out;
}

EvalResult evaluate_known(std::span<const GtInstance> gt,
                          std::span<const Prediction> predictions,
                          const SkeletonSpec& spec,
                          std::span<const EvalSubset> subsets,
                          const EvalOptions& options,
                          const std::set<std::int64_t>& images) {
  std::set<std::int64_t> ids;
  for (const auto& p : predictions) {
    if (!ids.insert(p.id).second) {
      throw Error(ErrorCode::kDuplicatePredictionId,
                  "duplicate prediction id " + std::to_string(p.id));
    }
    if (!images.count(p.image_id)) {
      throw Error(ErrorCode::kUnknownImageId,
                  "prediction " + std::to_string(p.id) + " refers to unknown image " +
                      std::to_string(p.image_id));
    }
    if (p.pose.size() != spec.size()) {
      throw Error(ErrorCode::kShapeMismatch, "prediction pose does not match skeleton");
    }
  }
  for (const auto& g : gt) {
    if (g.pose.size() != spec.size()) {
      throw Error(ErrorCode::kShapeMismatch, "gt pose does not match skeleton");
    }
  }
  EvalResult r;
  for (const auto& s : subsets) {
    for (std::size_t k : s.keypoints) {
      if (k >= spec.size()) {
        throw Error(ErrorCode::kOutOfRange, "subset " + s.name + " has index out of range");
      }
    }
    r.subsets.push_back(evaluate_subset(gt, predictions, spec, s, options));
  }
  return r;
}

}  // namespace

std::vector<EvalSubset> default_subsets(const SkeletonSpec& spec) {
  EvalSubset body{"body", {}}, feet{"feet", {}}, spine{"spine", spec.spine_set},
      overall{"overall", {}};
  for (std::size_t k : spec.body_set) {
    const std::string& n = spec.keypoints[k].name;
    const bool is_foot = n.find("toe") != std::string::npos ||
                         n.find("heel") != std::string::npos;
    (is_foot ? feet : body).keypoints.push_back(k);
  }
  for (std::size_t k = 0; k < spec.size(); ++k) overall.keypoints.push_back(k);
  return {body, feet, spine, overall};
}

double oks(const Pose2D& gt, double area, const Pose2D& pred,
           std::span<const std::size_t> subset, std::span<const double> sigmas) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k : subset) {
    if (!gt.labeled(k)) continue;
    const Vec2 d = pred.coords[k] - gt.coords[k];
    const double s = sigmas[k];
    sum += std::exp(-dot(d, d) / (2.0 * area * s * s));
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::kNoLabeledKeypoints, "no labeled gt keypoint in subset");
  return sum / static_cast<double>(n);
}

std::vector<double> oks_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

const SubsetResult& EvalResult::subset(const std::string& name) const {
  for (const auto& s : subsets) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::kInvalidArgument, "no subset named " + name);
}

EvalResult evaluate(std::span<const GtInstance> gt,
                    std::span<const Prediction> predictions,
                    const SkeletonSpec& spec, std::span<const EvalSubset> subsets,
                    const EvalOptions& options) {
  std::set<std::int64_t> images;
  for (const auto& g : gt) images.insert(g.image_id);
  return evaluate_known(gt, predictions, spec, subsets, options, images);
}

EvalResult evaluate(const GtSet& gt, std::span<const Prediction> predictions,
                    const SkeletonSpec& spec, std::span<const EvalSubset> subsets,
                    const EvalOptions& options) {
  std::set<std::int64_t> images(gt.image_ids.begin(), gt.image_ids.end());
  for (const auto& g : gt.instances) images.insert(g.image_id);
  return evaluate_known(gt.instances, predictions, spec, subsets, options, images);
}

BboxMode bbox_mode_from_string(const std::string& s) {
  if (s == "gt") return BboxMode::kGt;
  if (s == "provided") return BboxMode::kProvided;
  throw Error(ErrorCode::kInvalidArgument, "bbox mode must be 'gt' or 'provided': " + s);
}

GtSet gt_from_json(const nlohmann::json& doc, const SkeletonSpec& spec, BboxMode mode) {
  if (!doc.is_object()) throw parse_error("ground truth must be an object");
  GtSet out;
  try {
    if (doc.contains("images")) {
      for (const auto& img : doc["images"]) out.image_ids.push_back(img.at("id").get<std::int64_t>());
    }
    for (const auto& a : annotation_list(doc)) {
      GtInstance g;
      g.id = a.at("id").get<std::int64_t>();
      g.image_id = a.at("image_id").get<std::int64_t>();
      g.pose = pose_from_triples(a.at("keypoints"), spec, true);
      if (mode == BboxMode::kGt) {
        const auto& b = a.at("bbox");
        if (!b.is_array() || b.size() != 4) throw parse_error("bbox must be [x, y, w, h]");
        g.area = b[2].get<double>() * b[3].get<double>();
      } else {
        g.area = a.at("area").get<double>();
      }
      if (!(g.area > 0.0)) {
        throw parse_error("annotation " + std::to_string(g.id) + " has non-positive area");
      }
      out.instances.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(e.what());
  }
  return out;
}

std::vector<Prediction> predictions_from_json(const nlohmann::json& doc,
                                              const SkeletonSpec& spec) {
  std::vector<Prediction> out;
  try {
    std::int64_t position = 0;
    for (const auto& a : annotation_list(doc)) {
      ++position;
      Prediction p;
      p.id = a.contains("id") ? a["id"].get<std::int64_t>() : position;
      p.image_id = a.at("image_id").get<std::int64_t>();
      p.score = a.at("score").get<double>();
      p.pose = pose_from_triples(a.at("keypoints"), spec, false);
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(e.what());
  }
  return out;
}

std::vector<double> sigmas_from_json(const nlohmann::json& doc, const SkeletonSpec& spec) {
  std::vector<double> sig = spec.sigmas;
  try {
    if (doc.is_array()) {
      if (doc.size() != spec.size()) {
        throw parse_error("sigmas array needs " + std::to_string(spec.size()) + " entries");
      }
      sig = doc.get<std::vector<double>>();
    } else if (doc.is_object()) {
      for (const auto& [name, v] : doc.items()) sig[spec.index_of(name)] = v.get<double>();
    } else {
      throw parse_error("sigmas must be an array or an object");
    }
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(e.what());
  }
  for (double s : sig) {
    if (!(s > 0.0)) throw Error(ErrorCode::kInvalidArgument, "sigmas must be positive");
  }
  return sig;
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json subsets = nlohmann::json::array();
  for (const auto& s : r.subsets) {
    nlohmann::json th = nlohmann::json::array();
    for (const auto& t : s.thresholds) {
      th.push_back({{"threshold", t.threshold},
                    {"ap", t.ap},
                    {"recall", t.recall},
                    {"true_positives", t.true_positives},
                    {"false_positives", t.false_positives},
                    {"positives", t.positives},
                    {"precision", t.precision}});
    }
    nlohmann::json matches = nlohmann::json::array();
    for (const auto& m : s.matches) {
      matches.push_back({{"threshold", m.threshold},
                         {"prediction_id", m.prediction_id},
                         {"gt_id", m.gt_id ? nlohmann::json(*m.gt_id) : nlohmann::json()},
                         {"oks", m.oks},
                         {"ignored", m.ignored}});
    }
    subsets.push_back({{"name", s.name},
                       {"ap", s.ap},
                       {"ar", s.ar},
                       {"thresholds", th},
                       {"matches", matches}});
  }
  return {{"subsets", subsets}};
}

std::string format_table(const EvalResult& r, const std::string& label) {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-16s", "");
  os << buf;
  for (const auto& s : r.subsets) {
    std::snprintf(buf, sizeof buf, " %-13s", s.name.c_str());
    os << buf;
  }
  os << "\n";
  std::snprintf(buf, sizeof buf, "%-16s", "");
  os << buf;
  for (std::size_t i = 0; i < r.subsets.size(); ++i) os << "    AP     AR ";
  os << "\n";
  std::snprintf(buf, sizeof buf, "%-16s", label.c_str());
  os << buf;
  for (const auto& s : r.subsets) {
    std::snprintf(buf, sizeof buf, " %6.3f %6.3f", s.ap, s.ar);
    os << buf;
  }
  os << "\n";
  return os.str();
}

}  // namespace spinepose
