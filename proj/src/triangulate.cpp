#include "spinepose/triangulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

using Eigen::Vector3d;

Vector3d rotate_about(const Vector3d& p, const Vector3d& pivot, const Vector3d& axis,
                      double angle) {
  return pivot + Eigen::AngleAxisd(angle, axis.normalized()) * (p - pivot);
}

// Standing figure, meters: y up, +x to the figure's left, +z forward.
const std::map<std::string, Vector3d>& template_pose() {
  static const std::map<std::string, Vector3d> t = [] {
    std::map<std::string, Vector3d> m;
    auto both = [&](const std::string& name, double x, double y, double z) {
      m["left_" + name] = {x, y, z};
      m["right_" + name] = {-x, y, z};
    };
    m["nose"] = {0, 1.63, 0.10};
    both("eye", 0.035, 1.67, 0.08);
    both("ear", 0.075, 1.64, 0.0);
    m["head_top"] = {0, 1.80, 0.0};
    both("shoulder", 0.19, 1.45, 0.0);
    m["neck"] = {0, 1.45, 0.0};
    both("elbow", 0.21, 1.15, -0.02);
    both("wrist", 0.22, 0.88, 0.04);
    both("hip", 0.10, 0.95, 0.0);
    m["hip_center"] = {0, 0.95, 0.0};
    both("knee", 0.10, 0.50, 0.03);
    both("ankle", 0.10, 0.08, 0.0);
    both("heel", 0.10, 0.03, -0.06);
    both("big_toe", 0.11, 0.02, 0.16);
    both("small_toe", 0.15, 0.02, 0.12);
    both("sternoclavicular", 0.03, 1.43, 0.06);
    const char* chain[] = {"spine_sacrum", "spine_L5", "spine_L3", "spine_L1", "spine_T8",
                           "spine_T3",     "spine_C7", "spine_C4", "spine_C1"};
    const double height[] = {1.00, 1.05, 1.11, 1.18, 1.30, 1.42, 1.48, 1.54, 1.60};
    const double depth[] = {-0.08, -0.07, -0.06, -0.06, -0.08, -0.08, -0.07, -0.05, -0.03};
    for (int i = 0; i < 9; ++i) m[chain[i]] = {0, height[i], depth[i]};
    return m;
  }();
  return t;
}

bool starts_with(const std::string& s, const char* prefix) {
  return s.rfind(prefix, 0) == 0;
}

}  // namespace

void CameraModel::check() const {
  const Eigen::Matrix3d m = projection.leftCols<3>();
  const Eigen::Vector3d s = Eigen::JacobiSVD<Eigen::Matrix3d>(m).singularValues();
  if (!(s(2) > 1e-12 * s(0))) {
    throw Error(ErrorCode::kInvalidArgument, "camera " + id + " has a singular 3x3 block");
  }
}

Eigen::Vector2d CameraModel::project(const Vector3d& world) const {
  const Vector3d h = projection * world.homogeneous();
  return h.hnormalized();
}

Vector3d CameraModel::centre() const {
  return -projection.leftCols<3>().partialPivLu().solve(projection.col(3));
}

CameraModel look_at_camera(std::string id, const Vector3d& position,
                           const Vector3d& target, double focal, double cx,
                           double cy) {
  const Vector3d forward = (target - position).normalized();
  const Vector3d right = forward.cross(Vector3d::UnitY()).normalized();
  const Vector3d down = forward.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right;
  r.row(1) = down;
  r.row(2) = forward;
  Eigen::Matrix3d k;
  k << focal, 0, cx, 0, focal, cy, 0, 0, 1;
  CameraModel cam;
  cam.id = std::move(id);
  cam.projection.leftCols<3>() = k * r;
  cam.projection.col(3) = k * (-r * position);
  cam.check();
  return cam;
}

Vector3d triangulate_point(std::span<const Observation> observations,
                           std::size_t min_views) {
  const std::size_t need = std::max<std::size_t>(min_views, 2);
  if (observations.size() < need) {
    throw Error(ErrorCode::kInsufficientViews,
                "triangulation needs " + std::to_string(need) + " views, got " +
                    std::to_string(observations.size()));
  }
  // Solve in a frame centred on the camera centroid and scaled by the mean
  // centre distance, so rigid changes of world frame leave the solution
  // unchanged.
  Vector3d mean = Vector3d::Zero();
  std::vector<Vector3d> centres;
  for (const auto& o : observations) {
    centres.push_back(o.camera->centre());
    mean += centres.back();
  }
  mean /= static_cast<double>(centres.size());
  double spread = 0.0;
  for (const auto& c : centres) spread += (c - mean).norm();
  spread /= static_cast<double>(centres.size());
  if (!(spread > 0.0)) {
    throw Error(ErrorCode::kDegenerateGeometry, "all cameras share one optical centre");
  }
  Eigen::Matrix4d denorm = Eigen::Matrix4d::Identity();
  denorm.topLeftCorner<3, 3>() *= spread;
  denorm.topRightCorner<3, 1>() = mean;

  Eigen::MatrixXd a(2 * observations.size(), 4);
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const Eigen::Matrix<double, 3, 4> p = observations[i].camera->projection * denorm;
    const auto& x = observations[i].pixel;
    a.row(2 * i) = x.x() * p.row(2) - p.row(0);
    a.row(2 * i + 1) = x.y() * p.row(2) - p.row(1);
  }
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double n = a.row(r).norm();
    if (n > 0) a.row(r) /= n;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  if (!(s(2) > 0.0) || s(0) / s(2) > kDegenerateCondition) {
    throw Error(ErrorCode::kDegenerateGeometry, "triangulation design matrix is rank-deficient");
  }
  const Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) <= 1e-12 * h.head<3>().norm()) {
    throw Error(ErrorCode::kDegenerateGeometry, "triangulated point lies at infinity");
  }
  return mean + spread * h.hnormalized();
}

Eigen::Matrix3d first_order_covariance(std::span<const Observation> observations,
                                       const Vector3d& point, double pixel_sigma) {
  Eigen::Matrix3d info = Eigen::Matrix3d::Zero();
  for (const auto& o : observations) {
    const auto& p = o.camera->projection;
    const Vector3d h = p * point.homogeneous();
    const double u = h(0) / h(2), v = h(1) / h(2);
    Eigen::Matrix<double, 2, 3> j;
    j.row(0) = (p.block<1, 3>(0, 0) - u * p.block<1, 3>(2, 0)) / h(2);
    j.row(1) = (p.block<1, 3>(1, 0) - v * p.block<1, 3>(2, 0)) / h(2);
    info += j.transpose() * j;
  }
  return pixel_sigma * pixel_sigma * info.inverse();
}

double ValidationReport::mean_rmse(std::span<const std::size_t> keypoints) const {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t k : keypoints) {
    if (samples.at(k) == 0) continue;
    s += rmse[k];
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

std::vector<std::size_t> flag_keypoints(const ValidationReport& report, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < report.rmse.size(); ++k) {
    if (report.samples[k] > 0 && report.rmse[k] > threshold) out.push_back(k);
  }
  return out;
}

ValidationReport validate_sequence(const ViewSequence& frames,
                                   std::span<const CameraModel> cameras,
                                   std::span<const Skeleton3D> reference,
                                   double threshold) {
  if (frames.size() != reference.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                std::to_string(frames.size()) + " observed frames vs " +
                    std::to_string(reference.size()) + " reference frames");
  }
  if (!(threshold >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must be >= 0");
  const std::size_t nk = reference.empty() ? 0 : reference.front().size();
  ValidationReport r;
  r.threshold = threshold;
  std::vector<double> sq(nk, 0.0);
  r.samples.assign(nk, 0);
  r.failures.assign(nk, 0);
  std::vector<Observation> obs;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].size() != cameras.size() || reference[f].size() != nk) {
      throw Error(ErrorCode::kShapeMismatch, "frame " + std::to_string(f) +
                                                 " does not match the rig or skeleton");
    }
    for (const auto& view : frames[f]) {
      if (view.size() != nk) {
        throw Error(ErrorCode::kShapeMismatch, "view keypoint count differs from reference");
      }
    }
    for (std::size_t k = 0; k < nk; ++k) {
      obs.clear();
      for (std::size_t v = 0; v < cameras.size(); ++v) {
        const Pose2D& view = frames[f][v];
        if (!view.labeled(k)) continue;
        obs.push_back({&cameras[v], {view.coords[k].x, view.coords[k].y}});
      }
      try {
        const Vector3d x = triangulate_point(obs);
        sq[k] += (x - reference[f][k]).squaredNorm();
        ++r.samples[k];
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kInsufficientViews &&
            e.code() != ErrorCode::kDegenerateGeometry) {
          throw;
        }
        ++r.failures[k];
      }
    }
  }
  r.rmse.assign(nk, 0.0);
  for (std::size_t k = 0; k < nk; ++k) {
    if (r.samples[k] == 0) {
      r.unmeasured.push_back(k);
      continue;
    }
    r.rmse[k] = std::sqrt(sq[k] / static_cast<double>(r.samples[k]));
  }
  r.flagged = flag_keypoints(r, threshold);
  return r;
}

std::vector<CameraModel> make_ring_rig(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw Error(ErrorCode::kInvalidArgument, "rig needs at least one camera");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> radius(3.0, 6.0), height(1.0, 2.0),
      focal(900.0, 1400.0), jitter(-0.3, 0.3);
  std::normal_distribution<double> aim(0.0, 0.2);
  const double offset = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);
  std::vector<CameraModel> rig;
  for (std::size_t i = 0; i < count; ++i) {
    const double angle = offset + 2 * std::numbers::pi * static_cast<double>(i) /
                                      static_cast<double>(count) + jitter(rng);
    const double r = radius(rng);
    const Vector3d pos{r * std::cos(angle), height(rng), r * std::sin(angle)};
    const Vector3d target{aim(rng), 1.0 + aim(rng), aim(rng)};
    rig.push_back(look_at_camera("cam" + std::to_string(i), pos, target, focal(rng), 960, 540));
  }
  return rig;
}

std::vector<Skeleton3D> synthetic_motion(const SkeletonSpec& spec, std::size_t frames,
                                         std::uint64_t seed) {
  const auto& tpl = template_pose();
  std::vector<Vector3d> base;
  for (const auto& kp : spec.keypoints) {
    auto it = tpl.find(kp.name);
    if (it == tpl.end()) {
      throw Error(ErrorCode::kInvalidArgument, "no 3D template for keypoint " + kp.name);
    }
    base.push_back(it->second);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0, 2 * std::numbers::pi), scale(0.7, 1.3);
  const double p_gait = phase(rng), p_flex = phase(rng), p_bend = phase(rng);
  const double a_arm = 0.4 * scale(rng), a_leg = 0.3 * scale(rng);
  const double a_flex = 0.25 * scale(rng), a_bend = 0.1 * scale(rng);
  const Vector3d hip = tpl.at("hip_center");
  const Vector3d x = Vector3d::UnitX(), y = Vector3d::UnitY(), z = Vector3d::UnitZ();

  std::vector<Skeleton3D> out;
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = static_cast<double>(f) / 30.0;
    const double gait = std::sin(2 * std::numbers::pi * 0.8 * t + p_gait);
    const double flex = a_flex * std::sin(2 * std::numbers::pi * 0.2 * t + p_flex);
    const double bend = a_bend * std::sin(2 * std::numbers::pi * 0.3 * t + p_bend);
    const double heading = 0.3 * t;
    Skeleton3D pose(base.size());
    for (std::size_t k = 0; k < base.size(); ++k) {
      const std::string& name = spec.keypoints[k].name;
      Vector3d p = base[k];
      const double side = starts_with(name, "left_") ? 1.0 : -1.0;
      const bool arm = name.find("elbow") != std::string::npos ||
                       name.find("wrist") != std::string::npos;
      const bool leg = name.find("knee") != std::string::npos ||
                       name.find("ankle") != std::string::npos ||
                       name.find("toe") != std::string::npos ||
                       name.find("heel") != std::string::npos;
      if (arm) {
        const Vector3d shoulder = tpl.at(side > 0 ? "left_shoulder" : "right_shoulder");
        p = rotate_about(p, shoulder, x, side * a_arm * gait);
      }
      if (leg) {
        const Vector3d h = tpl.at(side > 0 ? "left_hip" : "right_hip");
        p = rotate_about(p, h, x, -side * a_leg * gait);
      } else if (p.y() > hip.y()) {
        // Flexion and side bend grow with height, bending the chain.
        const double w = std::clamp((p.y() - hip.y()) / 0.65, 0.0, 1.0);
        p = rotate_about(p, hip, x, flex * w);
        p = rotate_about(p, hip, z, bend * w);
      }
      p = rotate_about(p, Vector3d::Zero(), y, -heading);
      p += Vector3d{std::cos(heading), 0.0, std::sin(heading)} - Vector3d::UnitX();
      pose[k] = p;
    }
    out.push_back(std::move(pose));
  }
  return out;
}

ViewSequence project_sequence(std::span<const Skeleton3D> reference,
                              std::span<const CameraModel> cameras,
                              const ProjectionNoise& noise) {
  std::mt19937_64 rng(noise.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ViewSequence out;
  for (const auto& frame : reference) {
    if (!noise.bias.empty() && noise.bias.size() != frame.size()) {
      throw Error(ErrorCode::kShapeMismatch, "bias needs one offset per keypoint");
    }
    std::vector<Pose2D> views;
    for (const auto& cam : cameras) {
      std::vector<Vec2> pts;
      for (std::size_t k = 0; k < frame.size(); ++k) {
        Vector3d p = frame[k];
        if (!noise.bias.empty()) p += noise.bias[k];
        const Eigen::Vector2d px = cam.project(p);
        pts.push_back({px.x() + noise.pixel_sigma * gauss(rng),
                       px.y() + noise.pixel_sigma * gauss(rng)});
      }
      views.emplace_back(std::move(pts));
    }
    out.push_back(std::move(views));
  }
  return out;
}

double calibrate_pixel_noise(std::span<const CameraModel> cameras,
                             std::span<const Skeleton3D> reference,
                             std::span<const std::size_t> keypoints,
                             double target_rmse, std::uint64_t seed) {
  ProjectionNoise unit;
  unit.pixel_sigma = 1.0;
  unit.seed = seed;
  const auto views = project_sequence(reference, cameras, unit);
  const double at_unit = validate_sequence(views, cameras, reference).mean_rmse(keypoints);
  if (!(at_unit > 0.0)) {
    throw Error(ErrorCode::kDegenerateGeometry, "unit pixel noise produced zero error");
  }
  return target_rmse / at_unit;
}

nlohmann::json cameras_to_json(std::span<const CameraModel> cameras) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& c : cameras) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
      rows.push_back({c.projection(r, 0), c.projection(r, 1), c.projection(r, 2),
                      c.projection(r, 3)});
    }
    list.push_back({{"id", c.id}, {"projection", rows}});
  }
  return {{"units", {{"world", "m"}, {"image", "px"}}}, {"cameras", list}};
}

std::vector<CameraModel> cameras_from_json(const nlohmann::json& doc) {
  auto fail = [](const std::string& what) {
    return Error(ErrorCode::kParseError, "camera json: " + what);
  };
  if (!doc.is_object() || !doc.contains("cameras") || !doc["cameras"].is_array()) {
    throw fail("expected an object with a 'cameras' array");
  }
  if (doc.contains("units")) {
    const auto& u = doc["units"];
    if (u.value("world", "m") != "m" || u.value("image", "px") != "px") {
      throw fail("units must be meters and pixels");
    }
  }
  std::vector<CameraModel> out;
  try {
    for (const auto& c : doc["cameras"]) {
      CameraModel cam;
      cam.id = c.value("id", "cam" + std::to_string(out.size()));
      const auto& rows = c.at("projection");
      if (!rows.is_array() || rows.size() != 3) throw fail("projection needs 3 rows");
      for (int r = 0; r < 3; ++r) {
        if (!rows[r].is_array() || rows[r].size() != 4) throw fail("projection rows need 4 values");
        for (int col = 0; col < 4; ++col) cam.projection(r, col) = rows[r][col].get<double>();
      }
      cam.check();
      out.push_back(std::move(cam));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  return out;
}

nlohmann::json to_json(const ValidationReport& r, const SkeletonSpec& spec) {
  nlohmann::json kps = nlohmann::json::array();
  for (std::size_t k = 0; k < r.rmse.size(); ++k) {
    kps.push_back({{"name", k < spec.size() ? spec.keypoints[k].name : std::to_string(k)},
                   {"rmse_m", r.rmse[k]},
                   {"samples", r.samples[k]},
                   {"failures", r.failures[k]},
                   {"flagged", std::find(r.flagged.begin(), r.flagged.end(), k) != r.flagged.end()}});
  }
  return {{"threshold_m", r.threshold},
          {"keypoints", kps},
          {"flagged", r.flagged},
          {"unmeasured", r.unmeasured},
          {"body_mean_rmse_m", r.mean_rmse(spec.body_set)},
          {"spine_mean_rmse_m", r.mean_rmse(spec.spine_set)}};
}

std::string format_summary(const ValidationReport& r, const SkeletonSpec& spec) {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "gate %.3f m  body mean %.4f m  spine mean %.4f m\n",
                r.threshold, r.mean_rmse(spec.body_set), r.mean_rmse(spec.spine_set));
  os << line;
  for (std::size_t k = 0; k < r.rmse.size(); ++k) {
    const bool flag = std::find(r.flagged.begin(), r.flagged.end(), k) != r.flagged.end();
    std::snprintf(line, sizeof line, "%-24s %8.4f  %5zu %5zu %s\n",
                  k < spec.size() ? spec.keypoints[k].name.c_str() : "?", r.rmse[k],
                  r.samples[k], r.failures[k], flag ? "REFINE" : "");
    os << line;
  }
  return os.str();
}

}  // namespace spinepose
