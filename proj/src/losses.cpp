#include "spinepose/losses.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

void require_shape(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kShapeMismatch, what);
}

struct GateStep {
  Vec2 offset;    // s_i - s~_{i-1}
  double dist;    // |offset|
  double gate;    // w_i
  double gate_d;  // dw_i / d dist
};

// Forward pass of the smoothing recurrence, keeping what the backward pass
// needs. steps[i] describes chain index i + 1.
std::vector<Vec2> smooth_forward(std::span<const Vec2> chain, double threshold,
                                 double sharpness,
                                 std::vector<GateStep>* steps) {
  std::vector<Vec2> smoothed(chain.size());
  if (chain.empty()) return smoothed;
  smoothed[0] = chain[0];
  if (steps) steps->clear();
  for (std::size_t i = 1; i < chain.size(); ++i) {
    const Vec2 offset = chain[i] - smoothed[i - 1];
    const double d = norm(offset);
    const double s = sigmoid(sharpness * (d - threshold));
    const double w = 1.0 - 0.5 * s;
    smoothed[i] = smoothed[i - 1] + w * offset;
    if (steps) {
      steps->push_back({offset, d, w, -0.5 * sharpness * s * (1.0 - s)});
    }
  }
  return smoothed;
}

void check_smoothing_params(double threshold, double sharpness) {
  if (!(threshold > 0.0) || !(sharpness > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                "smoothing threshold and sharpness must be positive");
  }
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double wrap_angle(double delta) {
  return std::atan2(std::sin(delta), std::cos(delta));
}

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma1 >= 0.0) ||
      !(gamma2 >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "loss weights must be >= 0");
  }
  check_smoothing_params(smoothing_threshold, smoothing_sharpness);
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"pos", b.pos},
          {"distill", b.distill},
          {"structure", b.structure},
          {"spine", b.spine},
          {"total", b.total}};
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"alpha", w.alpha},
          {"beta", w.beta},
          {"gamma1", w.gamma1},
          {"gamma2", w.gamma2},
          {"smoothing_threshold", w.smoothing_threshold},
          {"smoothing_sharpness", w.smoothing_sharpness},
          {"kl_direction", w.kl_direction == KlDirection::kReferenceFirst
                               ? "reference_first"
                               : "candidate_first"}};
}

double positional_loss(std::span<const KeypointDistribution> pred,
                       std::span<const KeypointDistribution> target,
                       std::span<const Visibility> visibility,
                       KlDirection direction) {
  require_shape(pred.size() == target.size(),
                "positional_loss: prediction/target keypoint counts differ");
  require_shape(visibility.empty() || visibility.size() == pred.size(),
                "positional_loss: visibility size");
  double total = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (!visibility.empty() && !is_labeled(visibility[k])) continue;
    total += directed_kl(target[k].x, pred[k].x, direction);
    total += directed_kl(target[k].y, pred[k].y, direction);
  }
  return total;
}

double distillation_loss(std::span<const KeypointDistribution> student,
                         std::span<const KeypointDistribution> teacher,
                         const SkeletonSpec& spec, KlDirection direction) {
  require_shape(student.size() == spec.size(),
                "distillation_loss: student must cover the full skeleton");
  require_shape(teacher.size() == spec.body_set.size(),
                "distillation_loss: teacher must cover exactly the body set");
  double total = 0.0;
  for (std::size_t j = 0; j < teacher.size(); ++j) {
    const auto& s = student[spec.body_set[j]];
    total += directed_kl(teacher[j].x, s.x, direction);
    total += directed_kl(teacher[j].y, s.y, direction);
  }
  return total;
}

double structure_loss(const Pose2D& pred, const Pose2D& gt,
                      const SkeletonSpec& spec) {
  return structure_loss_grad(pred, gt, spec, 0.0, {});
}

double structure_loss_grad(const Pose2D& pred, const Pose2D& gt,
                           const SkeletonSpec& spec, double scale,
                           std::span<Vec2> grad) {
  require_shape(pred.size() == spec.size() && gt.size() == spec.size(),
                "structure_loss: pose sizes must match the skeleton");
  require_shape(grad.empty() || grad.size() == spec.size(),
                "structure_loss: gradient buffer size");

  struct Term {
    Bone bone;
    double delta;
    Vec2 offset;
  };
  std::vector<Term> terms;
  terms.reserve(spec.bones.size());
  for (const auto& b : spec.bones) {
    if (!pred.labeled(b.from) || !pred.labeled(b.to) || !gt.labeled(b.from) ||
        !gt.labeled(b.to)) {
      continue;
    }
    const auto phi_p = bone_angle(pred.coords[b.from], pred.coords[b.to]);
    const auto phi_g = bone_angle(gt.coords[b.from], gt.coords[b.to]);
    if (!phi_p || !phi_g) continue;
    terms.push_back({b, wrap_angle(*phi_p - *phi_g),
                     pred.coords[b.to] - pred.coords[b.from]});
  }
  if (terms.empty()) {
    throw Error(ErrorCode::kEmptyBoneSet,
                "structure_loss: no labeled non-degenerate bone");
  }

  const double norm_factor =
      1.0 / (std::numbers::pi * static_cast<double>(terms.size()));
  double total = 0.0;
  for (const auto& t : terms) total += std::abs(t.delta);
  total *= norm_factor;

  if (!grad.empty() && scale != 0.0) {
    for (const auto& t : terms) {
      if (t.delta == 0.0) continue;
      const double sign = t.delta > 0.0 ? 1.0 : -1.0;
      const double r2 = dot(t.offset, t.offset);
      // d atan2(dy, dx) / d(to) = (-dy, dx) / r^2.
      const Vec2 d_to{-t.offset.y / r2, t.offset.x / r2};
      const double c = scale * norm_factor * sign;
      grad[t.bone.to] += c * d_to;
      grad[t.bone.from] -= c * d_to;
    }
  }
  return total;
}

std::vector<Vec2> smooth_spine(std::span<const Vec2> chain, double threshold,
                               double sharpness) {
  check_smoothing_params(threshold, sharpness);
  return smooth_forward(chain, threshold, sharpness, nullptr);
}

std::vector<double> smoothing_gates(std::span<const Vec2> chain,
                                    double threshold, double sharpness) {
  check_smoothing_params(threshold, sharpness);
  std::vector<GateStep> steps;
  smooth_forward(chain, threshold, sharpness, &steps);
  std::vector<double> gates;
  gates.reserve(steps.size());
  for (const auto& s : steps) gates.push_back(s.gate);
  return gates;
}

double spine_smoothness_loss(std::span<const Vec2> chain, double threshold,
                             double sharpness) {
  return spine_smoothness_grad(chain, threshold, sharpness, 0.0, {});
}

double spine_smoothness_grad(std::span<const Vec2> chain, double threshold,
                             double sharpness, double scale,
                             std::span<Vec2> grad) {
  if (chain.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument,
                "spine smoothness needs at least two points");
  }
  require_shape(grad.empty() || grad.size() == chain.size(),
                "spine_smoothness: gradient buffer size");
  check_smoothing_params(threshold, sharpness);

  std::vector<GateStep> steps;
  const auto smoothed = smooth_forward(chain, threshold, sharpness, &steps);
  const std::size_t n = chain.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 r = chain[i] - smoothed[i];
    total += dot(r, r);
  }
  total *= inv_n;

  if (grad.empty() || scale == 0.0) return total;

  // Adjoints: a[i] for s~_i, b[i] for s_i.
  std::vector<Vec2> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 r = (2.0 * inv_n) * (chain[i] - smoothed[i]);
    b[i] += r;
    a[i] -= r;
  }
  for (std::size_t i = n - 1; i >= 1; --i) {
    const GateStep& st = steps[i - 1];
    // s~_i = s~_{i-1} + w(|u|) u with u = s_i - s~_{i-1}.
    Vec2 gu = st.gate * a[i];
    if (st.dist > 0.0) {
      gu += (dot(a[i], st.offset) * st.gate_d / st.dist) * st.offset;
    }
    b[i] += gu;
    a[i - 1] += a[i] - gu;
  }
  b[0] += a[0];  // s~_1 = s_1
  for (std::size_t i = 0; i < n; ++i) grad[i] += scale * b[i];
  return total;
}

namespace {

struct InstanceEval {
  double pos = 0.0;
  double distill = 0.0;
  double structure = 0.0;
  double spine = 0.0;
  bool has_spine = false;
};

std::vector<Vec2> chain_points(const Pose2D& pose, const SkeletonSpec& spec) {
  std::vector<Vec2> pts;
  pts.reserve(spec.spine_chain.size());
  for (std::size_t k : spec.spine_chain) pts.push_back(pose.coords[k]);
  return pts;
}

bool chain_labeled(const Pose2D& pose, const SkeletonSpec& spec) {
  if (spec.spine_chain.size() < 2) return false;
  for (std::size_t k : spec.spine_chain) {
    if (!pose.labeled(k)) return false;
  }
  return true;
}

LossGradient evaluate_batch(const LossBatch& batch, const SkeletonSpec& spec,
                            const AxisGrid& grid, const LossWeights& weights,
                            bool want_grad) {
  weights.validate();
  const std::size_t n = batch.student_logits.size();
  require_shape(n > 0, "empty batch");
  require_shape(batch.targets.size() == n, "targets/batch size mismatch");
  const bool have_teacher = !batch.teacher.empty();
  require_shape(!have_teacher || batch.teacher.size() == n,
                "teacher/batch size mismatch");
  if (!have_teacher && weights.beta > 0.0) {
    throw Error(ErrorCode::kShapeMismatch,
                "beta > 0 requires teacher outputs for every instance");
  }
  const std::size_t stride = grid.bins_per_keypoint();

  // First pass: distributions, decoded poses and the spine normalizer.
  std::vector<std::vector<KeypointDistribution>> dists(n);
  std::vector<Pose2D> decoded(n);
  std::size_t spine_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require_shape(batch.student_logits[i].size() == spec.size() * stride,
                  "student logits do not match skeleton x grid");
    const auto& tgt = batch.targets[i];
    require_shape(tgt.pose.size() == spec.size() &&
                      tgt.dists.size() == spec.size(),
                  "target does not cover the skeleton");
    dists[i] = distributions_from_logits(batch.student_logits[i], grid);
    decoded[i] = decode_pose(dists[i], spec);
    if (chain_labeled(tgt.pose, spec)) ++spine_count;
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_spine =
      spine_count > 0 ? 1.0 / static_cast<double>(spine_count) : 0.0;

  LossGradient out;
  if (want_grad) out.grad.assign(n, {});
  LossBreakdown& sum = out.breakdown;
  const KlDirection dir = weights.kl_direction;

  for (std::size_t i = 0; i < n; ++i) {
    const auto& tgt = batch.targets[i];
    const auto& p = dists[i];
    std::vector<double>* g = want_grad ? &out.grad[i] : nullptr;
    if (g) g->assign(spec.size() * stride, 0.0);
    auto x_slice = [&](std::size_t k) {
      return std::span<double>(*g).subspan(k * stride, grid.x_bins);
    };
    auto y_slice = [&](std::size_t k) {
      return std::span<double>(*g).subspan(k * stride + grid.x_bins,
                                           grid.y_bins);
    };

    InstanceEval ev;
    ev.pos = positional_loss(p, tgt.dists, tgt.pose.visibility, dir);
    if (g && weights.alpha != 0.0) {
      const double c = weights.alpha * inv_n;
      for (std::size_t k = 0; k < spec.size(); ++k) {
        if (!tgt.pose.labeled(k)) continue;
        directed_kl_grad_logits(tgt.dists[k].x, p[k].x, dir, c, x_slice(k));
        directed_kl_grad_logits(tgt.dists[k].y, p[k].y, dir, c, y_slice(k));
      }
    }

    if (have_teacher) {
      const auto& teacher = batch.teacher[i];
      ev.distill = distillation_loss(p, teacher, spec, dir);
      if (g && weights.beta != 0.0) {
        const double c = weights.beta * inv_n;
        for (std::size_t j = 0; j < teacher.size(); ++j) {
          const std::size_t k = spec.body_set[j];
          directed_kl_grad_logits(teacher[j].x, p[k].x, dir, c, x_slice(k));
          directed_kl_grad_logits(teacher[j].y, p[k].y, dir, c, y_slice(k));
        }
      }
    }

    std::vector<Vec2> coord_grad;
    if (g) coord_grad.assign(spec.size(), Vec2{});
    ev.structure = structure_loss_grad(decoded[i], tgt.pose, spec,
                                       weights.gamma1 * inv_n, coord_grad);

    if (chain_labeled(tgt.pose, spec)) {
      ev.has_spine = true;
      const auto chain = chain_points(decoded[i], spec);
      std::vector<Vec2> chain_grad;
      if (g) chain_grad.assign(chain.size(), Vec2{});
      ev.spine = spine_smoothness_grad(
          chain, weights.smoothing_threshold, weights.smoothing_sharpness,
          weights.gamma2 * inv_spine, chain_grad);
      if (g) {
        for (std::size_t c = 0; c < chain.size(); ++c) {
          coord_grad[spec.spine_chain[c]] += chain_grad[c];
        }
      }
    }

    if (g) {
      for (std::size_t k = 0; k < spec.size(); ++k) {
        const Vec2 cg = coord_grad[k];
        if (cg.x != 0.0) soft_argmax_grad_logits(p[k].x, cg.x, x_slice(k));
        if (cg.y != 0.0) soft_argmax_grad_logits(p[k].y, cg.y, y_slice(k));
      }
    }

    sum.pos += ev.pos;
    sum.distill += ev.distill;
    sum.structure += ev.structure;
    if (ev.has_spine) sum.spine += ev.spine;
  }

  sum.pos *= inv_n;
  sum.distill *= inv_n;
  sum.structure *= inv_n;
  sum.spine *= inv_spine;

  for (double v : {sum.pos, sum.distill, sum.structure, sum.spine}) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFiniteResult, "non-finite loss term");
    }
  }
  sum.total = weights.alpha * sum.pos + weights.beta * sum.distill +
              weights.gamma1 * sum.structure + weights.gamma2 * sum.spine;
  return out;
}

}  // namespace

LossBreakdown total_loss(const LossBatch& batch, const SkeletonSpec& spec,
                         const AxisGrid& grid, const LossWeights& weights) {
  return evaluate_batch(batch, spec, grid, weights, false).breakdown;
}

LossGradient grad_total(const LossBatch& batch, const SkeletonSpec& spec,
                        const AxisGrid& grid, const LossWeights& weights) {
  return evaluate_batch(batch, spec, grid, weights, true);
}

}  // namespace spinepose
