#include "spinepose/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

namespace spinepose {
namespace {

SkeletonSpec gradcheck_skeleton() {
  SkeletonSpec spec;
  const char* body[] = {"left_shoulder", "right_shoulder", "hip_center"};
  for (const char* name : body) {
    spec.body_set.push_back(spec.keypoints.size());
    spec.keypoints.push_back({spec.keypoints.size(), name});
  }
  for (const char* name : kSpineChainNames) {
    spec.spine_set.push_back(spec.keypoints.size());
    spec.spine_chain.push_back(spec.keypoints.size());
    spec.keypoints.push_back({spec.keypoints.size(), name});
  }
  spec.sigmas.assign(spec.keypoints.size(), 0.079);
  spec.bones = {{0, 1}, {2, 3}};
  for (std::size_t i = 0; i + 1 < spec.spine_chain.size(); ++i) {
    spec.bones.push_back({spec.spine_chain[i], spec.spine_chain[i + 1]});
  }
  return spec;
}

}  // namespace

GradcheckCase make_gradcheck_case(std::uint64_t seed, std::size_t batch_size) {
  GradcheckCase c;
  c.spec = gradcheck_skeleton();
  c.grid = {12, 16, 4.0};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> logit(0.0, 1.5);
  std::uniform_real_distribution<double> ux(0.0, c.grid.width() - 1e-9),
      uy(0.0, c.grid.height() - 1e-9);

  const std::size_t k = c.spec.size();
  const std::size_t stride = c.grid.bins_per_keypoint();
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::vector<double> z(k * stride);
    for (auto& v : z) v = logit(rng);
    c.logits.push_back(std::move(z));

    InstanceTarget t;
    t.pose = Pose2D(std::vector<Vec2>(k));
    for (std::size_t j = 0; j < k; ++j) {
      t.pose.coords[j] = {ux(rng), uy(rng)};
      t.dists.push_back(encode_keypoint(t.pose.coords[j], c.grid, 1.5));
    }
    c.targets.push_back(std::move(t));

    std::vector<KeypointDistribution> teacher;
    for (std::size_t j = 0; j < c.spec.body_set.size(); ++j) {
      std::vector<double> zx(c.grid.x_bins), zy(c.grid.y_bins);
      for (auto& v : zx) v = logit(rng);
      for (auto& v : zy) v = logit(rng);
      teacher.push_back({softmax(zx, c.grid.bin_width),
                         softmax(zy, c.grid.bin_width)});
    }
    c.teacher.push_back(std::move(teacher));
  }
  return c;
}

GradcheckResult check_gradients(const GradcheckCase& c, double h,
                                double denominator_floor) {
  GradcheckResult result;
  const auto analytic = grad_total(c.batch(), c.spec, c.grid, c.weights);
  result.breakdown = analytic.breakdown;

  auto perturbed = c.logits;
  auto eval = [&]() {
    const LossBatch b{perturbed, c.targets, c.teacher};
    return total_loss(b, c.spec, c.grid, c.weights).total;
  };
  for (std::size_t i = 0; i < perturbed.size(); ++i) {
    for (std::size_t j = 0; j < perturbed[i].size(); ++j) {
      const double orig = perturbed[i][j];
      perturbed[i][j] = orig + h;
      const double up = eval();
      perturbed[i][j] = orig - h;
      const double down = eval();
      perturbed[i][j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.grad[i][j];
      const double abs_err = std::abs(a - numeric);
      const double denom =
          std::max({std::abs(a), std::abs(numeric), denominator_floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
      ++result.entries;
    }
  }
  return result;
}

GradcheckSummary run_gradcheck(int seeds, std::uint64_t base_seed, double h) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckSummary s;
  s.seeds = seeds;
  const double inf = std::numeric_limits<double>::infinity();
  s.min_terms = {inf, inf, inf, inf, inf};
  for (int i = 0; i < seeds; ++i) {
    const auto c = make_gradcheck_case(base_seed + static_cast<std::uint64_t>(i));
    const auto r = check_gradients(c, h);
    s.max_rel_error = std::max(s.max_rel_error, r.max_rel_error);
    s.max_abs_error = std::max(s.max_abs_error, r.max_abs_error);
    s.min_terms.pos = std::min(s.min_terms.pos, r.breakdown.pos);
    s.min_terms.distill = std::min(s.min_terms.distill, r.breakdown.distill);
    s.min_terms.structure =
        std::min(s.min_terms.structure, r.breakdown.structure);
    s.min_terms.spine = std::min(s.min_terms.spine, r.breakdown.spine);
    s.min_terms.total = std::min(s.min_terms.total, r.breakdown.total);
  }
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            start)
                  .count();
  return s;
}

}  // namespace spinepose
