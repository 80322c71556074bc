#pragma once

#include <cstdint>
#include <vector>

#include "spinepose/losses.hpp"

namespace spinepose {

/// A small randomized instance exercising all four loss terms: three body
/// keypoints plus the nine-point spine chain on a coarse grid.
struct GradcheckCase {
  SkeletonSpec spec;
  AxisGrid grid;
  LossWeights weights;
  std::vector<std::vector<double>> logits;
  std::vector<InstanceTarget> targets;
  std::vector<std::vector<KeypointDistribution>> teacher;

  LossBatch batch() const { return {logits, targets, teacher}; }
};

GradcheckCase make_gradcheck_case(std::uint64_t seed,
                                  std::size_t batch_size = 2);

struct GradcheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries = 0;
  LossBreakdown breakdown;
};

/// Compares grad_total against central differences of total_loss with step
/// `h`. Relative error per entry is |a - n| / max(|a|, |n|, denominator_floor).
GradcheckResult check_gradients(const GradcheckCase& c, double h = 1e-5,
                                double denominator_floor = 1e-4);

struct GradcheckSummary {
  int seeds = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  // Smallest per-seed value of each term; all four > 0 means every case
  // exercised every term.
  LossBreakdown min_terms;
  double seconds = 0.0;
};

GradcheckSummary run_gradcheck(int seeds, std::uint64_t base_seed = 0,
                               double h = 1e-5);

}  // namespace spinepose
