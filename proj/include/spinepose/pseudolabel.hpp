#pragma once

#include <array>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "spinepose/skeleton.hpp"

namespace spinepose {

/// Arc-length fractions of the nine chain points, sacrum to C1.
inline constexpr std::array<double, kSpineChainLength> kSpineFractions = {
    0.00, 0.10, 0.20, 0.30, 0.45, 0.60, 0.80, 0.90, 1.00};

struct CubicBezier {
  std::array<Vec2, 4> p;

  Vec2 at(double t) const;
  Vec2 derivative(double t) const;
};

struct SpineInitOptions {
  std::array<double, kSpineChainLength> fractions = kSpineFractions;
  double head_base_fraction = 0.35;  // along shoulder-mid -> head_top
  double bow_fraction = 0.08;        // of hip-to-shoulder length
  std::size_t quadrature_segments = 64;
};

struct SpineInit {
  std::array<Vec2, kSpineChainLength> points;
  std::array<double, kSpineChainLength> params;  // Bezier t per point
  std::array<double, kSpineChainLength> confidence;
  CubicBezier curve;
};

/// Midline spine guess from the shoulders, hips and (optionally) head_top of
/// `pose` over `spec`. Throws Error(kMissingDrivers) when a shoulder or hip is
/// absent or unlabeled and Error(kDegenerateTorso) when the hip and shoulder
/// midpoints coincide.
SpineInit init_spine(const Pose2D& pose, const SkeletonSpec& spec,
                     const SpineInitOptions& options = {});

/// Curve parameters whose polyline arc length (over `segments` equal steps in
/// t) reaches each fraction of the total.
std::vector<double> arc_length_params(const CubicBezier& curve,
                                      std::span<const double> fractions,
                                      std::size_t segments);

/// Max over the lumbar (sacrum..L1), thoracic (L1..T3) and cervical (C7..C1)
/// groups of the coefficient of variation of consecutive segment lengths.
double equal_spacing_residual(std::span<const Vec2> chain);

/// Writes the guess into the spine_chain entries of `pose` (labeled
/// invisible, with the per-point confidence).
void apply_spine_init(const SpineInit& init, const SkeletonSpec& spec,
                      Pose2D& pose);

/// Converts COCO-style detections into annotations over `target`.
/// Accepts a bare array or an object with "annotations". Each entry carries
/// "keypoints" as flat (x, y, c) triples over COCO-17, the 26-point body set,
/// the 35-point annotation vocabulary, or the 37-point model skeleton
/// (chosen by length); c > 0 marks a labeled point with confidence min(c, 1).
/// Entries whose drivers are missing or degenerate are kept without spine
/// points and listed under "skipped".
nlohmann::json pseudo_label_document(const nlohmann::json& detections,
                                     const SkeletonSpec& target,
                                     const SpineInitOptions& options = {});

}  // namespace spinepose
