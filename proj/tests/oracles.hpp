#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary. Nothing here calls into the library except for types
// and the skeleton definition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <tuple>
#include <vector>

#include "spinepose/evaluator.hpp"

namespace spinepose::oracles {

// Two-term KL by direct summation.
inline double kl_two_bin(double p0, double q0) {
  return p0 * std::log(p0 / q0) + (1 - p0) * std::log((1 - p0) / (1 - q0));
}

// |wrapped difference| / pi for one bone whose angles differ by `delta`.
inline double wrapped_bone_term(double delta) {
  return std::abs(std::atan2(std::sin(delta), std::cos(delta))) / 3.14159265358979323846;
}

// Smoothing recurrence on the x axis only.
struct ScalarSmoothing {
  std::vector<double> smoothed;
  double loss;
};

inline ScalarSmoothing scalar_smoothing(const std::vector<double>& xs, double t, double k) {
  std::vector<double> out{xs[0]};
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const double d = std::abs(xs[i] - out.back());
    const double sig = 1.0 / (1.0 + std::exp(-k * (d - t)));
    const double w = 1.0 - 0.5 * sig;
    out.push_back(out.back() + w * (xs[i] - out.back()));
  }
  double loss = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    loss += (xs[i] - out[i]) * (xs[i] - out[i]);
  }
  return {out, loss / xs.size()};
}

inline const SkeletonSpec& spec() {
  static const SkeletonSpec s = default_extended_skeleton();
  return s;
}

inline Pose2D random_pose(std::mt19937_64& rng, Vec2 origin, double extent) {
  std::uniform_real_distribution<double> u(0.0, extent);
  std::vector<Vec2> pts;
  for (std::size_t k = 0; k < spec().size(); ++k) pts.push_back(origin + Vec2{u(rng), u(rng)});
  return Pose2D(pts);
}

inline Pose2D jittered(const Pose2D& p, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Pose2D q = p;
  for (auto& c : q.coords) c += Vec2{n(rng), n(rng)};
  return q;
}

// Scalar OKS written out independently.
inline double oracle_oks(const GtInstance& g, const Prediction& p, const std::vector<std::size_t>& subset) {
  double total = 0;
  int count = 0;
  for (std::size_t k : subset) {
    if (g.pose.visibility[k] == Visibility::kNotLabeled) continue;
    const double dx = p.pose.coords[k].x - g.pose.coords[k].x;
    const double dy = p.pose.coords[k].y - g.pose.coords[k].y;
    const double sig = spec().sigmas[k];
    total += std::exp(-(dx * dx + dy * dy) / (2.0 * g.area * sig * sig));
    ++count;
  }
  return count ? total / count : -1.0;
}

struct OracleThreshold {
  std::size_t tp = 0, fp = 0;
  double ap = 0, recall = 0;
};

inline std::vector<std::size_t> every_keypoint() {
  std::vector<std::size_t> all(spec().size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  return all;
}

// Exhaustive reference: for every cutoff k of the global ranking the greedy
// matching is redone from scratch on the top-k predictions, and interpolated
// precision is the max over all cutoffs reaching each recall level.
inline std::vector<OracleThreshold> oracle(const std::vector<GtInstance>& gt,
                                    const std::vector<Prediction>& preds,
                                    const std::vector<std::size_t>& subset,
                                    std::size_t max_dets) {
  const auto all = every_keypoint();
  std::vector<const GtInstance*> g, ig;
  for (const auto& x : gt) {
    const Prediction self{0, 0, x.pose, 0};
    if (oracle_oks(x, self, subset) >= 0) {
      g.push_back(&x);
    } else if (oracle_oks(x, self, all) >= 0) {
      ig.push_back(&x);
    }
  }
  auto by_id = [](auto* a, auto* b) { return a->id < b->id; };
  std::sort(g.begin(), g.end(), by_id);
  std::sort(ig.begin(), ig.end(), by_id);
  std::vector<const Prediction*> order;
  for (const auto& p : preds) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) {
    return a->score > b->score || (a->score == b->score && a->id < b->id);
  });
  std::map<std::int64_t, std::size_t> per_image;
  std::vector<const Prediction*> kept;
  for (auto* p : order) {
    if (per_image[p->image_id]++ < max_dets) kept.push_back(p);
  }
  auto pick = [](const std::vector<const GtInstance*>& pool, std::vector<bool>& used,
                 const Prediction& p, const std::vector<std::size_t>& keys, double thr) {
    int best = -1;
    double best_v = -1;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (used[j] || pool[j]->image_id != p.image_id) continue;
      const double v = oracle_oks(*pool[j], p, keys);
      if (v >= thr && v > best_v) {
        best = static_cast<int>(j);
        best_v = v;
      }
    }
    if (best >= 0) used[best] = true;
    return best >= 0;
  };
  std::vector<OracleThreshold> out;
  for (int ti = 0; ti < 10; ++ti) {
    const double thr = (50 + 5 * ti) / 100.0;
    // (true positives, false positives) among the top k.
    auto counts = [&](std::size_t k) {
      std::vector<bool> used(g.size(), false), used_ig(ig.size(), false);
      std::size_t tp = 0, fp = 0;
      for (std::size_t i = 0; i < k; ++i) {
        if (pick(g, used, *kept[i], subset, thr)) {
          ++tp;
        } else if (!pick(ig, used_ig, *kept[i], all, thr)) {
          ++fp;
        }
      }
      return std::pair{tp, fp};
    };
    std::vector<double> prec, rec;
    for (std::size_t k = 1; k <= kept.size(); ++k) {
      const auto [tp, fp] = counts(k);
      if (tp + fp == 0) continue;
      prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      rec.push_back(g.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(g.size()));
    }
    OracleThreshold o;
    std::tie(o.tp, o.fp) = counts(kept.size());
    double s = 0;
    if (!g.empty()) {
      for (int r = 0; r <= 100; ++r) {
        double best = 0;
        for (std::size_t k = 0; k < prec.size(); ++k) {
          if (rec[k] >= r / 100.0) best = std::max(best, prec[k]);
        }
        s += best;
      }
      o.recall = static_cast<double>(o.tp) / static_cast<double>(g.size());
    }
    o.ap = s / 101.0;
    out.push_back(o);
  }
  return out;
}

struct Corpus {
  std::vector<GtInstance> gt;
  std::vector<Prediction> preds;
  std::vector<std::int64_t> images;

  GtSet set() const { return {images, gt}; }
};

inline Corpus random_corpus(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> images(1, 10), instances(0, 4), coin(0, 9);
  std::uniform_real_distribution<double> noise(0.5, 12.0);
  Corpus c;
  std::int64_t gid = 1, pid = 100;
  const int n_images = images(rng);
  for (int im = 0; im < n_images; ++im) {
    c.images.push_back(im);
    const int n = instances(rng);
    for (int i = 0; i < n; ++i) {
      GtInstance g;
      g.id = gid++;
      g.image_id = im;
      g.pose = random_pose(rng, {i * 60.0, 0.0}, 80.0);
      g.area = 3000.0 + 2000.0 * coin(rng);
      for (std::size_t k = 0; k < spec().size(); ++k) {
        if (coin(rng) == 0) g.pose.visibility[k] = Visibility::kNotLabeled;
      }
      if (coin(rng) == 0) {
        for (std::size_t k : spec().spine_set) g.pose.visibility[k] = Visibility::kNotLabeled;
      }
      c.gt.push_back(g);
      if (coin(rng) < 8) {
        // Coarse scores produce ties.
        c.preds.push_back({pid++, im, jittered(g.pose, rng, noise(rng)), coin(rng) / 10.0});
      }
    }
    if (coin(rng) < 3) {
      c.preds.push_back({pid++, im, random_pose(rng, {0, 0}, 200.0), coin(rng) / 10.0});
    }
  }
  if (c.gt.empty()) {
    c.gt.push_back({gid, 0, random_pose(rng, {0, 0}, 80), 4000.0});
  }
  return c;
}

}  // namespace spinepose::oracles
