#pragma once

// Seeded record generator and a deterministic mixed store workload. Used by
// the store tests and the acceptance binary to compare a replayed log with an
// in-memory re-execution.

#include <atomic>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spinepose/activeloop.hpp"
#include "spinepose/error.hpp"

namespace spinepose::workload {

inline AnnotationRecord make_record(const SkeletonSpec& spec, std::int64_t id, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AnnotationRecord r;
  r.id = id;
  r.image_id = 100 + id;
  r.pose = Pose2D(spec.size(), Visibility::kLabeledVisible);
  r.provenance.assign(spec.size(), Provenance::kModelInitialized);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    r.pose.coords[k] = {200 * u(rng), 300 * u(rng)};
    r.pose.confidence[k] = u(rng);
  }
  return r;
}

inline std::vector<AnnotationRecord> make_records(const SkeletonSpec& spec, std::int64_t first,
                                           std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<AnnotationRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_record(spec, first + static_cast<std::int64_t>(i), rng));
  return out;
}

// Deterministic mixed workload; every call either appends one event or
// throws without appending.
inline void workload_step(AnnotationStore& store, std::mt19937_64& rng, std::atomic<std::int64_t>& t,
                   std::int64_t& next_record, int& next_batch) {
  const auto& spec = store.spec();
  t += std::uniform_int_distribution<int>(0, 400)(rng);
  const auto s = store.snapshot();
  const char* sessions[] = {"alice", "bob", "carol"};
  const std::string session = sessions[std::uniform_int_distribution<int>(0, 2)(rng)];
  const int op = std::uniform_int_distribution<int>(0, 9)(rng);
  try {
    if (op == 0 || s->batches.empty()) {
      const std::string id = "w" + std::to_string(next_batch++);
      store.create_batch(id, make_records(spec, next_record, 3, rng()));
      next_record += 3;
    } else if (op <= 2) {
      store.checkout_next(session);
    } else if (op <= 6) {
      const auto it = std::next(s->history.begin(),
                                std::uniform_int_distribution<std::size_t>(0, s->history.size() - 1)(rng));
      const auto& r = it->second->back();
      const KeypointEdit e{std::uniform_int_distribution<std::size_t>(0, spec.size() - 1)(rng),
                           {std::uniform_real_distribution<double>(0, 100)(rng), 5.0}};
      store.submit_correction(session, r.id, r.version - (op == 6 ? 1 : 0), std::span(&e, 1));
    } else if (op == 7) {
      const auto& id = s->batch_order[std::uniform_int_distribution<std::size_t>(0, s->batch_order.size() - 1)(rng)];
      store.complete(session, id);
    } else if (op == 8) {
      const auto& id = s->batch_order[std::uniform_int_distribution<std::size_t>(0, s->batch_order.size() - 1)(rng)];
      store.merge_batch(id);
    } else {
      const auto& id = s->batch_order[std::uniform_int_distribution<std::size_t>(0, s->batch_order.size() - 1)(rng)];
      std::vector<PredictionUpdate> ups;
      for (auto rid : s->batch(id).record_ids) {
        ups.push_back({rid, std::vector<double>(spec.size(), 0.3), std::nullopt});
      }
      store.apply_model_predictions(id, ups);
    }
  } catch (const Error&) {
  }
}

}  // namespace spinepose::workload
