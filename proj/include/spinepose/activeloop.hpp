#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinepose/skeleton.hpp"
#include "spinepose/toytrain.hpp"

namespace spinepose {

enum class Provenance { kModelInitialized, kModelPredicted, kHumanCorrected };

std::string_view to_string(Provenance p);
/// Throws Error(kParseError).
Provenance provenance_from_string(std::string_view s);

/// One person instance under annotation. `pose.confidence` holds the model
/// confidence per keypoint.
struct AnnotationRecord {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::string batch_id;
  std::int64_t version = 1;
  Pose2D pose;
  std::vector<Provenance> provenance;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

enum class BatchStatus { kPending, kCheckedOut, kCompleted };
std::string_view to_string(BatchStatus s);

struct Lease {
  std::string session;
  std::int64_t expires_at_ms = 0;
  friend bool operator==(const Lease&, const Lease&) = default;
};

struct BatchState {
  std::string id;
  BatchStatus status = BatchStatus::kPending;
  std::optional<Lease> lease;  // set while checked out
  std::vector<std::int64_t> record_ids;
  bool merged = false;

  /// Checked out with an unexpired lease.
  bool leased_at(std::int64_t now_ms) const;
  friend bool operator==(const BatchState&, const BatchState&) = default;
};

struct KeypointEdit {
  std::size_t keypoint = 0;
  Vec2 coord;
  Visibility visibility = Visibility::kLabeledVisible;
};

struct ReviewItem {
  std::int64_t record_id = 0;
  std::size_t keypoint = 0;
  friend auto operator<=>(const ReviewItem&, const ReviewItem&) = default;
};

/// Every (record, keypoint) with model confidence below `tau` and provenance
/// other than human_corrected, sorted. tau = 1 flags every such keypoint.
/// Throws Error(kInvalidArgument) for tau outside [0, 1].
std::vector<ReviewItem> flag_for_review(std::span<const AnnotationRecord> records,
                                        double tau);

/// A record as exported to the training set.
struct TrainingLabel {
  std::int64_t record_id = 0;
  std::int64_t image_id = 0;
  std::int64_t version = 0;
  std::string batch_id;
  Pose2D pose;
  std::vector<Provenance> provenance;
  friend bool operator==(const TrainingLabel&, const TrainingLabel&) = default;
};

using TrainingStore = std::map<std::int64_t, TrainingLabel>;

struct TrainingDelta {
  std::string batch_id;
  std::vector<TrainingLabel> labels;
};

/// New model output for one record: confidences always, coordinates when
/// `coords` is set. Human-corrected keypoints are left alone.
struct PredictionUpdate {
  std::int64_t record_id = 0;
  std::vector<double> confidence;
  std::optional<std::vector<Vec2>> coords;
};

/// Immutable view of the store. Each record keeps every version it has had;
/// the last one is current.
struct StoreState {
  std::map<std::string, BatchState> batches;
  std::vector<std::string> batch_order;
  std::map<std::int64_t, std::shared_ptr<const std::vector<AnnotationRecord>>> history;
  std::shared_ptr<const TrainingStore> training = std::make_shared<TrainingStore>();
  std::uint64_t seq = 0;  // last applied event
  std::uint64_t corrections = 0;

  /// Throw Error(kUnknownRecord) / Error(kUnknownBatch).
  const AnnotationRecord& record(std::int64_t id) const;
  const std::vector<AnnotationRecord>& versions(std::int64_t id) const;
  const BatchState& batch(const std::string& id) const;
  std::vector<AnnotationRecord> records(const std::string& batch_id) const;
};

nlohmann::json to_json(const AnnotationRecord& r);
AnnotationRecord record_from_json(const nlohmann::json& j, const SkeletonSpec& spec);
nlohmann::json to_json(const BatchState& b, std::int64_t now_ms);
nlohmann::json to_json(const TrainingLabel& l);
nlohmann::json to_json(const TrainingDelta& d);
/// Complete state, including every record version. Two stores hold the same
/// state exactly when these documents compare equal.
nlohmann::json to_json(const StoreState& s);

using MillisClock = std::function<std::int64_t()>;
std::int64_t system_millis();

struct StoreOptions {
  std::string data_dir;  // empty: memory only
  std::chrono::milliseconds lease_ttl = std::chrono::minutes(15);
  MillisClock clock = system_millis;
  std::size_t snapshot_every = 256;  // events between snapshots; 0 disables
  bool fsync = true;
};

/// Annotation state driven by an append-only event log. Mutations are
/// serialised by one writer lock: validated, appended to the batch's
/// JSON-lines log under data_dir/batches/, folded into a copy of the state
/// and published. Readers take snapshot() without locking the writer.
/// Opening an existing data_dir replays snapshot.json plus newer events.
class AnnotationStore {
 public:
  /// Throws Error(kIoError) / Error(kParseError) when the log cannot be read.
  explicit AnnotationStore(SkeletonSpec spec, StoreOptions options = {});
  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;

  std::shared_ptr<const StoreState> snapshot() const;
  const SkeletonSpec& spec() const { return spec_; }
  const StoreOptions& options() const { return options_; }
  std::int64_t now() const { return options_.clock(); }

  /// Records get version 1 and `batch_id`. Batch ids are [A-Za-z0-9_-]+.
  /// Throws Error(kInvalidArgument) for duplicate or malformed ids and
  /// Error(kShapeMismatch) for records not over spec().
  void create_batch(const std::string& batch_id, std::vector<AnnotationRecord> records);

  /// Lease on the batch `session` already holds, else the first pending (or
  /// lease-expired) batch in creation order. Throws Error(kNoPendingBatch).
  BatchState checkout_next(const std::string& session);
  /// Throws Error(kLeaseConflict) while another session holds an active
  /// lease, Error(kBatchImmutable) once completed.
  BatchState checkout(const std::string& session, const std::string& batch_id);

  /// Applies `edits` as human corrections and renews the lease. Throws
  /// Error(kUnknownRecord), Error(kBatchImmutable), Error(kLeaseConflict)
  /// when `session` does not hold the lease, Error(kLeaseExpired) when its
  /// lease ran out, Error(kVersionConflict) for a stale expected_version and
  /// Error(kInvalidArgument) / Error(kOutOfRange) for bad edits. Nothing
  /// changes on error.
  AnnotationRecord submit_correction(const std::string& session, std::int64_t record_id,
                                     std::int64_t expected_version,
                                     std::span<const KeypointEdit> edits);

  /// Same lease rules as submit_correction.
  BatchState complete(const std::string& session, const std::string& batch_id);

  /// Writes the latest record versions to the training store. A
  /// human_corrected keypoint already in the store is never replaced by a
  /// model one. Merging again returns the same delta and changes nothing.
  /// Throws Error(kBatchNotCompleted).
  TrainingDelta merge_batch(const std::string& batch_id);

  /// Bumps the version of every updated record. Throws
  /// Error(kBatchImmutable) for completed batches, Error(kLeaseConflict)
  /// while leased, Error(kUnknownRecord) for records outside the batch.
  void apply_model_predictions(const std::string& batch_id,
                               std::span<const PredictionUpdate> updates);

  /// Number of events appended since construction (replayed ones excluded).
  std::uint64_t appended() const;

 private:
  void commit(nlohmann::json event, const std::string& batch_id);
  void replay();
  void write_snapshot(const StoreState& s);
  void check_lease(const StoreState& s, const BatchState& b,
                   const std::string& session) const;

  SkeletonSpec spec_;
  StoreOptions options_;
  mutable std::mutex writer_;
  std::shared_ptr<const StoreState> state_;
  std::uint64_t appended_ = 0;
};

/// Records from a pseudo-label document ({"keypoint_names", "annotations"}),
/// mapped onto `spec` by name. Labeled keypoints are model_initialized.
/// Throws Error(kParseError).
std::vector<AnnotationRecord> records_from_pseudo_labels(const nlohmann::json& doc,
                                                         const SkeletonSpec& spec);

/// Consecutive groups of `batch_size` records named prefix-0001, ...
std::vector<std::pair<std::string, std::vector<AnnotationRecord>>> make_batches(
    std::vector<AnnotationRecord> records, std::size_t batch_size,
    const std::string& prefix = "batch");

struct RefinementConfig {
  std::size_t batches = 3;
  std::size_t batch_size = 64;
  double tau = 0.5;
  double annotator_sigma = 0.5;  // px, per coordinate
  std::uint64_t seed = 0;
  TrainConfig fine_tune = [] {
    TrainConfig c;
    c.steps = 300;
    c.warmup_steps = 30;
    c.base_lr = 1e-3;
    c.weights.beta = 0.0;
    return c;
  }();
  StoreOptions store;
};

struct CycleRecord {
  std::size_t cycle = 0;  // 0: before any refinement
  std::string batch_id;
  std::size_t flagged = 0;
  double label_error = 0.0;      // px, mean over pool spine keypoints
  double corrected_error = 0.0;  // px, mean over this cycle's corrections
  double model_error = 0.0;      // px, held-out spine decode error
};

struct RefinementResult {
  std::vector<CycleRecord> timeline;
  ToyModel model;
  TrainingStore training;
};

/// Active-learning loop over the training split of `corpus`: split into
/// `batches` batches whose initial labels are the corpus labels (spine set
/// model_initialized, body human). Each cycle predicts confidences for the
/// next batch, flags at tau, lets an oracle set flagged keypoints to the
/// clean pose plus Normal(0, sigma^2) noise, completes, merges and fine-tunes
/// the model on the merged labels. Throws Error(kInvalidArgument) when the
/// split is too small.
RefinementResult refinement_cycle(const ToyCorpus& corpus, const ToyModel& model,
                                  const RefinementConfig& config);

nlohmann::json to_json(const RefinementResult& r);

}  // namespace spinepose
