#pragma once

#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinepose/activeloop.hpp"
#include "spinepose/error.hpp"

namespace spinepose {

/// HTTP status for a domain error: 409 for version / lease / state
/// conflicts, 403 for an expired lease, 404 for unknown ids or an empty
/// queue, 400 for malformed input, 500 otherwise.
int http_status(ErrorCode code);

struct ServiceOptions {
  double tau = 0.5;
  std::string image_dir;   // GET /api/images/{id} serves <id>.{png,jpg,jpeg,ppm,pgm}
  std::string static_dir;  // mounted at / when non-empty
  bool merge_on_complete = true;
  std::size_t workers = 1;  // prediction worker threads
};

/// Annotation API over an AnnotationStore:
///   GET  /api/batches/next             checkout (session from X-Session or ?session=)
///   GET  /api/batches/{id}/records     records plus flagged keypoints at tau
///   GET  /api/images/{id}              image bytes
///   POST /api/records/{id}/corrections {expected_version, edits: [{keypoint, x, y, v}]}
///   POST /api/batches/{id}/complete    completes (and merges) the batch
///   GET  /api/metrics
/// Errors are {code, message}. Prediction jobs run on a worker pool that
/// only takes the store's writer lock to publish their result.
class AnnotationService {
 public:
  AnnotationService(AnnotationStore& store, ServiceOptions options = {});
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  /// Returns the bound port. Throws Error(kIoError) when binding fails.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

  /// Runs `job` on the worker pool, then applies its output to `batch_id`.
  std::future<void> submit_prediction_job(
      std::string batch_id, std::function<std::vector<PredictionUpdate>()> job);

  nlohmann::json metrics() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace spinepose
