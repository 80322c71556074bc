#include "spinepose/service.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>

namespace spinepose {

namespace fs = std::filesystem;
using nlohmann::json;

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kVersionConflict:
    case ErrorCode::kLeaseConflict:
    case ErrorCode::kBatchImmutable:
    case ErrorCode::kBatchNotCompleted:
      return 409;
    case ErrorCode::kLeaseExpired:
      return 403;
    case ErrorCode::kUnknownRecord:
    case ErrorCode::kUnknownBatch:
    case ErrorCode::kUnknownImageId:
    case ErrorCode::kNoPendingBatch:
      return 404;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfRange:
    case ErrorCode::kParseError:
    case ErrorCode::kShapeMismatch:
      return 400;
    default:
      return 500;
  }
}

namespace {

class WorkerPool {
 public:
  explicit WorkerPool(std::size_t n) {
    for (std::size_t i = 0; i < std::max<std::size_t>(n, 1); ++i) {
      threads_.emplace_back([this] { loop(); });
    }
  }
  ~WorkerPool() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void post(std::function<void()> task) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(task));
    }
    cv_.notify_one();
  }

  std::size_t queued() const {
    std::lock_guard lock(mu_);
    return queue_.size();
  }
  std::atomic<std::size_t> running{0}, completed{0}, failed{0};

 private:
  void loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      task();
    }
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  std::vector<std::thread> threads_;
  bool stopping_ = false;
};

json error_body(const std::string& code, const std::string& message) {
  return {{"code", code}, {"message", message}};
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string session_of(const httplib::Request& req) {
  std::string s = req.get_header_value("X-Session");
  if (s.empty()) s = req.get_param_value("session");
  if (s.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "session id required (X-Session header or ?session=)");
  }
  return s;
}

std::int64_t parse_id(const std::string& s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::kInvalidArgument, "invalid id '" + s + "'");
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("request body: ") + e.what());
  }
}

std::vector<KeypointEdit> parse_edits(const json& body, const SkeletonSpec& spec) {
  if (!body.contains("edits") || !body["edits"].is_array()) {
    throw Error(ErrorCode::kParseError, "edits must be an array");
  }
  std::vector<KeypointEdit> edits;
  try {
    for (const auto& e : body["edits"]) {
      KeypointEdit ed;
      const auto& k = e.at("keypoint");
      if (k.is_string()) {
        ed.keypoint = spec.index_of(k.get<std::string>());
      } else {
        const auto idx = k.get<std::int64_t>();
        if (idx < 0) throw Error(ErrorCode::kOutOfRange, "negative keypoint index");
        ed.keypoint = static_cast<std::size_t>(idx);
      }
      ed.coord = {e.at("x").get<double>(), e.at("y").get<double>()};
      const int v = e.value("v", 2);
      if (v < 0 || v > 2) throw Error(ErrorCode::kOutOfRange, "visibility must be 0, 1 or 2");
      ed.visibility = static_cast<Visibility>(v);
      edits.push_back(ed);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("malformed edit: ") + e.what());
  }
  return edits;
}

const char* content_type(const std::string& ext) {
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".ppm" || ext == ".pgm") return "image/x-portable-anymap";
  return "application/octet-stream";
}

}  // namespace

struct AnnotationService::Impl {
  AnnotationStore& store;
  ServiceOptions options;
  httplib::Server server;
  WorkerPool pool;
  std::thread thread;

  Impl(AnnotationStore& s, ServiceOptions o)
      : store(s), options(std::move(o)), pool(options.workers) {}

  template <typename F>
  httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_json(res, http_status(e.code()),
                  error_body(std::string(error_code_name(e.code())), e.what()));
      } catch (const std::exception& e) {
        send_json(res, 500, error_body("InternalError", e.what()));
      }
    };
  }

  json batch_view(const std::string& batch_id) const {
    const auto s = store.snapshot();
    const auto& b = s->batch(batch_id);
    const auto records = s->records(batch_id);
    const auto flags = flag_for_review(records, options.tau);
    std::map<std::int64_t, json> flagged;
    for (const auto& f : flags) flagged[f.record_id].push_back(f.keypoint);
    json rs = json::array();
    for (const auto& r : records) {
      json rj = to_json(r);
      auto it = flagged.find(r.id);
      rj["flagged"] = it == flagged.end() ? json::array() : it->second;
      rs.push_back(std::move(rj));
    }
    return {{"batch", to_json(b, store.now())},
            {"keypoint_names", store.spec().names()},
            {"spine_chain", store.spec().spine_chain},
            {"tau", options.tau},
            {"records", rs}};
  }

  void routes() {
    server.Get("/api/batches/next", guarded([this](const httplib::Request& req,
                                                   httplib::Response& res) {
      const auto b = store.checkout_next(session_of(req));
      send_json(res, 200, {{"batch", to_json(b, store.now())},
                           {"records_url", "/api/batches/" + b.id + "/records"}});
    }));
    server.Get(R"(/api/batches/([A-Za-z0-9_-]+)/records)",
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 send_json(res, 200, batch_view(req.matches[1]));
               }));
    server.Get(R"(/api/images/([^/]+))", guarded([this](const httplib::Request& req,
                                                        httplib::Response& res) {
      const std::int64_t id = parse_id(req.matches[1]);
      if (!options.image_dir.empty()) {
        for (const char* ext : {".png", ".jpg", ".jpeg", ".ppm", ".pgm"}) {
          const fs::path p = fs::path(options.image_dir) / (std::to_string(id) + ext);
          if (!fs::is_regular_file(p)) continue;
          std::ifstream in(p, std::ios::binary);
          std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
          res.status = 200;
          res.set_content(std::move(bytes), content_type(ext));
          return;
        }
      }
      throw Error(ErrorCode::kUnknownImageId, "no image file for id " + std::to_string(id));
    }));
    server.Post(R"(/api/records/([^/]+)/corrections)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const std::int64_t id = parse_id(req.matches[1]);
                  const json body = parse_body(req);
                  if (!body.contains("expected_version") ||
                      !body["expected_version"].is_number_integer()) {
                    throw Error(ErrorCode::kParseError, "expected_version must be an integer");
                  }
                  const auto edits = parse_edits(body, store.spec());
                  const auto r = store.submit_correction(
                      session_of(req), id, body["expected_version"].get<std::int64_t>(), edits);
                  send_json(res, 200, to_json(r));
                }));
    server.Post(R"(/api/batches/([A-Za-z0-9_-]+)/complete)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const std::string id = req.matches[1];
                  const auto b = store.complete(session_of(req), id);
                  json out = {{"batch", to_json(b, store.now())}};
                  if (options.merge_on_complete) {
                    out["merged_labels"] = store.merge_batch(id).labels.size();
                    out["batch"] = to_json(store.snapshot()->batch(id), store.now());
                  }
                  send_json(res, 200, out);
                }));
    server.Get("/api/metrics", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, metrics());
    }));
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        res.set_content(error_body("NotFound", "no such route").dump(), "application/json");
      }
    });
    if (!options.static_dir.empty()) server.set_mount_point("/", options.static_dir);
  }

  json metrics() const {
    const auto s = store.snapshot();
    const std::int64_t t = store.now();
    std::size_t pending = 0, leased = 0, expired = 0, completed = 0, merged = 0;
    std::size_t versions = 0, flagged = 0;
    for (const auto& [id, b] : s->batches) {
      switch (b.status) {
        case BatchStatus::kPending: ++pending; break;
        case BatchStatus::kCheckedOut: b.leased_at(t) ? ++leased : ++expired; break;
        case BatchStatus::kCompleted: ++completed; break;
      }
      if (b.merged) ++merged;
      if (b.status != BatchStatus::kCompleted) {
        flagged += flag_for_review(s->records(id), options.tau).size();
      }
    }
    for (const auto& [id, h] : s->history) versions += h->size();
    return {{"batches",
             {{"pending", pending},
              {"checked_out", leased},
              {"lease_expired", expired},
              {"completed", completed},
              {"merged", merged}}},
            {"records", s->history.size()},
            {"record_versions", versions},
            {"corrections", s->corrections},
            {"flagged_keypoints", flagged},
            {"training_labels", s->training->size()},
            {"events", s->seq},
            {"tau", options.tau},
            {"lease_ttl_s", std::chrono::duration<double>(store.options().lease_ttl).count()},
            {"jobs",
             {{"queued", pool.queued()},
              {"running", pool.running.load()},
              {"completed", pool.completed.load()},
              {"failed", pool.failed.load()}}}};
  }
};

AnnotationService::AnnotationService(AnnotationStore& store, ServiceOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(options))) {
  if (!(impl_->options.tau >= 0.0 && impl_->options.tau <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "tau must lie in [0, 1]");
  }
  impl_->routes();
}

AnnotationService::~AnnotationService() { stop(); }

int AnnotationService::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
    if (bound <= 0) throw Error(ErrorCode::kIoError, "cannot bind " + host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::kIoError, "cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void AnnotationService::run(const std::string& host, int port) {
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::kIoError, "cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->server.listen_after_bind();
}

void AnnotationService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::future<void> AnnotationService::submit_prediction_job(
    std::string batch_id, std::function<std::vector<PredictionUpdate>()> job) {
  auto promise = std::make_shared<std::promise<void>>();
  auto future = promise->get_future();
  Impl* impl = impl_.get();
  impl->pool.post([impl, promise, batch_id = std::move(batch_id), job = std::move(job)] {
    ++impl->pool.running;
    try {
      const auto updates = job();
      impl->store.apply_model_predictions(batch_id, updates);
      ++impl->pool.completed;
      --impl->pool.running;
      promise->set_value();
    } catch (...) {
      ++impl->pool.failed;
      --impl->pool.running;
      promise->set_exception(std::current_exception());
    }
  });
  return future;
}

json AnnotationService::metrics() const { return impl_->metrics(); }

}  // namespace spinepose
