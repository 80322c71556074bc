#include "spinepose/activeloop.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "spinepose/distcodec.hpp"
#include "spinepose/error.hpp"

namespace spinepose {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kModelInitialized: return "model_initialized";
    case Provenance::kModelPredicted: return "model_predicted";
    case Provenance::kHumanCorrected: return "human_corrected";
  }
  return "model_initialized";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "model_initialized") return Provenance::kModelInitialized;
  if (s == "model_predicted") return Provenance::kModelPredicted;
  if (s == "human_corrected") return Provenance::kHumanCorrected;
  throw Error(ErrorCode::kParseError, "unknown provenance '" + std::string(s) + "'");
}

std::string_view to_string(BatchStatus s) {
  switch (s) {
    case BatchStatus::kPending: return "pending";
    case BatchStatus::kCheckedOut: return "checked_out";
    case BatchStatus::kCompleted: return "completed";
  }
  return "pending";
}

namespace {

BatchStatus status_from_string(const std::string& s) {
  if (s == "pending") return BatchStatus::kPending;
  if (s == "checked_out") return BatchStatus::kCheckedOut;
  if (s == "completed") return BatchStatus::kCompleted;
  throw Error(ErrorCode::kParseError, "unknown batch status '" + s + "'");
}

Visibility visibility_from_int(int v) {
  if (v < 0 || v > 2) throw Error(ErrorCode::kOutOfRange, "visibility must be 0, 1 or 2");
  return static_cast<Visibility>(v);
}

json flat_keypoints(const Pose2D& p) {
  json a = json::array();
  for (std::size_t k = 0; k < p.size(); ++k) {
    a.push_back(p.coords[k].x);
    a.push_back(p.coords[k].y);
    a.push_back(static_cast<int>(p.visibility[k]));
  }
  return a;
}

json provenance_json(const std::vector<Provenance>& p) {
  json a = json::array();
  for (auto v : p) a.push_back(to_string(v));
  return a;
}

std::vector<Provenance> provenance_vector(const json& a) {
  std::vector<Provenance> out;
  for (const auto& v : a) out.push_back(provenance_from_string(v.get<std::string>()));
  return out;
}

Pose2D pose_from(const json& keypoints, const json& confidence) {
  if (!keypoints.is_array() || keypoints.size() % 3 != 0) {
    throw Error(ErrorCode::kParseError, "keypoints must be flat (x, y, v) triples");
  }
  const std::size_t n = keypoints.size() / 3;
  Pose2D p(n, Visibility::kNotLabeled);
  for (std::size_t k = 0; k < n; ++k) {
    p.coords[k] = {keypoints[3 * k].get<double>(), keypoints[3 * k + 1].get<double>()};
    p.visibility[k] = visibility_from_int(keypoints[3 * k + 2].get<int>());
    p.confidence[k] = 0.0;
  }
  if (confidence.is_array()) {
    if (confidence.size() != n) {
      throw Error(ErrorCode::kParseError, "model_confidence length differs from keypoints");
    }
    for (std::size_t k = 0; k < n; ++k) p.confidence[k] = confidence[k].get<double>();
  }
  return p;
}

json lease_json(const std::optional<Lease>& l) {
  if (!l) return nullptr;
  return {{"session", l->session}, {"expires_at_ms", l->expires_at_ms}};
}

json batch_raw(const BatchState& b) {
  return {{"batch_id", b.id},
          {"status", to_string(b.status)},
          {"lease", lease_json(b.lease)},
          {"record_ids", b.record_ids},
          {"merged", b.merged}};
}

BatchState batch_from_raw(const json& j) {
  BatchState b;
  b.id = j.at("batch_id").get<std::string>();
  b.status = status_from_string(j.at("status").get<std::string>());
  if (!j.at("lease").is_null()) {
    b.lease = Lease{j["lease"].at("session").get<std::string>(),
                    j["lease"].at("expires_at_ms").get<std::int64_t>()};
  }
  b.record_ids = j.at("record_ids").get<std::vector<std::int64_t>>();
  b.merged = j.at("merged").get<bool>();
  return b;
}

TrainingLabel label_from_json(const json& j) {
  TrainingLabel l;
  l.record_id = j.at("record_id").get<std::int64_t>();
  l.image_id = j.at("image_id").get<std::int64_t>();
  l.version = j.at("version").get<std::int64_t>();
  l.batch_id = j.at("batch_id").get<std::string>();
  l.pose = pose_from(j.at("keypoints"), j.at("model_confidence"));
  l.provenance = provenance_vector(j.at("provenance"));
  return l;
}

AnnotationRecord record_raw(const json& j) {
  AnnotationRecord r;
  r.id = j.at("id").get<std::int64_t>();
  r.image_id = j.at("image_id").get<std::int64_t>();
  r.batch_id = j.value("batch_id", std::string());
  r.version = j.value("version", std::int64_t{1});
  r.pose = pose_from(j.at("keypoints"), j.value("model_confidence", json()));
  if (j.contains("provenance")) {
    r.provenance = provenance_vector(j["provenance"]);
  } else {
    r.provenance.assign(r.pose.size(), Provenance::kModelInitialized);
  }
  if (r.provenance.size() != r.pose.size()) {
    throw Error(ErrorCode::kParseError, "provenance length differs from keypoints");
  }
  return r;
}

StoreState state_from_json(const json& j) {
  StoreState s;
  s.seq = j.at("seq").get<std::uint64_t>();
  s.corrections = j.at("corrections").get<std::uint64_t>();
  for (const auto& b : j.at("batches")) {
    BatchState bs = batch_from_raw(b);
    s.batch_order.push_back(bs.id);
    s.batches.emplace(bs.id, std::move(bs));
  }
  for (const auto& h : j.at("history")) {
    auto versions = std::make_shared<std::vector<AnnotationRecord>>();
    for (const auto& r : h) versions->push_back(record_raw(r));
    if (versions->empty()) throw Error(ErrorCode::kParseError, "empty record history");
    s.history.emplace(versions->front().id, std::move(versions));
  }
  auto training = std::make_shared<TrainingStore>();
  for (const auto& l : j.at("training")) {
    TrainingLabel t = label_from_json(l);
    training->emplace(t.record_id, std::move(t));
  }
  s.training = std::move(training);
  return s;
}

json edit_json(const KeypointEdit& e) {
  return {{"keypoint", e.keypoint},
          {"x", e.coord.x},
          {"y", e.coord.y},
          {"v", static_cast<int>(e.visibility)}};
}

// Applies one logged event. Callers validate before logging, so this only
// re-checks what replay of a foreign log needs.
void apply_event(StoreState& s, const json& ev) {
  const std::string type = ev.at("type").get<std::string>();
  const std::string batch_id = ev.at("batch").get<std::string>();
  auto push_version = [&](AnnotationRecord r) {
    auto& slot = s.history.at(r.id);
    auto next = std::make_shared<std::vector<AnnotationRecord>>(*slot);
    next->push_back(std::move(r));
    slot = std::move(next);
  };

  if (type == "create_batch") {
    BatchState b;
    b.id = batch_id;
    for (const auto& rj : ev.at("records")) {
      AnnotationRecord r = record_raw(rj);
      b.record_ids.push_back(r.id);
      s.history.emplace(r.id, std::make_shared<std::vector<AnnotationRecord>>(
                                  std::vector<AnnotationRecord>{std::move(r)}));
    }
    s.batch_order.push_back(batch_id);
    s.batches.emplace(batch_id, std::move(b));
  } else if (type == "checkout") {
    BatchState& b = s.batches.at(batch_id);
    b.status = BatchStatus::kCheckedOut;
    b.lease = Lease{ev.at("session").get<std::string>(), ev.at("expires_at_ms").get<std::int64_t>()};
  } else if (type == "correction") {
    BatchState& b = s.batches.at(batch_id);
    AnnotationRecord r = s.history.at(ev.at("record").get<std::int64_t>())->back();
    for (const auto& e : ev.at("edits")) {
      const auto k = e.at("keypoint").get<std::size_t>();
      r.pose.coords.at(k) = {e.at("x").get<double>(), e.at("y").get<double>()};
      r.pose.visibility.at(k) = visibility_from_int(e.at("v").get<int>());
      r.provenance.at(k) = Provenance::kHumanCorrected;
    }
    r.version = ev.at("version").get<std::int64_t>();
    push_version(std::move(r));
    b.lease->expires_at_ms = ev.at("expires_at_ms").get<std::int64_t>();
    ++s.corrections;
  } else if (type == "complete") {
    BatchState& b = s.batches.at(batch_id);
    b.status = BatchStatus::kCompleted;
    b.lease.reset();
  } else if (type == "merge") {
    BatchState& b = s.batches.at(batch_id);
    auto training = std::make_shared<TrainingStore>(*s.training);
    for (std::int64_t id : b.record_ids) {
      const AnnotationRecord& r = s.history.at(id)->back();
      TrainingLabel l{r.id, r.image_id, r.version, r.batch_id, r.pose, r.provenance};
      auto it = training->find(id);
      if (it != training->end()) {
        const TrainingLabel& old = it->second;
        for (std::size_t k = 0; k < l.provenance.size(); ++k) {
          if (old.provenance[k] == Provenance::kHumanCorrected &&
              l.provenance[k] != Provenance::kHumanCorrected) {
            l.pose.coords[k] = old.pose.coords[k];
            l.pose.visibility[k] = old.pose.visibility[k];
            l.pose.confidence[k] = old.pose.confidence[k];
            l.provenance[k] = Provenance::kHumanCorrected;
          }
        }
      }
      (*training)[id] = std::move(l);
    }
    s.training = std::move(training);
    b.merged = true;
  } else if (type == "predict") {
    for (const auto& u : ev.at("updates")) {
      AnnotationRecord r = s.history.at(u.at("record").get<std::int64_t>())->back();
      const auto conf = u.at("confidence").get<std::vector<double>>();
      const bool coords = u.contains("coords");
      for (std::size_t k = 0; k < r.pose.size(); ++k) {
        if (r.provenance[k] == Provenance::kHumanCorrected) continue;
        r.pose.confidence[k] = conf.at(k);
        if (coords) {
          r.pose.coords[k] = {u["coords"].at(2 * k).get<double>(),
                              u["coords"].at(2 * k + 1).get<double>()};
          r.provenance[k] = Provenance::kModelPredicted;
        }
      }
      ++r.version;
      push_version(std::move(r));
    }
  } else {
    throw Error(ErrorCode::kParseError, "unknown event type '" + type + "'");
  }
  s.seq = ev.at("seq").get<std::uint64_t>();
}

bool valid_batch_id(const std::string& id) {
  if (id.empty() || id.size() > 128) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

void write_all(int fd, const std::string& data, const std::string& path) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIoError, "write failed: " + path);
    }
    off += static_cast<std::size_t>(n);
  }
}

void append_line(const fs::path& path, const std::string& line, bool sync) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  try {
    write_all(fd, line, path.string());
    if (sync && ::fsync(fd) != 0) throw Error(ErrorCode::kIoError, "fsync failed: " + path.string());
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
}

fs::path batch_log(const std::string& dir, const std::string& batch_id) {
  return fs::path(dir) / "batches" / (batch_id + ".jsonl");
}

}  // namespace

bool BatchState::leased_at(std::int64_t now_ms) const {
  return status == BatchStatus::kCheckedOut && lease && lease->expires_at_ms > now_ms;
}

std::vector<ReviewItem> flag_for_review(std::span<const AnnotationRecord> records,
                                        double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "tau must lie in [0, 1]");
  }
  std::vector<ReviewItem> out;
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.provenance.size(); ++k) {
      if (r.provenance[k] == Provenance::kHumanCorrected) continue;
      if (tau >= 1.0 || r.pose.confidence[k] < tau) out.push_back({r.id, k});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

const AnnotationRecord& StoreState::record(std::int64_t id) const {
  return versions(id).back();
}

const std::vector<AnnotationRecord>& StoreState::versions(std::int64_t id) const {
  auto it = history.find(id);
  if (it == history.end()) {
    throw Error(ErrorCode::kUnknownRecord, "unknown record " + std::to_string(id));
  }
  return *it->second;
}

const BatchState& StoreState::batch(const std::string& id) const {
  auto it = batches.find(id);
  if (it == batches.end()) throw Error(ErrorCode::kUnknownBatch, "unknown batch '" + id + "'");
  return it->second;
}

std::vector<AnnotationRecord> StoreState::records(const std::string& batch_id) const {
  std::vector<AnnotationRecord> out;
  for (std::int64_t id : batch(batch_id).record_ids) out.push_back(record(id));
  return out;
}

json to_json(const AnnotationRecord& r) {
  return {{"id", r.id},
          {"image_id", r.image_id},
          {"batch_id", r.batch_id},
          {"version", r.version},
          {"keypoints", flat_keypoints(r.pose)},
          {"model_confidence", r.pose.confidence},
          {"provenance", provenance_json(r.provenance)}};
}

AnnotationRecord record_from_json(const json& j, const SkeletonSpec& spec) {
  AnnotationRecord r;
  try {
    r = record_raw(j);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("malformed record: ") + e.what());
  }
  if (r.pose.size() != spec.size()) {
    throw Error(ErrorCode::kParseError, "record " + std::to_string(r.id) + " has " +
                                            std::to_string(r.pose.size()) + " keypoints, expected " +
                                            std::to_string(spec.size()));
  }
  return r;
}

json to_json(const BatchState& b, std::int64_t now_ms) {
  json j = batch_raw(b);
  j["lease_active"] = b.leased_at(now_ms);
  return j;
}

json to_json(const TrainingLabel& l) {
  return {{"record_id", l.record_id},
          {"image_id", l.image_id},
          {"version", l.version},
          {"batch_id", l.batch_id},
          {"keypoints", flat_keypoints(l.pose)},
          {"model_confidence", l.pose.confidence},
          {"provenance", provenance_json(l.provenance)}};
}

json to_json(const TrainingDelta& d) {
  json labels = json::array();
  for (const auto& l : d.labels) labels.push_back(to_json(l));
  return {{"batch_id", d.batch_id}, {"labels", labels}};
}

json to_json(const StoreState& s) {
  json batches = json::array();
  for (const auto& id : s.batch_order) batches.push_back(batch_raw(s.batches.at(id)));
  json history = json::array();
  for (const auto& [id, versions] : s.history) {
    json h = json::array();
    for (const auto& r : *versions) h.push_back(to_json(r));
    history.push_back(std::move(h));
  }
  json training = json::array();
  for (const auto& [id, l] : *s.training) training.push_back(to_json(l));
  return {{"seq", s.seq},
          {"corrections", s.corrections},
          {"batches", batches},
          {"history", history},
          {"training", training}};
}

std::int64_t system_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

AnnotationStore::AnnotationStore(SkeletonSpec spec, StoreOptions options)
    : spec_(std::move(spec)), options_(std::move(options)),
      state_(std::make_shared<StoreState>()) {
  if (!options_.clock) options_.clock = system_millis;
  if (options_.lease_ttl.count() <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "lease ttl must be positive");
  }
  if (!options_.data_dir.empty()) replay();
}

std::shared_ptr<const StoreState> AnnotationStore::snapshot() const {
  return std::atomic_load(&state_);
}

std::uint64_t AnnotationStore::appended() const {
  std::lock_guard lock(writer_);
  return appended_;
}

void AnnotationStore::replay() {
  const fs::path dir(options_.data_dir);
  std::error_code ec;
  fs::create_directories(dir / "batches", ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + (dir / "batches").string());

  StoreState s;
  const fs::path snap = dir / "snapshot.json";
  if (fs::exists(snap)) {
    std::ifstream in(snap);
    try {
      s = state_from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParseError, "snapshot.json: " + std::string(e.what()));
    }
  }

  std::vector<json> events;
  for (const auto& entry : fs::directory_iterator(dir / "batches")) {
    if (entry.path().extension() != ".jsonl") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    // A line without its newline is a write cut short by a crash; it was
    // never acknowledged, so drop it.
    const auto last_nl = text.rfind('\n');
    const std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (keep != text.size()) {
      fs::resize_file(entry.path(), keep);
      text.resize(keep);
    }
    std::istringstream lines(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        json ev = json::parse(line);
        if (ev.at("seq").get<std::uint64_t>() > s.seq) events.push_back(std::move(ev));
      } catch (const json::exception& e) {
        throw Error(ErrorCode::kParseError, entry.path().filename().string() + ":" +
                                                std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  std::sort(events.begin(), events.end(), [](const json& a, const json& b) {
    return a["seq"].get<std::uint64_t>() < b["seq"].get<std::uint64_t>();
  });
  for (const auto& ev : events) {
    const auto seq = ev["seq"].get<std::uint64_t>();
    if (seq != s.seq + 1) {
      throw Error(ErrorCode::kParseError, "event log gap: expected seq " +
                                              std::to_string(s.seq + 1) + ", found " +
                                              std::to_string(seq));
    }
    try {
      apply_event(s, ev);
    } catch (const std::out_of_range& e) {
      throw Error(ErrorCode::kParseError, "event " + std::to_string(seq) +
                                              " does not fit the state: " + e.what());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParseError, "event " + std::to_string(seq) + ": " + e.what());
    }
  }
  state_ = std::make_shared<const StoreState>(std::move(s));
}

void AnnotationStore::write_snapshot(const StoreState& s) {
  const fs::path dir(options_.data_dir);
  const fs::path tmp = dir / "snapshot.json.tmp";
  const std::string body = to_json(s).dump();
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::kIoError, "cannot open " + tmp.string());
  try {
    write_all(fd, body, tmp.string());
    if (options_.fsync) ::fsync(fd);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  std::error_code ec;
  fs::rename(tmp, dir / "snapshot.json", ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot replace snapshot.json");
}

// Caller holds writer_.
void AnnotationStore::commit(json event, const std::string& batch_id) {
  const auto& current = state_;
  event["seq"] = current->seq + 1;
  if (!options_.data_dir.empty()) {
    append_line(batch_log(options_.data_dir, batch_id), event.dump() + "\n", options_.fsync);
  }
  auto next = std::make_shared<StoreState>(*current);
  apply_event(*next, event);
  ++appended_;
  std::shared_ptr<const StoreState> published = std::move(next);
  std::atomic_store(&state_, published);
  if (!options_.data_dir.empty() && options_.snapshot_every > 0 &&
      published->seq % options_.snapshot_every == 0) {
    write_snapshot(*published);
  }
}

void AnnotationStore::check_lease(const StoreState&, const BatchState& b,
                                  const std::string& session) const {
  if (b.status == BatchStatus::kCompleted) {
    throw Error(ErrorCode::kBatchImmutable, "batch '" + b.id + "' is completed");
  }
  if (b.status != BatchStatus::kCheckedOut || !b.lease || b.lease->session != session) {
    throw Error(ErrorCode::kLeaseConflict,
                "session '" + session + "' does not hold the lease on batch '" + b.id + "'");
  }
  if (b.lease->expires_at_ms <= now()) {
    throw Error(ErrorCode::kLeaseExpired,
                "lease of session '" + session + "' on batch '" + b.id + "' expired");
  }
}

void AnnotationStore::create_batch(const std::string& batch_id,
                                   std::vector<AnnotationRecord> records) {
  if (!valid_batch_id(batch_id)) {
    throw Error(ErrorCode::kInvalidArgument, "batch id must match [A-Za-z0-9_-]+");
  }
  std::lock_guard lock(writer_);
  const auto& s = *state_;
  if (s.batches.count(batch_id)) {
    throw Error(ErrorCode::kInvalidArgument, "batch '" + batch_id + "' already exists");
  }
  std::set<std::int64_t> ids;
  json rj = json::array();
  for (auto& r : records) {
    if (r.pose.size() != spec_.size() || r.pose.visibility.size() != spec_.size() ||
        r.pose.confidence.size() != spec_.size() || r.provenance.size() != spec_.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "record " + std::to_string(r.id) + " is not over the store skeleton");
    }
    if (s.history.count(r.id) || !ids.insert(r.id).second) {
      throw Error(ErrorCode::kInvalidArgument,
                  "duplicate record id " + std::to_string(r.id));
    }
    r.batch_id = batch_id;
    r.version = 1;
    rj.push_back(to_json(r));
  }
  commit({{"type", "create_batch"}, {"batch", batch_id}, {"records", rj}}, batch_id);
}

BatchState AnnotationStore::checkout(const std::string& session, const std::string& batch_id) {
  if (session.empty()) throw Error(ErrorCode::kInvalidArgument, "empty session id");
  std::lock_guard lock(writer_);
  const BatchState& b = state_->batch(batch_id);
  const std::int64_t t = now();
  if (b.status == BatchStatus::kCompleted) {
    throw Error(ErrorCode::kBatchImmutable, "batch '" + batch_id + "' is completed");
  }
  if (b.leased_at(t) && b.lease->session != session) {
    throw Error(ErrorCode::kLeaseConflict, "batch '" + batch_id + "' is leased by another session");
  }
  commit({{"type", "checkout"},
          {"batch", batch_id},
          {"session", session},
          {"expires_at_ms", t + options_.lease_ttl.count()}},
         batch_id);
  return state_->batch(batch_id);
}

BatchState AnnotationStore::checkout_next(const std::string& session) {
  if (session.empty()) throw Error(ErrorCode::kInvalidArgument, "empty session id");
  std::lock_guard lock(writer_);
  const auto& s = *state_;
  const std::int64_t t = now();
  const BatchState* pick = nullptr;
  for (const auto& id : s.batch_order) {
    const BatchState& b = s.batches.at(id);
    if (b.leased_at(t) && b.lease->session == session) {
      pick = &b;
      break;
    }
  }
  if (!pick) {
    for (const auto& id : s.batch_order) {
      const BatchState& b = s.batches.at(id);
      if (b.status != BatchStatus::kCompleted && !b.leased_at(t)) {
        pick = &b;
        break;
      }
    }
  }
  if (!pick) throw Error(ErrorCode::kNoPendingBatch, "no batch awaiting annotation");
  const std::string id = pick->id;
  commit({{"type", "checkout"},
          {"batch", id},
          {"session", session},
          {"expires_at_ms", t + options_.lease_ttl.count()}},
         id);
  return state_->batch(id);
}

AnnotationRecord AnnotationStore::submit_correction(const std::string& session,
                                                    std::int64_t record_id,
                                                    std::int64_t expected_version,
                                                    std::span<const KeypointEdit> edits) {
  std::lock_guard lock(writer_);
  const auto& s = *state_;
  const AnnotationRecord& r = s.record(record_id);
  check_lease(s, s.batch(r.batch_id), session);
  if (expected_version != r.version) {
    throw Error(ErrorCode::kVersionConflict,
                "record " + std::to_string(record_id) + " is at version " +
                    std::to_string(r.version) + ", not " + std::to_string(expected_version));
  }
  if (edits.empty()) throw Error(ErrorCode::kInvalidArgument, "correction without edits");
  std::set<std::size_t> seen;
  json ej = json::array();
  for (const auto& e : edits) {
    if (e.keypoint >= spec_.size()) {
      throw Error(ErrorCode::kOutOfRange, "keypoint index " + std::to_string(e.keypoint) +
                                              " outside the skeleton");
    }
    if (!std::isfinite(e.coord.x) || !std::isfinite(e.coord.y)) {
      throw Error(ErrorCode::kInvalidArgument, "non-finite edit coordinate");
    }
    if (!seen.insert(e.keypoint).second) {
      throw Error(ErrorCode::kInvalidArgument,
                  "keypoint " + std::to_string(e.keypoint) + " edited twice");
    }
    ej.push_back(edit_json(e));
  }
  const std::string batch_id = r.batch_id;
  commit({{"type", "correction"},
          {"batch", batch_id},
          {"record", record_id},
          {"session", session},
          {"version", r.version + 1},
          {"expires_at_ms", now() + options_.lease_ttl.count()},
          {"edits", ej}},
         batch_id);
  return state_->record(record_id);
}

BatchState AnnotationStore::complete(const std::string& session, const std::string& batch_id) {
  std::lock_guard lock(writer_);
  const auto& s = *state_;
  check_lease(s, s.batch(batch_id), session);
  commit({{"type", "complete"}, {"batch", batch_id}, {"session", session}}, batch_id);
  return state_->batch(batch_id);
}

TrainingDelta AnnotationStore::merge_batch(const std::string& batch_id) {
  std::lock_guard lock(writer_);
  const BatchState& b = state_->batch(batch_id);
  if (b.status != BatchStatus::kCompleted) {
    throw Error(ErrorCode::kBatchNotCompleted, "batch '" + batch_id + "' is not completed");
  }
  if (!b.merged) commit({{"type", "merge"}, {"batch", batch_id}}, batch_id);
  const auto& s = *state_;
  TrainingDelta d;
  d.batch_id = batch_id;
  for (std::int64_t id : s.batch(batch_id).record_ids) d.labels.push_back(s.training->at(id));
  return d;
}

void AnnotationStore::apply_model_predictions(const std::string& batch_id,
                                              std::span<const PredictionUpdate> updates) {
  std::lock_guard lock(writer_);
  const auto& s = *state_;
  const BatchState& b = s.batch(batch_id);
  if (b.status == BatchStatus::kCompleted) {
    throw Error(ErrorCode::kBatchImmutable, "batch '" + batch_id + "' is completed");
  }
  if (b.leased_at(now())) {
    throw Error(ErrorCode::kLeaseConflict, "batch '" + batch_id + "' is checked out");
  }
  if (updates.empty()) return;
  const std::set<std::int64_t> members(b.record_ids.begin(), b.record_ids.end());
  std::set<std::int64_t> seen;
  json uj = json::array();
  for (const auto& u : updates) {
    if (!members.count(u.record_id)) {
      throw Error(ErrorCode::kUnknownRecord, "record " + std::to_string(u.record_id) +
                                                 " is not in batch '" + batch_id + "'");
    }
    if (!seen.insert(u.record_id).second) {
      throw Error(ErrorCode::kInvalidArgument,
                  "record " + std::to_string(u.record_id) + " updated twice");
    }
    if (u.confidence.size() != spec_.size() || (u.coords && u.coords->size() != spec_.size())) {
      throw Error(ErrorCode::kShapeMismatch, "prediction is not over the store skeleton");
    }
    json e = {{"record", u.record_id}, {"confidence", u.confidence}};
    if (u.coords) {
      json c = json::array();
      for (const Vec2& v : *u.coords) {
        c.push_back(v.x);
        c.push_back(v.y);
      }
      e["coords"] = std::move(c);
    }
    uj.push_back(std::move(e));
  }
  commit({{"type", "predict"}, {"batch", batch_id}, {"updates", uj}}, batch_id);
}

std::vector<AnnotationRecord> records_from_pseudo_labels(const json& doc,
                                                         const SkeletonSpec& spec) {
  std::vector<AnnotationRecord> out;
  try {
    const auto names = doc.at("keypoint_names").get<std::vector<std::string>>();
    std::vector<std::optional<std::size_t>> dst;
    for (const auto& n : names) dst.push_back(spec.find(n));
    std::int64_t next_id = 1;
    for (const auto& a : doc.at("annotations")) {
      const auto& kp = a.at("keypoints");
      if (!kp.is_array() || kp.size() != 3 * names.size()) {
        throw Error(ErrorCode::kParseError, "annotation keypoints do not match keypoint_names");
      }
      AnnotationRecord r;
      r.id = a.value("id", next_id);
      next_id = r.id + 1;
      r.image_id = a.at("image_id").get<std::int64_t>();
      r.pose = Pose2D(spec.size(), Visibility::kNotLabeled);
      std::fill(r.pose.confidence.begin(), r.pose.confidence.end(), 0.0);
      r.provenance.assign(spec.size(), Provenance::kModelInitialized);
      const json conf = a.value("keypoint_confidence", json());
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (!dst[i]) continue;
        const std::size_t k = *dst[i];
        r.pose.coords[k] = {kp[3 * i].get<double>(), kp[3 * i + 1].get<double>()};
        r.pose.visibility[k] = visibility_from_int(kp[3 * i + 2].get<int>());
        if (conf.is_array() && i < conf.size()) r.pose.confidence[k] = conf[i].get<double>();
      }
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("malformed pseudo-label document: ") + e.what());
  }
  return out;
}

std::vector<std::pair<std::string, std::vector<AnnotationRecord>>> make_batches(
    std::vector<AnnotationRecord> records, std::size_t batch_size, const std::string& prefix) {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  std::vector<std::pair<std::string, std::vector<AnnotationRecord>>> out;
  for (std::size_t i = 0; i < records.size(); i += batch_size) {
    char name[32];
    std::snprintf(name, sizeof name, "-%04zu", out.size() + 1);
    const auto end = std::min(records.size(), i + batch_size);
    out.emplace_back(prefix + name,
                     std::vector<AnnotationRecord>(std::make_move_iterator(records.begin() + i),
                                                   std::make_move_iterator(records.begin() + end)));
  }
  return out;
}

namespace {

double spine_label_error(const ToyCorpus& c, std::span<const std::size_t> pool) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i : pool) {
    const auto& inst = c.instances[i];
    for (std::size_t k : c.spec.spine_set) {
      sum += norm(inst.label_pose.coords[k] - inst.gt_pose.coords[k]);
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

RefinementResult refinement_cycle(const ToyCorpus& corpus, const ToyModel& model,
                                  const RefinementConfig& config) {
  if (config.batches == 0 || config.batch_size == 0) {
    throw Error(ErrorCode::kInvalidArgument, "refinement needs batches >= 1 and batch_size >= 1");
  }
  if (!(config.annotator_sigma >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "annotator sigma must be >= 0");
  }
  const auto split = split_corpus(corpus.instances.size(), config.fine_tune.holdout_fraction);
  if (config.batches * config.batch_size > split.train.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "training split of " + std::to_string(split.train.size()) +
                    " instances cannot fill " + std::to_string(config.batches) +
                    " batches of " + std::to_string(config.batch_size));
  }
  const SkeletonSpec& spec = corpus.spec;
  const AxisGrid& grid = corpus.config.grid;
  ToyCorpus work = corpus;
  AnnotationStore store(spec, config.store);

  std::map<std::int64_t, std::size_t> instance_of;
  std::vector<std::string> batch_ids;
  for (std::size_t b = 0; b < config.batches; ++b) {
    std::vector<AnnotationRecord> records;
    for (std::size_t j = 0; j < config.batch_size; ++j) {
      const std::size_t i = split.train[b * config.batch_size + j];
      AnnotationRecord r;
      r.id = static_cast<std::int64_t>(i) + 1;
      r.image_id = r.id;
      r.pose = work.instances[i].label_pose;
      r.pose.confidence.assign(spec.size(), 0.0);
      r.provenance.assign(spec.size(), Provenance::kHumanCorrected);
      for (std::size_t k : spec.spine_set) r.provenance[k] = Provenance::kModelInitialized;
      instance_of[r.id] = i;
      records.push_back(std::move(r));
    }
    batch_ids.push_back("cycle-" + std::to_string(b + 1));
    store.create_batch(batch_ids.back(), std::move(records));
  }

  RefinementResult result;
  result.model = model;
  CycleRecord initial;
  initial.label_error = spine_label_error(work, split.train);
  initial.model_error = decode_error(model, work, split.heldout, spec.spine_set);
  result.timeline.push_back(initial);

  std::mt19937_64 rng(config.seed ^ 0xa5a5a5a5ULL);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::string session = "oracle";
  for (std::size_t cycle = 1; cycle <= config.batches; ++cycle) {
    const std::string& batch_id = batch_ids[cycle - 1];
    std::vector<PredictionUpdate> updates;
    for (std::int64_t id : store.snapshot()->batch(batch_id).record_ids) {
      const auto& feats = work.instances[instance_of.at(id)].features;
      const auto logits = result.model.forward(std::span<const double>(feats));
      const auto dists = distributions_from_logits(logits, grid);
      updates.push_back({id, decode_pose(dists, spec).confidence, std::nullopt});
    }
    store.apply_model_predictions(batch_id, updates);
    store.checkout(session, batch_id);

    const auto records = store.snapshot()->records(batch_id);
    const auto flags = flag_for_review(records, config.tau);
    CycleRecord rec;
    rec.cycle = cycle;
    rec.batch_id = batch_id;
    rec.flagged = flags.size();
    std::map<std::int64_t, std::vector<KeypointEdit>> edits;
    for (const auto& f : flags) {
      const Vec2 gt = work.instances[instance_of.at(f.record_id)].gt_pose.coords[f.keypoint];
      Vec2 v{gt.x + config.annotator_sigma * noise(rng), gt.y + config.annotator_sigma * noise(rng)};
      v.x = std::clamp(v.x, 0.0, grid.width() - 1e-6);
      v.y = std::clamp(v.y, 0.0, grid.height() - 1e-6);
      edits[f.record_id].push_back({f.keypoint, v, Visibility::kLabeledVisible});
    }
    for (const auto& [id, e] : edits) {
      store.submit_correction(session, id, store.snapshot()->record(id).version, e);
    }
    store.complete(session, batch_id);
    const TrainingDelta delta = store.merge_batch(batch_id);

    double corrected = 0.0;
    for (const auto& l : delta.labels) {
      auto& inst = work.instances[instance_of.at(l.record_id)];
      for (std::size_t k = 0; k < spec.size(); ++k) {
        if (inst.label_pose.coords[k] == l.pose.coords[k]) continue;
        inst.label_pose.coords[k] = l.pose.coords[k];
        inst.gt_dists[k] = encode_keypoint(l.pose.coords[k], grid, corpus.config.target_sigma_bins);
      }
    }
    for (const auto& f : flags) {
      const auto& inst = work.instances[instance_of.at(f.record_id)];
      corrected += norm(inst.label_pose.coords[f.keypoint] - inst.gt_pose.coords[f.keypoint]);
    }
    rec.corrected_error = flags.empty() ? 0.0 : corrected / static_cast<double>(flags.size());

    TrainConfig tc = config.fine_tune;
    tc.seed = config.fine_tune.seed + cycle;
    tc.eval_every = tc.steps;
    result.model = fine_tune(result.model, model, work, split.train, split.heldout, tc).model;
    rec.label_error = spine_label_error(work, split.train);
    rec.model_error = decode_error(result.model, work, split.heldout, spec.spine_set);
    result.timeline.push_back(rec);
  }
  result.training = *store.snapshot()->training;
  return result;
}

json to_json(const RefinementResult& r) {
  json t = json::array();
  for (const auto& c : r.timeline) {
    t.push_back({{"cycle", c.cycle},
                 {"batch_id", c.batch_id},
                 {"flagged", c.flagged},
                 {"label_error_px", c.label_error},
                 {"corrected_error_px", c.corrected_error},
                 {"model_spine_error_px", c.model_error}});
  }
  return {{"timeline", t}, {"merged_records", r.training.size()}};
}

}  // namespace spinepose
