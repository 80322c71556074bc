#include "spinepose/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "spinepose/activeloop.hpp"
#include "spinepose/error.hpp"
#include "spinepose/evaluator.hpp"
#include "spinepose/gradcheck.hpp"
#include "spinepose/headexpand.hpp"
#include "spinepose/pseudolabel.hpp"
#include "spinepose/service.hpp"
#include "spinepose/skeleton.hpp"
#include "spinepose/toytrain.hpp"
#include "spinepose/triangulate.hpp"

namespace spinepose {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Globals {
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool json_output = false;
};

// What a subcommand hands back: the machine-readable result, its text form,
// files it wrote, and a nonzero failure (code, message) when it did not hold.
struct Outcome {
  json result = json::object();
  std::string text;
  std::vector<std::string> outputs;
  std::vector<std::string> decisions;
  std::optional<std::pair<std::string, std::string>> failure;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, path + ": " + e.what());
  }
}

std::string write_file(const Globals& g, const std::string& name, const std::string& body) {
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  const fs::path p = fs::path(g.out_dir) / name;
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << body)) throw Error(ErrorCode::kIoError, "cannot write " + p.string());
  return p.string();
}

std::string write_json(const Globals& g, const std::string& name, const json& doc) {
  return write_file(g, name, doc.dump(2) + "\n");
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  int seeds = 100;
  double h = 1e-5;
  double tolerance = 1e-4;
};

Outcome run_gradcheck_cmd(const Globals& g, const GradcheckArgs& a) {
  if (a.seeds < 1) throw Error(ErrorCode::kInvalidArgument, "--seeds must be >= 1");
  const auto s = run_gradcheck(a.seeds, g.seed, a.h);
  Outcome o;
  o.result = {{"seeds", s.seeds},
              {"max_rel_error", s.max_rel_error},
              {"max_abs_error", s.max_abs_error},
              {"min_terms", to_json(s.min_terms)},
              {"seconds", s.seconds},
              {"tolerance", a.tolerance}};
  std::ostringstream os;
  os << "gradcheck over " << s.seeds << " seeds: max relative error " << std::scientific
     << s.max_rel_error << ", max absolute error " << s.max_abs_error << std::defaultfloat
     << " (" << fmt(s.seconds, 2) << " s)\n";
  o.text = os.str();
  o.decisions = {"relative error |a - n| / max(|a|, |n|, 1e-4); central differences"};
  if (!(s.max_rel_error < a.tolerance)) {
    o.failure = {{"GradientMismatch", "max relative error " + std::to_string(s.max_rel_error) +
                                          " exceeds " + std::to_string(a.tolerance)}};
  }
  return o;
}

// ---------------------------------------------------------------- corpus

struct CorpusArgs {
  std::size_t count = 512;
  double spine_noise = 0.0;
  double feature_noise = 0.02;
};

ToyCorpus corpus_from(const Globals& g, const CorpusArgs& a) {
  CorpusConfig c;
  c.spine_label_noise_px = a.spine_noise;
  c.feature_noise = a.feature_noise;
  return make_synthetic_corpus(a.count, g.seed, default_extended_skeleton(), c);
}

json flat(const Pose2D& p) {
  json a = json::array();
  for (std::size_t k = 0; k < p.size(); ++k) {
    a.push_back(p.coords[k].x);
    a.push_back(p.coords[k].y);
    a.push_back(static_cast<int>(p.visibility[k]));
  }
  return a;
}

std::array<double, 4> bbox_of(const Pose2D& p, double pad) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!p.labeled(k)) continue;
    x0 = std::min(x0, p.coords[k].x);
    y0 = std::min(y0, p.coords[k].y);
    x1 = std::max(x1, p.coords[k].x);
    y1 = std::max(y1, p.coords[k].y);
  }
  return {x0 - pad, y0 - pad, x1 - x0 + 2 * pad, y1 - y0 + 2 * pad};
}

struct CorpusGenArgs {
  CorpusArgs corpus;
  double prediction_noise = 2.0;
  double detection_noise = 1.5;
};

Outcome run_corpus_gen(const Globals& g, const CorpusGenArgs& a) {
  const ToyCorpus corpus = corpus_from(g, a.corpus);
  const SkeletonSpec& spec = corpus.spec;
  const SkeletonSpec coco = [] {
    SkeletonSpec s = body_only(default_extended_skeleton());
    s.keypoints.resize(17);
    return s;
  }();
  std::mt19937_64 rng(g.seed ^ 0x5eedULL);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.3, 1.0);

  json cat_bones = json::array();
  for (const auto& b : spec.bones) cat_bones.push_back({b.from + 1, b.to + 1});
  json gt = {{"info", {{"description", "synthetic figures"}, {"seed", g.seed}}},
             {"images", json::array()},
             {"annotations", json::array()},
             {"categories",
              {{{"id", 1}, {"name", "person"}, {"keypoints", spec.names()}, {"skeleton", cat_bones}}}}};
  json preds = json::array();
  json dets = json::array();
  for (std::size_t i = 0; i < corpus.instances.size(); ++i) {
    const auto id = static_cast<std::int64_t>(i + 1);
    const Pose2D& pose = corpus.instances[i].gt_pose;
    gt["images"].push_back({{"id", id},
                            {"file_name", std::to_string(id) + ".png"},
                            {"width", corpus.config.grid.width()},
                            {"height", corpus.config.grid.height()}});
    const auto box = bbox_of(pose, 8.0);
    gt["annotations"].push_back({{"id", id},
                                 {"image_id", id},
                                 {"category_id", 1},
                                 {"keypoints", flat(pose)},
                                 {"num_keypoints", pose.size()},
                                 {"bbox", box},
                                 {"area", box[2] * box[3]},
                                 {"iscrowd", 0}});
    Pose2D p = pose;
    for (auto& c : p.coords) c += a.prediction_noise * Vec2{n(rng), n(rng)};
    preds.push_back({{"id", id}, {"image_id", id}, {"category_id", 1},
                     {"keypoints", flat(p)}, {"score", u(rng)}});
    json kp = json::array();
    for (const auto& k : coco.keypoints) {
      const Vec2 v = pose.coords[spec.index_of(k.name)];
      kp.push_back(v.x + a.detection_noise * n(rng));
      kp.push_back(v.y + a.detection_noise * n(rng));
      kp.push_back(u(rng));
    }
    dets.push_back({{"id", id}, {"image_id", id}, {"category_id", 1},
                    {"keypoints", kp}, {"score", u(rng)}, {"bbox", box}});
  }
  Outcome o;
  o.outputs = {write_json(g, "gt.json", gt), write_json(g, "predictions.json", preds),
               write_json(g, "detections.json", dets)};
  o.result = {{"count", corpus.instances.size()},
              {"keypoints", spec.size()},
              {"files", o.outputs}};
  o.text = "wrote " + std::to_string(corpus.instances.size()) +
           " figures: gt.json, predictions.json, detections.json in " + g.out_dir + "\n";
  o.decisions = {"synthetic figure generator; predictions = gt + N(0, prediction_noise^2)",
                 "detections are COCO-17 triples with uniform(0.3, 1) confidence"};
  return o;
}

// ---------------------------------------------------------------- training

struct TrainArgs {
  CorpusArgs corpus;
  TrainConfig train;
  std::size_t teacher_steps = 2000;
};

TrainConfig teacher_config(const TrainArgs& a) {
  TrainConfig t = a.train;
  t.steps = a.teacher_steps;
  t.warmup_steps = std::min(t.warmup_steps, t.steps / 2);
  return t;
}

Outcome run_train_toy(const Globals& g, TrainArgs a) {
  a.train.seed = g.seed;
  a.train.validate();
  const ToyCorpus corpus = corpus_from(g, a.corpus);
  const auto teacher = pretrain_teacher(corpus, teacher_config(a));
  const auto student = train_student(teacher.model, corpus, a.train);
  std::string lines;
  for (const auto& s : student.steps) {
    lines += json{{"step", s.step}, {"lr", s.lr}, {"loss", to_json(s.loss)}}.dump() + "\n";
  }
  json evals = json::array();
  for (const auto& e : student.evals) {
    json j = {{"step", e.step},
              {"body_error_px", e.body_error},
              {"spine_error_px", e.spine_error},
              {"body_retention", e.body_retention}};
    lines += json{{"eval", j}}.dump() + "\n";
    evals.push_back(j);
  }
  Outcome o;
  o.outputs.push_back(write_file(g, "train-toy.metrics.jsonl", lines));
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  const std::string tpath = (fs::path(g.out_dir) / "teacher.spm").string();
  const std::string spath = (fs::path(g.out_dir) / "student.spm").string();
  save_model(tpath, teacher.model);
  save_model(spath, student.model);
  o.outputs.push_back(tpath);
  o.outputs.push_back(spath);
  const auto& last = student.evals.back();
  o.result = {{"config", to_json(a.train)},
              {"teacher_heldout_error_px", teacher.heldout_error},
              {"final", evals.back()},
              {"evals", evals}};
  o.text = "teacher held-out body error " + fmt(teacher.heldout_error, 3) + " px\n" +
           "student after " + std::to_string(a.train.steps) + " steps: body " +
           fmt(last.body_error, 3) + " px, spine " + fmt(last.spine_error, 3) +
           " px, retention " + fmt(last.body_retention, 5) + "\n";
  o.decisions = {"warmup + cosine to 5% of base lr", "AdamW, decay on weights only",
                 "retention = mean symmetric KL over body keypoints"};
  return o;
}

Outcome run_ablate(const Globals& g, TrainArgs a) {
  a.train.seed = g.seed;
  a.train.validate();
  const ToyCorpus corpus = corpus_from(g, a.corpus);
  // The suite pretrains its own teacher with the shared config.
  const auto table = ablation_suite(corpus, a.train);
  Outcome o;
  o.result = to_json(table);
  o.outputs.push_back(write_json(g, "ablate.json", o.result));
  o.text = format_table(table);
  o.decisions = {"disabled terms get weight 0; shared teacher, corpus and seeds"};
  return o;
}

// ---------------------------------------------------------------- pseudo-label

struct PseudoArgs {
  std::string input;
  std::string output = "pseudo_labels.json";
};

Outcome run_pseudo_label(const Globals& g, const PseudoArgs& a) {
  const json doc = pseudo_label_document(read_json(a.input), default_extended_skeleton());
  Outcome o;
  o.outputs.push_back(write_json(g, a.output, doc));
  o.result = {{"annotations", doc["annotations"].size()},
              {"skipped", doc["skipped"]},
              {"output", o.outputs.back()}};
  o.text = "labeled " + std::to_string(doc["annotations"].size()) + " instances (" +
           std::to_string(doc["skipped"].size()) + " without spine) -> " + o.outputs.back() + "\n";
  o.decisions = {"single cubic Bezier midline, bow from head_top side offset",
                 "64-segment arc-length sampling"};
  return o;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string gt;
  std::string predictions;
  std::string subset = "all";
  std::string bbox_mode = "gt";
  std::string sigmas_file;
  std::size_t max_detections = 20;
  std::string label = "predictions";
};

Outcome run_eval(const Globals& g, const EvalArgs& a) {
  SkeletonSpec spec = default_extended_skeleton();
  if (!a.sigmas_file.empty()) spec.sigmas = sigmas_from_json(read_json(a.sigmas_file), spec);
  const GtSet gt = gt_from_json(read_json(a.gt), spec, bbox_mode_from_string(a.bbox_mode));
  const auto preds = predictions_from_json(read_json(a.predictions), spec);
  auto subsets = default_subsets(spec);
  if (a.subset != "all") {
    auto it = std::find_if(subsets.begin(), subsets.end(),
                           [&](const EvalSubset& s) { return s.name == a.subset; });
    if (it == subsets.end()) {
      throw Error(ErrorCode::kInvalidArgument, "unknown subset '" + a.subset + "'");
    }
    subsets = {*it};
  }
  EvalOptions opts;
  opts.max_detections = a.max_detections;
  const auto r = evaluate(gt, preds, spec, subsets, opts);
  Outcome o;
  o.result = to_json(r);
  o.outputs.push_back(write_json(g, "eval.json", o.result));
  o.text = format_table(r, a.label);
  o.outputs.push_back(write_file(g, "eval.txt", o.text));
  o.decisions = {"OKS exp(-d^2 / (2 s^2 sigma^2)), s^2 from bbox_mode",
                 "greedy matching by score, ties to lower gt id; 101-point AP"};
  return o;
}

// ---------------------------------------------------------------- triangulate

struct TriArgs {
  std::string cameras;
  std::string views;
  std::string reference;
  std::size_t camera_count = 5;
  std::size_t frames = 60;
  double pixel_noise = -1.0;  // < 0: calibrate to target_rmse
  double target_rmse = 0.03;
  double threshold = kRefinementGate;
};

json views_to_json(const ViewSequence& v, const SkeletonSpec& spec,
                   std::span<const CameraModel> cams) {
  json frames = json::array();
  for (const auto& f : v) {
    json views = json::array();
    for (const auto& p : f) views.push_back(flat(p));
    frames.push_back(std::move(views));
  }
  json ids = json::array();
  for (const auto& c : cams) ids.push_back(c.id);
  return {{"keypoint_names", spec.names()}, {"camera_ids", ids}, {"frames", frames}};
}

ViewSequence views_from_json(const json& doc, const SkeletonSpec& spec) {
  ViewSequence out;
  try {
    for (const auto& f : doc.at("frames")) {
      std::vector<Pose2D> views;
      for (const auto& v : f) {
        if (v.size() != 3 * spec.size()) {
          throw Error(ErrorCode::kShapeMismatch, "view keypoints do not match the skeleton");
        }
        Pose2D p(spec.size(), Visibility::kNotLabeled);
        for (std::size_t k = 0; k < spec.size(); ++k) {
          p.coords[k] = {v[3 * k].get<double>(), v[3 * k + 1].get<double>()};
          p.visibility[k] = static_cast<Visibility>(std::clamp(v[3 * k + 2].get<int>(), 0, 2));
        }
        views.push_back(std::move(p));
      }
      out.push_back(std::move(views));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("views: ") + e.what());
  }
  return out;
}

json reference_to_json(std::span<const Skeleton3D> ref, const SkeletonSpec& spec) {
  json frames = json::array();
  for (const auto& f : ref) {
    json pts = json::array();
    for (const auto& p : f) pts.push_back({p.x(), p.y(), p.z()});
    frames.push_back(std::move(pts));
  }
  return {{"keypoint_names", spec.names()}, {"units", "m"}, {"frames", frames}};
}

std::vector<Skeleton3D> reference_from_json(const json& doc) {
  std::vector<Skeleton3D> out;
  try {
    for (const auto& f : doc.at("frames")) {
      Skeleton3D s;
      for (const auto& p : f) s.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("reference: ") + e.what());
  }
  return out;
}

Outcome run_triangulate(const Globals& g, const TriArgs& a) {
  const SkeletonSpec spec = default_extended_skeleton();
  std::vector<CameraModel> cams;
  std::vector<Skeleton3D> ref;
  ViewSequence views;
  Outcome o;
  const bool files = !a.cameras.empty() || !a.views.empty() || !a.reference.empty();
  if (files) {
    if (a.cameras.empty() || a.views.empty() || a.reference.empty()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "--cameras, --views and --reference go together (omit all for a synthetic rig)");
    }
    cams = cameras_from_json(read_json(a.cameras));
    views = views_from_json(read_json(a.views), spec);
    ref = reference_from_json(read_json(a.reference));
  } else {
    cams = make_ring_rig(a.camera_count, g.seed);
    ref = synthetic_motion(spec, a.frames, g.seed);
    double sigma = a.pixel_noise;
    if (sigma < 0.0) sigma = calibrate_pixel_noise(cams, ref, spec.body_set, a.target_rmse, g.seed);
    views = project_sequence(ref, cams, {sigma, g.seed + 1, {}});
    o.result["pixel_noise"] = sigma;
    o.outputs = {write_json(g, "cameras.json", cameras_to_json(cams)),
                 write_json(g, "views.json", views_to_json(views, spec, cams)),
                 write_json(g, "reference.json", reference_to_json(ref, spec))};
  }
  const auto report = validate_sequence(views, cams, ref, a.threshold);
  o.result["report"] = to_json(report, spec);
  o.result["body_mean_rmse_m"] = report.mean_rmse(spec.body_set);
  o.outputs.push_back(write_json(g, "triangulate.json", o.result));
  o.text = format_summary(report, spec);
  if (o.result.contains("pixel_noise")) {
    o.text = "synthetic rig: " + std::to_string(cams.size()) + " cameras, pixel noise " +
             fmt(o.result["pixel_noise"].get<double>(), 3) + " px\n" + o.text;
  }
  o.decisions = {"linear DLT in a normalised frame", "flag rule rmse > threshold (strict)"};
  return o;
}

// ---------------------------------------------------------------- refine

struct RefineArgs {
  CorpusArgs corpus{640, 6.0, 0.02};
  TrainConfig train;
  std::size_t teacher_steps = 2000;
  RefinementConfig refine;
};

Outcome run_refine(const Globals& g, RefineArgs a) {
  a.train.seed = g.seed;
  a.refine.seed = g.seed;
  const ToyCorpus corpus = corpus_from(g, a.corpus);
  TrainArgs ta{a.corpus, a.train, a.teacher_steps};
  const auto teacher = pretrain_teacher(corpus, teacher_config(ta));
  const auto student = train_student(teacher.model, corpus, a.train);
  const auto r = refinement_cycle(corpus, student.model, a.refine);
  Outcome o;
  o.result = to_json(r);
  o.outputs.push_back(write_json(g, "refine.json", o.result));
  std::ostringstream os;
  os << "cycle  batch      flagged  label_err_px  corrected_px  model_spine_px\n";
  for (const auto& c : r.timeline) {
    char line[128];
    std::snprintf(line, sizeof line, "%5zu  %-9s  %7zu  %12.4f  %12.4f  %14.4f\n", c.cycle,
                  c.batch_id.empty() ? "-" : c.batch_id.c_str(), c.flagged, c.label_error,
                  c.corrected_error, c.model_error);
    os << line;
  }
  o.text = os.str();
  o.decisions = {"confidence = min over axes of the max-bin probability",
                 "predictions update confidences; labels change only by correction"};
  return o;
}

// ---------------------------------------------------------------- serve

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir = "spinepose-data";
  double tau = 0.5;
  double lease_ttl_s = 900.0;
  std::string import;
  std::size_t batch_size = 32;
  std::string image_dir;
  std::string static_dir;
};

Outcome run_serve(const Globals&, const ServeArgs& a, std::ostream& out) {
  if (!(a.lease_ttl_s > 0.0)) throw Error(ErrorCode::kInvalidArgument, "--lease-ttl must be > 0");
  StoreOptions so;
  so.data_dir = a.data_dir;
  so.lease_ttl = std::chrono::milliseconds(static_cast<std::int64_t>(a.lease_ttl_s * 1000.0));
  AnnotationStore store(default_extended_skeleton(), so);
  std::size_t imported = 0;
  if (!a.import.empty()) {
    auto recs = records_from_pseudo_labels(read_json(a.import), store.spec());
    const auto snap = store.snapshot();
    std::erase_if(recs, [&](const AnnotationRecord& r) { return snap->history.count(r.id) > 0; });
    const std::string prefix = "import" + std::to_string(snap->batch_order.size());
    for (auto& [id, batch] : make_batches(std::move(recs), a.batch_size, prefix)) {
      imported += batch.size();
      store.create_batch(id, std::move(batch));
    }
  }
  ServiceOptions opts;
  opts.tau = a.tau;
  opts.image_dir = a.image_dir;
  opts.static_dir = a.static_dir;
  AnnotationService service(store, opts);

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  const int port = service.start(a.host, a.port);
  out << "serving on http://" << a.host << ":" << port << " (data " << a.data_dir << ", tau "
      << a.tau << ", " << store.snapshot()->batches.size() << " batches)" << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  service.stop();
  pthread_sigmask(SIG_UNBLOCK, &set, nullptr);

  Outcome o;
  o.result = {{"port", port}, {"imported_records", imported}, {"metrics", service.metrics()}};
  o.text = "stopped on signal " + std::to_string(sig) + "\n";
  o.decisions = {"lease TTL and tau from flags; JSON-lines event log per batch"};
  return o;
}

json versions() {
  return {{"spinepose", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION},
          {"httplib", CPPHTTPLIB_VERSION}};
}

void add_corpus_flags(CLI::App* c, CorpusArgs& a) {
  c->add_option("--count", a.count, "Synthetic figures")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--spine-noise", a.spine_noise, "Spine label noise std (px)")->capture_default_str();
  c->add_option("--feature-noise", a.feature_noise, "Feature noise std")->capture_default_str();
}

void add_train_flags(CLI::App* c, TrainConfig& t, std::size_t& teacher_steps) {
  c->add_option("--steps", t.steps, "Student steps")->capture_default_str();
  c->add_option("--teacher-steps", teacher_steps, "Teacher steps")->capture_default_str();
  c->add_option("--batch-size", t.batch_size)->capture_default_str();
  c->add_option("--lr", t.base_lr, "Base learning rate")->capture_default_str();
  c->add_option("--warmup", t.warmup_steps)->capture_default_str();
  c->add_option("--hidden", t.hidden)->capture_default_str();
  c->add_option("--alpha", t.weights.alpha)->capture_default_str();
  c->add_option("--beta", t.weights.beta)->capture_default_str();
  c->add_option("--gamma1", t.weights.gamma1)->capture_default_str();
  c->add_option("--gamma2", t.weights.gamma2)->capture_default_str();
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spine-aware pose estimation toolkit", "spinepose"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_config("--config", "", "Key = value config file; [subcommand] sections; flags override");
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and the manifest")->capture_default_str();
  app.add_flag("--json", g.json_output, "Print machine-readable JSON");

  std::function<Outcome()> run;
  auto on = [&](CLI::App* sub, std::function<Outcome()> f) {
    sub->callback([&run, f] { run = f; });
  };

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the total loss gradient");
  gc->add_option("--seeds", ga.seeds, "Random instances")->capture_default_str();
  gc->add_option("--step", ga.h, "Central-difference step")->capture_default_str();
  gc->add_option("--tolerance", ga.tolerance, "Max relative error")->capture_default_str();
  on(gc, [&] { return run_gradcheck_cmd(g, ga); });

  TrainArgs ta;
  auto* tt = app.add_subcommand("train-toy", "Pretrain a body teacher, expand and train the student");
  add_corpus_flags(tt, ta.corpus);
  add_train_flags(tt, ta.train, ta.teacher_steps);
  on(tt, [&] { return run_train_toy(g, ta); });

  TrainArgs aa;
  auto* ab = app.add_subcommand("ablate", "Five-row loss ablation on the toy task");
  add_corpus_flags(ab, aa.corpus);
  add_train_flags(ab, aa.train, aa.teacher_steps);
  on(ab, [&] { return run_ablate(g, aa); });

  PseudoArgs pa;
  auto* pl = app.add_subcommand("pseudo-label", "Add spine guesses to COCO-style detections");
  pl->add_option("--input", pa.input, "Detections JSON")->required()->check(CLI::ExistingFile);
  pl->add_option("--output", pa.output, "Output name inside --out-dir")->capture_default_str();
  on(pl, [&] { return run_pseudo_label(g, pa); });

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Keypoint AP/AR per subset");
  ev->add_option("--gt", ea.gt, "COCO keypoint ground truth")->required()->check(CLI::ExistingFile);
  ev->add_option("--predictions", ea.predictions, "COCO results")->required()->check(CLI::ExistingFile);
  ev->add_option("--subset", ea.subset, "body, feet, spine, overall or all")->capture_default_str();
  ev->add_option("--bbox-mode", ea.bbox_mode, "gt (bbox area) or provided (area field)")
      ->capture_default_str()->check(CLI::IsMember({"gt", "provided"}));
  ev->add_option("--sigmas-file", ea.sigmas_file, "Per-keypoint sigmas JSON")->check(CLI::ExistingFile);
  ev->add_option("--max-detections", ea.max_detections)->capture_default_str();
  ev->add_option("--label", ea.label, "Row label in the table")->capture_default_str();
  on(ev, [&] { return run_eval(g, ea); });

  TriArgs ra;
  auto* tv = app.add_subcommand("triangulate-validate", "Multi-view consistency against a 3D reference");
  tv->add_option("--cameras", ra.cameras, "Camera rig JSON")->check(CLI::ExistingFile);
  tv->add_option("--views", ra.views, "Per-frame per-view 2D poses JSON")->check(CLI::ExistingFile);
  tv->add_option("--reference", ra.reference, "Reference 3D skeleton JSON")->check(CLI::ExistingFile);
  tv->add_option("--camera-count", ra.camera_count, "Synthetic rig size")->capture_default_str();
  tv->add_option("--frames", ra.frames, "Synthetic frames")->capture_default_str();
  tv->add_option("--pixel-noise", ra.pixel_noise, "Synthetic noise px (< 0: calibrate)")->capture_default_str();
  tv->add_option("--target-rmse", ra.target_rmse, "Calibration target (m)")->capture_default_str();
  tv->add_option("--threshold", ra.threshold, "Refinement gate (m)")->capture_default_str();
  on(tv, [&] { return run_triangulate(g, ra); });

  ServeArgs sa;
  auto* sv = app.add_subcommand("serve", "Annotation service for the review loop");
  sv->add_option("--host", sa.host)->capture_default_str();
  sv->add_option("--port", sa.port)->capture_default_str()->check(CLI::Range(0, 65535));
  sv->add_option("--data-dir", sa.data_dir, "Event log and snapshot directory")->capture_default_str();
  sv->add_option("--tau", sa.tau, "Review confidence threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  sv->add_option("--lease-ttl", sa.lease_ttl_s, "Lease lifetime (s)")->capture_default_str();
  sv->add_option("--import", sa.import, "Pseudo-label JSON to enqueue")->check(CLI::ExistingFile);
  sv->add_option("--batch-size", sa.batch_size, "Records per imported batch")->capture_default_str()->check(CLI::PositiveNumber);
  sv->add_option("--image-dir", sa.image_dir, "Directory of <image_id>.png/.jpg");
  sv->add_option("--static-dir", sa.static_dir, "UI assets mounted at /");
  on(sv, [&] { return run_serve(g, sa, out); });

  CorpusGenArgs ca;
  auto* cg = app.add_subcommand("corpus-gen", "Synthetic COCO ground truth, predictions and detections");
  add_corpus_flags(cg, ca.corpus);
  cg->add_option("--prediction-noise", ca.prediction_noise, "px")->capture_default_str();
  cg->add_option("--detection-noise", ca.detection_noise, "px")->capture_default_str();
  on(cg, [&] { return run_corpus_gen(g, ca); });

  RefineArgs fa;
  auto* rf = app.add_subcommand("refine", "Simulated active-learning refinement cycles");
  add_corpus_flags(rf, fa.corpus);
  add_train_flags(rf, fa.train, fa.teacher_steps);
  rf->add_option("--batches", fa.refine.batches)->capture_default_str();
  rf->add_option("--refine-batch-size", fa.refine.batch_size)->capture_default_str();
  rf->add_option("--tau", fa.refine.tau)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  rf->add_option("--annotator-sigma", fa.refine.annotator_sigma, "px")->capture_default_str();
  rf->add_option("--fine-tune-steps", fa.refine.fine_tune.steps)->capture_default_str();
  on(rf, [&] { return run_refine(g, fa); });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  json manifest = {{"subcommand", name},
                   {"args", args},
                   {"seed", g.seed},
                   {"config", app.config_to_str(true, false)},
                   {"versions", versions()}};
  int code = kExitOk;
  try {
    Outcome o = run();
    manifest["decisions"] = o.decisions;
    manifest["outputs"] = o.outputs;
    if (g.json_output) {
      out << o.result.dump(2) << "\n";
    } else {
      out << o.text;
    }
    if (o.failure) {
      err << json{{"code", o.failure->first}, {"message", o.failure->second}}.dump() << "\n";
      manifest["status"] = "failed";
      manifest["error"] = {{"code", o.failure->first}, {"message", o.failure->second}};
      code = kExitDomainError;
    } else {
      manifest["status"] = "ok";
    }
  } catch (const Error& e) {
    const json body = {{"code", error_code_name(e.code())}, {"message", e.what()}};
    err << body.dump() << "\n";
    manifest["status"] = "error";
    manifest["error"] = body;
    code = kExitDomainError;
  } catch (const std::exception& e) {
    const json body = {{"code", "InternalError"}, {"message", e.what()}};
    err << body.dump() << "\n";
    manifest["status"] = "error";
    manifest["error"] = body;
    code = kExitDomainError;
  }
  try {
    write_json(g, name + ".manifest.json", manifest);
  } catch (const Error& e) {
    err << json{{"code", error_code_name(e.code())}, {"message", e.what()}}.dump() << "\n";
    if (code == kExitOk) code = kExitDomainError;
  }
  return code;
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace spinepose
