#include "spinepose/toytrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Arc fractions of the chain landmarks along the generated midline.
constexpr double kChainFractions[kSpineChainLength] = {0.0, 0.1, 0.2, 0.3, 0.45,
                                                       0.6, 0.8, 0.9, 1.0};

// One synthetic figure over the extended skeleton, by keypoint name.
std::map<std::string, Vec2> sample_figure(Rng& rng) {
  const Vec2 hip{96.0 + uniform(rng, -10, 10), 150.0 + uniform(rng, -8, 8)};
  const double len = uniform(rng, 60, 72);
  const double lean = uniform(rng, -0.2, 0.2);
  const Vec2 up{std::sin(lean), -std::cos(lean)};
  const Vec2 side{std::cos(lean), std::sin(lean)};
  const double a1 = uniform(rng, -0.08, 0.08);
  const double a2 = uniform(rng, -0.04, 0.04);
  const double pi = std::numbers::pi;
  auto curve = [&](double t) {
    const double bow = a1 * std::sin(pi * t) + a2 * std::sin(2 * pi * t);
    return hip + (t * len) * up + (len * bow) * side;
  };
  // Limb direction at angle `a` from "down", outward for side sign `s`.
  auto limb = [&](double a, double s) {
    return std::cos(a) * (-1.0 * up) + (s * std::sin(a)) * side;
  };

  std::map<std::string, Vec2> p;
  for (std::size_t i = 0; i < kSpineChainLength; ++i) {
    p[kSpineChainNames[i]] = curve(0.06 + 1.14 * kChainFractions[i]);
  }
  const Vec2 shoulder_mid = curve(0.92);
  p["left_shoulder"] = shoulder_mid + (0.24 * len) * side;
  p["right_shoulder"] = shoulder_mid - (0.24 * len) * side;
  const Vec2 sc_mid = curve(0.9);
  p["left_sternoclavicular"] = sc_mid + (0.07 * len) * side;
  p["right_sternoclavicular"] = sc_mid - (0.07 * len) * side;
  p["neck"] = midpoint(p["left_shoulder"], p["right_shoulder"]);
  p["left_hip"] = hip + (0.15 * len) * side;
  p["right_hip"] = hip - (0.15 * len) * side;
  p["hip_center"] = hip;

  const double facing = uniform(rng, -1, 1);
  const Vec2 head = curve(1.2) + (0.25 * len) * up;
  p["head_top"] = head + (0.22 * len) * up;
  p["nose"] = head + (0.1 * len * facing) * side - (0.02 * len) * up;
  for (double s : {1.0, -1.0}) {
    const std::string lr = s > 0 ? "left_" : "right_";
    p[lr + "eye"] = head + (0.05 * len) * up +
                    ((0.06 * s + 0.08 * facing) * len) * side;
    p[lr + "ear"] = head + ((0.12 * s + 0.03 * facing) * len) * side;

    const Vec2 shoulder = p[lr + "shoulder"];
    const double arm = uniform(rng, -0.3, 1.2);
    const Vec2 elbow = shoulder + (0.38 * len) * limb(arm, s);
    p[lr + "elbow"] = elbow;
    p[lr + "wrist"] = elbow + (0.34 * len) * limb(arm + uniform(rng, -0.6, 0.8), s);

    const double leg = uniform(rng, -0.1, 0.35);
    const Vec2 knee = p[lr + "hip"] + (0.5 * len) * limb(leg, s);
    const Vec2 ankle = knee + (0.48 * len) * limb(leg + uniform(rng, -0.3, 0.1), s);
    p[lr + "knee"] = knee;
    p[lr + "ankle"] = ankle;
    const Vec2 down = -1.0 * up;
    p[lr + "heel"] = ankle + (0.03 * len) * down - (0.05 * len * facing) * side;
    p[lr + "big_toe"] = ankle + (0.08 * len) * down +
                        ((0.1 * facing - 0.03 * s) * len) * side;
    p[lr + "small_toe"] = ankle + (0.07 * len) * down +
                          ((0.08 * facing + 0.04 * s) * len) * side;
  }
  return p;
}

bool inside(const std::map<std::string, Vec2>& fig, const AxisGrid& grid) {
  for (const auto& [name, v] : fig) {
    if (v.x < 2.0 || v.y < 2.0 || v.x > grid.width() - 2.0 ||
        v.y > grid.height() - 2.0) {
      return false;
    }
  }
  return true;
}

Eigen::MatrixXd projection(const CorpusConfig& config, std::size_t coords) {
  Rng rng(config.projection_seed);
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(coords)));
  Eigen::MatrixXd p(static_cast<Eigen::Index>(config.in_dim),
                    static_cast<Eigen::Index>(coords));
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = n(rng);
  return p;
}

Eigen::MatrixXd feature_matrix(const ToyCorpus& corpus,
                               std::span<const std::size_t> idx) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(corpus.config.in_dim),
                    static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& f = corpus.instances[idx[j]].features;
    for (std::size_t r = 0; r < f.size(); ++r) {
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = f[r];
    }
  }
  return x;
}

std::vector<std::vector<KeypointDistribution>> column_distributions(
    const Eigen::MatrixXd& z, const AxisGrid& grid) {
  std::vector<std::vector<KeypointDistribution>> out;
  out.reserve(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    out.push_back(distributions_from_logits(
        {z.col(c).data(), static_cast<std::size_t>(z.rows())}, grid));
  }
  return out;
}

double symmetric_kl(const AxisDistribution& p, const AxisDistribution& q) {
  return 0.5 * (kl(p, q) + kl(q, p));
}

// AdamW moments for one parameter block.
struct Moments {
  Eigen::MatrixXd m, v;
  explicit Moments(const Eigen::MatrixXd& like)
      : m(Eigen::MatrixXd::Zero(like.rows(), like.cols())),
        v(Eigen::MatrixXd::Zero(like.rows(), like.cols())) {}
};

template <typename Param>
void adamw_update(Param& p, const Eigen::MatrixXd& g, Moments& s,
                  const TrainConfig& c, double lr, std::size_t t, bool decay) {
  s.m = c.beta1 * s.m + (1.0 - c.beta1) * g;
  s.v = c.beta2 * s.v + (1.0 - c.beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  if (decay) p *= (1.0 - lr * c.weight_decay);
  p.array() -= lr * ((s.m.array() / bc1) /
                     ((s.v.array() / bc2).sqrt() + c.epsilon));
}

struct Optimizer {
  Moments w1, b1, w2, b2;
  std::size_t t = 0;
  explicit Optimizer(const ToyModel& m)
      : w1(m.hidden_weights), b1(m.hidden_bias), w2(m.head.weights), b2(m.head.bias) {}
};

struct TrainSetup {
  const ToyCorpus* corpus = nullptr;
  const SkeletonSpec* spec = nullptr;
  std::span<const std::size_t> train;
  std::span<const std::size_t> heldout;
  const ToyModel* teacher = nullptr;  // distillation source and retention reference
  // Teacher distributions per corpus instance (over the body set), or empty.
  const std::vector<std::vector<KeypointDistribution>>* teacher_dists = nullptr;
};

EvalRecord evaluate_checked(const ToyModel& model, const TrainSetup& s,
                            std::size_t step) {
  EvalRecord r;
  r.step = step;
  r.body_error = decode_error(model, *s.corpus, s.heldout, s.spec->body_set);
  if (!s.spec->spine_set.empty()) {
    r.spine_error = decode_error(model, *s.corpus, s.heldout, s.spec->spine_set);
  }
  if (s.teacher) r.body_retention = body_retention(model, *s.teacher, *s.corpus, s.heldout);
  return r;
}

EvalRecord evaluate_model(const ToyModel& model, const TrainSetup& s,
                          std::size_t step) {
  try {
    return evaluate_checked(model, s, step);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFiniteResult) throw;
    throw Error(ErrorCode::kNonFiniteLoss,
                "non-finite evaluation at step " + std::to_string(step));
  }
}

TrainResult run_training(ToyModel model, const TrainSetup& s, const TrainConfig& c) {
  c.validate();
  if (s.train.empty()) throw Error(ErrorCode::kInvalidArgument, "empty training split");
  const AxisGrid& grid = s.corpus->config.grid;
  TrainResult result;
  Optimizer opt(model);
  Rng rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(s.train.begin(), s.train.end());
  std::size_t cursor = order.size();
  const std::size_t epoch_steps = (order.size() + c.batch_size - 1) / c.batch_size;
  const std::size_t eval_every = c.eval_every ? c.eval_every : epoch_steps;
  if (!s.heldout.empty()) result.evals.push_back(evaluate_model(model, s, 0));

  std::vector<std::size_t> batch;
  std::vector<std::vector<double>> logits;
  std::vector<InstanceTarget> targets;
  std::vector<std::vector<KeypointDistribution>> teacher;
  for (std::size_t step = 0; step < c.steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(c.batch_size, order.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const Eigen::MatrixXd x = feature_matrix(*s.corpus, batch);
    const Eigen::MatrixXd h = model.hidden_forward(x);
    const Eigen::MatrixXd z = model.head_forward(h);

    const auto rows = static_cast<std::size_t>(z.rows());
    logits.assign(batch.size(), {});
    targets.clear();
    teacher.clear();
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const double* col = z.col(static_cast<Eigen::Index>(j)).data();
      logits[j].assign(col, col + rows);
      const auto& inst = s.corpus->instances[batch[j]];
      targets.push_back({inst.label_pose, inst.gt_dists});
      if (s.teacher_dists) teacher.push_back((*s.teacher_dists)[batch[j]]);
    }
    LossGradient lg;
    try {
      lg = grad_total({logits, targets, teacher}, *s.spec, grid, c.weights);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFiniteResult) throw;
      throw Error(ErrorCode::kNonFiniteLoss,
                  "non-finite loss at step " + std::to_string(step));
    }
    if (!std::isfinite(lg.breakdown.total)) {
      throw Error(ErrorCode::kNonFiniteLoss,
                  "non-finite loss at step " + std::to_string(step));
    }

    Eigen::MatrixXd g(z.rows(), z.cols());
    for (std::size_t j = 0; j < batch.size(); ++j) {
      g.col(static_cast<Eigen::Index>(j)) =
          Eigen::Map<const Eigen::VectorXd>(lg.grad[j].data(), z.rows());
    }
    const Eigen::MatrixXd gw2 = g * h.transpose();
    const Eigen::VectorXd gb2 = g.rowwise().sum();
    const Eigen::MatrixXd ga =
        (model.head.weights.transpose() * g).cwiseProduct(
            (1.0 - h.array().square()).matrix());
    const Eigen::MatrixXd gw1 = ga * x.transpose();
    const Eigen::VectorXd gb1 = ga.rowwise().sum();

    const double lr = learning_rate(c, step);
    ++opt.t;
    adamw_update(model.hidden_weights, gw1, opt.w1, c, lr, opt.t, true);
    adamw_update(model.hidden_bias, gb1, opt.b1, c, lr, opt.t, false);
    adamw_update(model.head.weights, gw2, opt.w2, c, lr, opt.t, true);
    adamw_update(model.head.bias, gb2, opt.b2, c, lr, opt.t, false);
    result.steps.push_back({step, lr, lg.breakdown});

    if (!s.heldout.empty() && ((step + 1) % eval_every == 0 || step + 1 == c.steps)) {
      result.evals.push_back(evaluate_model(model, s, step + 1));
    }
  }
  result.model = std::move(model);
  return result;
}

std::vector<std::vector<KeypointDistribution>> teacher_outputs(
    const ToyModel& teacher, const ToyCorpus& corpus) {
  std::vector<std::size_t> all(corpus.instances.size());
  std::iota(all.begin(), all.end(), 0);
  return column_distributions(teacher.forward(feature_matrix(corpus, all)),
                              corpus.config.grid);
}

}  // namespace

ToyCorpus make_synthetic_corpus(std::size_t count, std::uint64_t seed,
                                const SkeletonSpec& spec,
                                const CorpusConfig& config) {
  if (count == 0) throw Error(ErrorCode::kInvalidArgument, "corpus count must be >= 1");
  const SkeletonSpec full = default_extended_skeleton();
  for (const auto& kp : spec.keypoints) {
    if (!full.find(kp.name)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "generator has no keypoint named " + kp.name);
    }
  }
  ToyCorpus corpus;
  corpus.spec = spec;
  corpus.config = config;
  // The feature sensor always sees the full figure, so corpora over
  // different vocabularies share inputs.
  const Eigen::MatrixXd proj = projection(config, 2 * full.size());
  Rng rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    std::map<std::string, Vec2> fig;
    do {
      fig = sample_figure(rng);
    } while (!inside(fig, config.grid));

    Eigen::VectorXd u(static_cast<Eigen::Index>(2 * full.size()));
    for (std::size_t k = 0; k < full.size(); ++k) {
      const Vec2 v = fig.at(full.keypoints[k].name);
      u(static_cast<Eigen::Index>(2 * k)) = 2.0 * v.x / config.grid.width() - 1.0;
      u(static_cast<Eigen::Index>(2 * k + 1)) = 2.0 * v.y / config.grid.height() - 1.0;
    }
    Eigen::VectorXd f = proj * u;
    for (Eigen::Index r = 0; r < f.size(); ++r) f(r) += config.feature_noise * unit(rng);

    ToyInstance inst;
    inst.features.assign(f.data(), f.data() + f.size());
    inst.gt_pose = Pose2D(std::vector<Vec2>(spec.size()));
    for (std::size_t k = 0; k < spec.size(); ++k) {
      inst.gt_pose.coords[k] = fig.at(spec.keypoints[k].name);
    }
    inst.label_pose = inst.gt_pose;
    for (std::size_t k : spec.spine_set) {
      Vec2& v = inst.label_pose.coords[k];
      const Vec2 jitter{unit(rng), unit(rng)};
      if (config.spine_label_noise_px > 0.0) {
        v += config.spine_label_noise_px * jitter;
        v.x = std::clamp(v.x, 0.0, config.grid.width() - 1e-6);
        v.y = std::clamp(v.y, 0.0, config.grid.height() - 1e-6);
      }
    }
    for (std::size_t k = 0; k < spec.size(); ++k) {
      inst.gt_dists.push_back(encode_keypoint(inst.label_pose.coords[k], config.grid,
                                              config.target_sigma_bins));
    }
    corpus.instances.push_back(std::move(inst));
  }
  return corpus;
}

ToyCorpus restrict_corpus(const ToyCorpus& corpus, const SkeletonSpec& spec) {
  std::vector<std::size_t> src;
  for (const auto& kp : spec.keypoints) src.push_back(corpus.spec.index_of(kp.name));
  ToyCorpus out;
  out.spec = spec;
  out.config = corpus.config;
  for (const auto& inst : corpus.instances) {
    ToyInstance r;
    r.features = inst.features;
    r.gt_pose = Pose2D(spec.size(), Visibility::kLabeledVisible);
    r.label_pose = r.gt_pose;
    for (std::size_t k = 0; k < spec.size(); ++k) {
      r.gt_pose.coords[k] = inst.gt_pose.coords[src[k]];
      r.label_pose.coords[k] = inst.label_pose.coords[src[k]];
      r.label_pose.visibility[k] = inst.label_pose.visibility[src[k]];
      r.gt_dists.push_back(inst.gt_dists[src[k]]);
    }
    out.instances.push_back(std::move(r));
  }
  return out;
}

void TrainConfig::validate() const {
  if (steps == 0 || batch_size == 0) {
    throw Error(ErrorCode::kInvalidArgument, "steps and batch_size must be >= 1");
  }
  if (warmup_steps >= steps) {
    throw Error(ErrorCode::kInvalidArgument, "warmup_steps must be < steps");
  }
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "final_lr_fraction must be in (0, 1]");
  }
  if (!(base_lr > 0.0) || hidden == 0) {
    throw Error(ErrorCode::kInvalidArgument, "base_lr and hidden must be positive");
  }
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "holdout_fraction must be in [0, 1)");
  }
  weights.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"warmup_steps", c.warmup_steps},
          {"final_lr_fraction", c.final_lr_fraction},
          {"seed", c.seed},
          {"weights", to_json(c.weights)},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"weight_decay", c.weight_decay},
          {"hidden", c.hidden},
          {"holdout_fraction", c.holdout_fraction},
          {"eval_every", c.eval_every},
          {"teacher_threshold_bins", c.teacher_threshold_bins}};
}

double learning_rate(const TrainConfig& c, std::size_t step) {
  const double base = c.base_lr;
  if (step < c.warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const double floor = c.final_lr_fraction * base;
  const std::size_t last = c.steps - 1;
  if (last <= c.warmup_steps) return step >= last ? floor : base;
  const double progress = static_cast<double>(std::min(step, last) - c.warmup_steps) /
                          static_cast<double>(last - c.warmup_steps);
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<double> lr_timeline(const TrainConfig& c) {
  std::vector<double> lr(c.steps);
  for (std::size_t s = 0; s < c.steps; ++s) lr[s] = learning_rate(c, s);
  return lr;
}

CorpusSplit split_corpus(std::size_t count, double holdout_fraction) {
  CorpusSplit s;
  const auto held = static_cast<std::size_t>(
      std::floor(holdout_fraction * static_cast<double>(count)));
  for (std::size_t i = 0; i < count; ++i) {
    (i < count - held ? s.train : s.heldout).push_back(i);
  }
  return s;
}

ToyModel init_model(const SkeletonSpec& spec, const AxisGrid& grid,
                    std::size_t in_dim, std::size_t hidden, std::uint64_t seed) {
  ToyModel m;
  Rng rng(seed);
  std::normal_distribution<double> w1(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  std::normal_distribution<double> w2(0.0, 0.1 / std::sqrt(static_cast<double>(hidden)));
  m.hidden_weights.resize(static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(in_dim));
  for (Eigen::Index i = 0; i < m.hidden_weights.size(); ++i) m.hidden_weights.data()[i] = w1(rng);
  m.hidden_bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hidden));
  m.head = make_head(spec.names(), grid, hidden);
  for (Eigen::Index i = 0; i < m.head.weights.size(); ++i) m.head.weights.data()[i] = w2(rng);
  return m;
}

double decode_error(const ToyModel& model, const ToyCorpus& corpus,
                    std::span<const std::size_t> instances,
                    std::span<const std::size_t> keypoints) {
  if (instances.empty() || keypoints.empty()) return 0.0;
  const auto dists = column_distributions(model.forward(feature_matrix(corpus, instances)),
                                          corpus.config.grid);
  double sum = 0.0;
  for (std::size_t j = 0; j < instances.size(); ++j) {
    const auto& gt = corpus.instances[instances[j]].gt_pose;
    for (std::size_t k : keypoints) {
      const Vec2 v{soft_argmax(dists[j][k].x), soft_argmax(dists[j][k].y)};
      sum += norm(v - gt.coords[k]);
    }
  }
  return sum / static_cast<double>(instances.size() * keypoints.size());
}

double body_retention(const ToyModel& student, const ToyModel& teacher,
                      const ToyCorpus& corpus,
                      std::span<const std::size_t> instances) {
  if (instances.empty()) return 0.0;
  const Eigen::MatrixXd x = feature_matrix(corpus, instances);
  const auto ps = column_distributions(student.forward(x), corpus.config.grid);
  const auto pt = column_distributions(teacher.forward(x), corpus.config.grid);
  std::map<std::string, std::size_t> sidx;
  for (std::size_t k = 0; k < student.head.keypoints.size(); ++k) {
    sidx[student.head.keypoints[k]] = k;
  }
  double sum = 0.0;
  const auto& names = teacher.head.keypoints;
  for (std::size_t j = 0; j < instances.size(); ++j) {
    for (std::size_t t = 0; t < names.size(); ++t) {
      const std::size_t s = sidx.at(names[t]);
      sum += symmetric_kl(ps[j][s].x, pt[j][t].x) + symmetric_kl(ps[j][s].y, pt[j][t].y);
    }
  }
  return sum / static_cast<double>(instances.size() * names.size());
}

TeacherResult pretrain_teacher(const ToyCorpus& corpus, const TrainConfig& config) {
  const ToyCorpus body = restrict_corpus(corpus, body_only(corpus.spec));
  TrainConfig c = config;
  c.weights.beta = c.weights.gamma1 = c.weights.gamma2 = 0.0;
  const auto split = split_corpus(body.instances.size(), c.holdout_fraction);
  TrainSetup s;
  s.corpus = &body;
  s.spec = &body.spec;
  s.train = split.train;
  ToyModel init = init_model(body.spec, body.config.grid, body.config.in_dim, c.hidden,
                             c.seed + 1);
  auto run = run_training(std::move(init), s, c);
  TeacherResult r;
  r.steps = std::move(run.steps);
  r.model = std::move(run.model);
  const auto& held = split.heldout.empty() ? split.train : split.heldout;
  r.heldout_error = decode_error(r.model, body, held, body.spec.body_set);
  const double limit = c.teacher_threshold_bins * body.config.grid.bin_width;
  if (r.heldout_error > limit) {
    std::ostringstream os;
    os << "teacher held-out error " << r.heldout_error << " px exceeds " << limit << " px";
    throw Error(ErrorCode::kDidNotConverge, os.str());
  }
  return r;
}

TrainResult fine_tune(const ToyModel& student, const ToyModel& teacher,
                      const ToyCorpus& corpus, std::span<const std::size_t> train,
                      std::span<const std::size_t> heldout,
                      const TrainConfig& config) {
  std::vector<std::vector<KeypointDistribution>> tdists;
  if (config.weights.beta > 0.0) tdists = teacher_outputs(teacher, corpus);
  TrainSetup s;
  s.corpus = &corpus;
  s.spec = &corpus.spec;
  s.train = train;
  s.heldout = heldout;
  s.teacher = &teacher;
  s.teacher_dists = config.weights.beta > 0.0 ? &tdists : nullptr;
  return run_training(student, s, config);
}

TrainResult train_student(const ToyModel& teacher, const ToyCorpus& corpus,
                          const TrainConfig& config) {
  const ToyModel student = expand_model(teacher, corpus.spec, config.seed + 2);
  const auto split = split_corpus(corpus.instances.size(), config.holdout_fraction);
  return fine_tune(student, teacher, corpus, split.train, split.heldout, config);
}

AblationTable ablation_suite(const ToyCorpus& corpus, const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  AblationTable table;
  const auto teacher = pretrain_teacher(corpus, config);
  table.teacher_error = teacher.heldout_error;
  struct Flags {
    const char* name;
    bool distill, structure, spine;
  };
  const Flags rows[] = {{"baseline", false, false, false},
                        {"+distill", true, false, false},
                        {"+distill+spine", true, false, true},
                        {"+distill+structure", true, true, false},
                        {"all", true, true, true}};
  const auto split = split_corpus(corpus.instances.size(), config.holdout_fraction);
  for (const auto& f : rows) {
    TrainConfig c = config;
    c.weights.beta = f.distill ? config.weights.beta : 0.0;
    c.weights.gamma1 = f.structure ? config.weights.gamma1 : 0.0;
    c.weights.gamma2 = f.spine ? config.weights.gamma2 : 0.0;
    c.eval_every = c.steps;
    const auto run = train_student(teacher.model, corpus, c);
    AblationRow row;
    row.name = f.name;
    row.distill = f.distill;
    row.structure = f.structure;
    row.spine = f.spine;
    const auto& last = run.evals.back();
    row.body_retention = last.body_retention;
    row.spine_error = last.spine_error;
    row.body_error = last.body_error;
    table.rows.push_back(row);
  }
  table.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return table;
}

nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"name", r.name},
                    {"distill", r.distill},
                    {"structure", r.structure},
                    {"spine", r.spine},
                    {"body_retention", r.body_retention},
                    {"spine_error_px", r.spine_error},
                    {"body_error_px", r.body_error}});
  }
  return {{"teacher_error_px", t.teacher_error}, {"rows", rows}, {"seconds", t.seconds}};
}

std::string format_table(const AblationTable& t) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "config" << std::setw(9) << "distill"
     << std::setw(10) << "structure" << std::setw(7) << "spine" << std::right
     << std::setw(14) << "body_symKL" << std::setw(14) << "spine_err_px"
     << std::setw(13) << "body_err_px" << "\n";
  for (const auto& r : t.rows) {
    auto mark = [](bool b) { return b ? "yes" : "no"; };
    os << std::left << std::setw(22) << r.name << std::setw(9) << mark(r.distill)
       << std::setw(10) << mark(r.structure) << std::setw(7) << mark(r.spine)
       << std::right << std::fixed << std::setprecision(5) << std::setw(14)
       << r.body_retention << std::setprecision(3) << std::setw(14) << r.spine_error
       << std::setw(13) << r.body_error << "\n";
  }
  os << "teacher held-out body error: " << std::setprecision(3) << t.teacher_error
     << " px\n";
  return os.str();
}

}  // namespace spinepose
