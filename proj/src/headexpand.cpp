#include "spinepose/headexpand.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>

#include "spinepose/error.hpp"

namespace spinepose {
namespace {

constexpr char kMagic[4] = {'S', 'P', 'H', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagHidden = 1;

void shape_error(const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, what);
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw Error(ErrorCode::kParseError, "truncated head container");
  }
  return to_little(v);
}

void put_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(out, m(r, c));
  }
}

Eigen::MatrixXd get_matrix(std::istream& in, std::uint64_t rows,
                           std::uint64_t cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = get<double>(in);
  }
  return m;
}

// Guards allocation on corrupt headers.
void check_dim(std::uint64_t v, const char* what) {
  if (v > (1u << 24)) {
    throw Error(ErrorCode::kParseError, std::string("implausible ") + what);
  }
}

void write_head_body(std::ostream& out, const LinearHead& head) {
  put<std::uint64_t>(out, head.out_rows());
  put<std::uint64_t>(out, head.in_dim());
  put<std::uint64_t>(out, head.grid.x_bins);
  put<std::uint64_t>(out, head.grid.y_bins);
  put<double>(out, head.grid.bin_width);
  put<std::uint64_t>(out, head.keypoints.size());
  for (const auto& name : head.keypoints) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (const auto& key : head.row_map) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(key.keypoint));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(key.axis));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(key.bin));
  }
  put_matrix(out, head.weights);
  for (Eigen::Index r = 0; r < head.bias.size(); ++r) put<double>(out, head.bias(r));
}

LinearHead read_head_body(std::istream& in) {
  LinearHead head;
  const auto rows = get<std::uint64_t>(in);
  const auto cols = get<std::uint64_t>(in);
  check_dim(rows, "row count");
  check_dim(cols, "input dimension");
  head.grid.x_bins = get<std::uint64_t>(in);
  head.grid.y_bins = get<std::uint64_t>(in);
  head.grid.bin_width = get<double>(in);
  const auto nk = get<std::uint64_t>(in);
  check_dim(nk, "keypoint count");
  for (std::uint64_t k = 0; k < nk; ++k) {
    const auto len = get<std::uint32_t>(in);
    check_dim(len, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) {
      throw Error(ErrorCode::kParseError, "truncated keypoint name");
    }
    head.keypoints.push_back(std::move(name));
  }
  head.row_map.resize(rows);
  for (auto& key : head.row_map) {
    key.keypoint = get<std::uint32_t>(in);
    const auto axis = get<std::uint8_t>(in);
    if (axis > 1) throw Error(ErrorCode::kParseError, "bad axis tag");
    key.axis = static_cast<Axis>(axis);
    key.bin = get<std::uint32_t>(in);
  }
  head.weights = get_matrix(in, rows, cols);
  head.bias.resize(static_cast<Eigen::Index>(rows));
  for (Eigen::Index r = 0; r < head.bias.size(); ++r) head.bias(r) = get<double>(in);
  try {
    check_head(head);
  } catch (const Error& e) {
    throw Error(ErrorCode::kParseError, e.what());
  }
  return head;
}

void read_magic(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::kParseError, "not a head container");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) {
    throw Error(ErrorCode::kParseError,
                "unsupported container version " + std::to_string(version));
  }
}

}  // namespace

std::vector<RowKey> canonical_row_map(std::size_t keypoint_count,
                                      const AxisGrid& grid) {
  std::vector<RowKey> map;
  map.reserve(keypoint_count * grid.bins_per_keypoint());
  for (std::size_t k = 0; k < keypoint_count; ++k) {
    for (std::size_t b = 0; b < grid.x_bins; ++b) map.push_back({k, Axis::kX, b});
    for (std::size_t b = 0; b < grid.y_bins; ++b) map.push_back({k, Axis::kY, b});
  }
  return map;
}

LinearHead make_head(std::vector<std::string> keypoints, const AxisGrid& grid,
                     std::size_t in_dim) {
  LinearHead head;
  head.grid = grid;
  head.row_map = canonical_row_map(keypoints.size(), grid);
  head.keypoints = std::move(keypoints);
  const auto rows = static_cast<Eigen::Index>(head.row_map.size());
  head.weights = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(in_dim));
  head.bias = Eigen::VectorXd::Zero(rows);
  return head;
}

void check_head(const LinearHead& head) {
  const std::size_t rows = head.keypoints.size() * head.grid.bins_per_keypoint();
  if (head.out_rows() != rows || static_cast<std::size_t>(head.bias.size()) != rows ||
      head.row_map.size() != rows) {
    shape_error("head rows " + std::to_string(head.out_rows()) + " != " +
                std::to_string(rows) + " expected from keypoints and grid");
  }
  // The row map is a bijection iff it is a permutation of the canonical one.
  std::vector<char> seen(rows, 0);
  for (const auto& key : head.row_map) {
    const std::size_t limit =
        key.axis == Axis::kX ? head.grid.x_bins : head.grid.y_bins;
    if (key.keypoint >= head.keypoints.size() || key.bin >= limit) {
      shape_error("row map entry out of range");
    }
    const std::size_t slot = key.keypoint * head.grid.bins_per_keypoint() +
                             (key.axis == Axis::kX ? 0 : head.grid.x_bins) +
                             key.bin;
    if (seen[slot]++) shape_error("row map is not injective");
  }
}

std::size_t ToyModel::input_dim() const {
  return has_hidden() ? static_cast<std::size_t>(hidden_weights.cols())
                      : head.in_dim();
}

Eigen::MatrixXd ToyModel::hidden_forward(const Eigen::MatrixXd& inputs) const {
  if (static_cast<std::size_t>(inputs.rows()) != input_dim()) {
    shape_error("model input has " + std::to_string(inputs.rows()) +
                " rows, expected " + std::to_string(input_dim()));
  }
  if (!has_hidden()) return inputs;
  return ((hidden_weights * inputs).colwise() + hidden_bias).array().tanh();
}

Eigen::MatrixXd ToyModel::head_forward(const Eigen::MatrixXd& hidden) const {
  // One product per keypoint block on a contiguous copy. A keypoint's logits
  // then depend only on its own rows, bit for bit, whatever the size of the
  // head; a single large product picks kernels by row position.
  const auto block = static_cast<Eigen::Index>(head.grid.bins_per_keypoint());
  Eigen::MatrixXd z(head.weights.rows(), hidden.cols());
  Eigen::MatrixXd w(block, head.weights.cols());
  for (Eigen::Index r = 0; r < head.weights.rows(); r += block) {
    w = head.weights.middleRows(r, block);
    z.middleRows(r, block).noalias() = w * hidden;
    z.middleRows(r, block).colwise() += head.bias.segment(r, block);
  }
  return z;
}

Eigen::MatrixXd ToyModel::forward(const Eigen::MatrixXd& inputs) const {
  return head_forward(hidden_forward(inputs));
}

std::vector<double> ToyModel::forward(std::span<const double> input) const {
  const Eigen::Map<const Eigen::VectorXd> x(input.data(),
                                            static_cast<Eigen::Index>(input.size()));
  const Eigen::MatrixXd z = forward(Eigen::MatrixXd(x));
  return {z.data(), z.data() + z.size()};
}

std::string to_string(StatisticsMode mode) {
  return mode == StatisticsMode::kGlobal ? "global" : "per_column";
}

std::string to_string(BiasInit mode) {
  return mode == BiasInit::kStatistics ? "statistics" : "zero";
}

StatisticsMode statistics_mode_from_string(const std::string& s) {
  if (s == "global") return StatisticsMode::kGlobal;
  if (s == "per_column") return StatisticsMode::kPerColumn;
  throw Error(ErrorCode::kInvalidArgument, "unknown statistics mode: " + s);
}

BiasInit bias_init_from_string(const std::string& s) {
  if (s == "statistics") return BiasInit::kStatistics;
  if (s == "zero") return BiasInit::kZero;
  throw Error(ErrorCode::kInvalidArgument, "unknown bias init: " + s);
}

WeightStatistics entry_statistics(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  if (m.size() == 0) return {};
  const double n = static_cast<double>(m.size());
  const double mean = m.sum() / n;
  const double var = (m.array() - mean).square().sum() / n;
  return {mean, std::sqrt(var)};
}

LinearHead expand_head(const LinearHead& teacher, const SkeletonSpec& spec,
                       std::uint64_t seed, const ExpansionOptions& options) {
  check_head(teacher);
  if (teacher.keypoints.size() != spec.body_set.size()) {
    shape_error("teacher has " + std::to_string(teacher.keypoints.size()) +
                " keypoints, body set has " + std::to_string(spec.body_set.size()));
  }
  std::map<std::string, std::size_t> teacher_index;
  for (std::size_t k = 0; k < teacher.keypoints.size(); ++k) {
    teacher_index[teacher.keypoints[k]] = k;
  }
  for (std::size_t k : spec.body_set) {
    if (!teacher_index.count(spec.keypoints[k].name)) {
      shape_error("teacher lacks body keypoint " + spec.keypoints[k].name);
    }
  }

  LinearHead student = make_head(spec.names(), teacher.grid, teacher.in_dim());
  const std::size_t stride = teacher.grid.bins_per_keypoint();
  const auto block = static_cast<Eigen::Index>(stride);

  // Teacher rows may be permuted; gather them into canonical order first.
  Eigen::MatrixXd tw(teacher.weights.rows(), teacher.weights.cols());
  Eigen::VectorXd tb(teacher.bias.size());
  for (std::size_t r = 0; r < teacher.row_map.size(); ++r) {
    const auto& key = teacher.row_map[r];
    const std::size_t slot = key.keypoint * stride +
                             (key.axis == Axis::kX ? 0 : teacher.grid.x_bins) + key.bin;
    tw.row(static_cast<Eigen::Index>(slot)) = teacher.weights.row(static_cast<Eigen::Index>(r));
    tb(static_cast<Eigen::Index>(slot)) = teacher.bias(static_cast<Eigen::Index>(r));
  }

  const WeightStatistics global = entry_statistics(tw);
  std::vector<WeightStatistics> columns;
  if (options.statistics == StatisticsMode::kPerColumn) {
    for (Eigen::Index c = 0; c < tw.cols(); ++c) {
      columns.push_back(entry_statistics(tw.col(c)));
    }
  }
  const WeightStatistics bias_stats = entry_statistics(tb);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const auto dst = static_cast<Eigen::Index>(k * stride);
    if (spec.in_body_set(k)) {
      const auto src = static_cast<Eigen::Index>(
          teacher_index.at(spec.keypoints[k].name) * stride);
      student.weights.middleRows(dst, block) = tw.middleRows(src, block);
      student.bias.segment(dst, block) = tb.segment(src, block);
      continue;
    }
    for (Eigen::Index r = dst; r < dst + block; ++r) {
      for (Eigen::Index c = 0; c < student.weights.cols(); ++c) {
        const auto& s = columns.empty() ? global : columns[static_cast<std::size_t>(c)];
        student.weights(r, c) = s.mean + s.stddev * unit(rng);
      }
    }
    for (Eigen::Index r = dst; r < dst + block; ++r) {
      student.bias(r) = options.bias == BiasInit::kZero
                            ? 0.0
                            : bias_stats.mean + bias_stats.stddev * unit(rng);
    }
  }
  return student;
}

ToyModel expand_model(const ToyModel& teacher, const SkeletonSpec& spec,
                      std::uint64_t seed, const ExpansionOptions& options) {
  ToyModel student;
  student.hidden_weights = teacher.hidden_weights;
  student.hidden_bias = teacher.hidden_bias;
  student.head = expand_head(teacher.head, spec, seed, options);
  return student;
}

double initial_equivalence_check(const ToyModel& student,
                                 const ToyModel& teacher,
                                 const Eigen::MatrixXd& probe_inputs) {
  const Eigen::MatrixXd zs = student.forward(probe_inputs);
  const Eigen::MatrixXd zt = teacher.forward(probe_inputs);
  const std::size_t stride = teacher.head.grid.bins_per_keypoint();
  const auto block = static_cast<Eigen::Index>(stride);
  std::map<std::string, std::size_t> student_index;
  for (std::size_t k = 0; k < student.head.keypoints.size(); ++k) {
    student_index[student.head.keypoints[k]] = k;
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < teacher.head.keypoints.size(); ++k) {
    const auto it = student_index.find(teacher.head.keypoints[k]);
    if (it == student_index.end()) {
      shape_error("student lacks teacher keypoint " + teacher.head.keypoints[k]);
    }
    const auto ts = static_cast<Eigen::Index>(k * stride);
    const auto ss = static_cast<Eigen::Index>(it->second * stride);
    for (Eigen::Index p = 0; p < probe_inputs.cols(); ++p) {
      const Eigen::VectorXd a = zs.col(p).segment(ss, block);
      const Eigen::VectorXd b = zt.col(p).segment(ts, block);
      worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
      const auto da = distributions_from_logits({a.data(), stride}, teacher.head.grid);
      const auto db = distributions_from_logits({b.data(), stride}, teacher.head.grid);
      for (std::size_t i = 0; i < da[0].x.size(); ++i) {
        worst = std::max(worst, std::abs(da[0].x.bins[i] - db[0].x.bins[i]));
      }
      for (std::size_t i = 0; i < da[0].y.size(); ++i) {
        worst = std::max(worst, std::abs(da[0].y.bins[i] - db[0].y.bins[i]));
      }
    }
  }
  return worst;
}

void write_head(std::ostream& out, const LinearHead& head) {
  check_head(head);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, 0);
  write_head_body(out, head);
  if (!out) throw Error(ErrorCode::kIoError, "failed writing head container");
}

LinearHead read_head(std::istream& in) {
  read_magic(in);
  const auto flags = get<std::uint32_t>(in);
  if (flags & kFlagHidden) {
    throw Error(ErrorCode::kParseError, "container holds a model, not a head");
  }
  return read_head_body(in);
}

void write_model(std::ostream& out, const ToyModel& model) {
  check_head(model.head);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, model.has_hidden() ? kFlagHidden : 0);
  if (model.has_hidden()) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(model.hidden_weights.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(model.hidden_weights.cols()));
    put_matrix(out, model.hidden_weights);
    for (Eigen::Index r = 0; r < model.hidden_bias.size(); ++r) {
      put<double>(out, model.hidden_bias(r));
    }
  }
  write_head_body(out, model.head);
  if (!out) throw Error(ErrorCode::kIoError, "failed writing model container");
}

ToyModel read_model(std::istream& in) {
  read_magic(in);
  ToyModel model;
  const auto flags = get<std::uint32_t>(in);
  if (flags & kFlagHidden) {
    const auto rows = get<std::uint64_t>(in);
    const auto cols = get<std::uint64_t>(in);
    check_dim(rows, "hidden size");
    check_dim(cols, "input dimension");
    model.hidden_weights = get_matrix(in, rows, cols);
    model.hidden_bias.resize(static_cast<Eigen::Index>(rows));
    for (Eigen::Index r = 0; r < model.hidden_bias.size(); ++r) {
      model.hidden_bias(r) = get<double>(in);
    }
  }
  model.head = read_head_body(in);
  if (model.has_hidden() &&
      model.head.in_dim() != static_cast<std::size_t>(model.hidden_weights.rows())) {
    throw Error(ErrorCode::kParseError, "hidden size does not match head input");
  }
  return model;
}

void save_model(const std::string& path, const ToyModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path);
  write_model(out, model);
}

ToyModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  return read_model(in);
}

nlohmann::json expansion_manifest(std::uint64_t seed,
                                  const ExpansionOptions& options,
                                  const LinearHead& teacher) {
  const auto w = entry_statistics(teacher.weights);
  const auto b = entry_statistics(teacher.bias);
  return {{"seed", seed},
          {"statistics_mode", to_string(options.statistics)},
          {"bias_init", to_string(options.bias)},
          {"teacher_weight_mean", w.mean},
          {"teacher_weight_std", w.stddev},
          {"teacher_bias_mean", b.mean},
          {"teacher_bias_std", b.stddev}};
}

}  // namespace spinepose
