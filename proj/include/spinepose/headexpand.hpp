#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "spinepose/distcodec.hpp"
#include "spinepose/skeleton.hpp"

namespace spinepose {

enum class Axis : std::uint8_t { kX = 0, kY = 1 };

struct RowKey {
  std::size_t keypoint = 0;  // index into LinearHead::keypoints
  Axis axis = Axis::kX;
  std::size_t bin = 0;
  friend bool operator==(const RowKey&, const RowKey&) = default;
};

/// Final linear layer producing keypoint-major logits (x bins, then y bins,
/// per keypoint), the layout distributions_from_logits expects.
struct LinearHead {
  Eigen::MatrixXd weights;  // out_rows x in_dim
  Eigen::VectorXd bias;     // out_rows
  std::vector<std::string> keypoints;
  AxisGrid grid;
  std::vector<RowKey> row_map;

  std::size_t out_rows() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
};

/// Zero-initialised head with the canonical row map for `keypoints`.
LinearHead make_head(std::vector<std::string> keypoints, const AxisGrid& grid,
                     std::size_t in_dim);

/// Canonical keypoint-major row map.
std::vector<RowKey> canonical_row_map(std::size_t keypoint_count,
                                      const AxisGrid& grid);

/// Throws Error(kShapeMismatch) when dimensions, grid and row map disagree or
/// the row map is not a bijection onto (keypoint, axis, bin).
void check_head(const LinearHead& head);

/// Optional tanh hidden layer followed by a linear head. Stands in for both
/// the teacher and the student network.
struct ToyModel {
  Eigen::MatrixXd hidden_weights;  // hidden x in_dim; empty when absent
  Eigen::VectorXd hidden_bias;
  LinearHead head;

  bool has_hidden() const { return hidden_weights.size() > 0; }
  std::size_t input_dim() const;
  /// Logits for a batch of column inputs (in_dim x batch).
  Eigen::MatrixXd forward(const Eigen::MatrixXd& inputs) const;
  /// The two stages of forward(); hidden_forward is the identity without a
  /// hidden layer.
  Eigen::MatrixXd hidden_forward(const Eigen::MatrixXd& inputs) const;
  Eigen::MatrixXd head_forward(const Eigen::MatrixXd& hidden) const;
  std::vector<double> forward(std::span<const double> input) const;
};

enum class StatisticsMode {
  kGlobal,     // mean/std over every teacher weight entry
  kPerColumn,  // mean/std per input column, over teacher rows
};

enum class BiasInit { kStatistics, kZero };

struct ExpansionOptions {
  StatisticsMode statistics = StatisticsMode::kGlobal;
  BiasInit bias = BiasInit::kStatistics;
};

std::string to_string(StatisticsMode mode);
std::string to_string(BiasInit mode);
StatisticsMode statistics_mode_from_string(const std::string& s);
BiasInit bias_init_from_string(const std::string& s);

/// Population mean and standard deviation.
struct WeightStatistics {
  double mean = 0.0;
  double stddev = 0.0;
};
WeightStatistics entry_statistics(const Eigen::Ref<const Eigen::MatrixXd>& m);

/// Builds a head over `spec` from a teacher head over the body-set keypoints
/// (matched by name). Body rows are copied verbatim; rows of the remaining
/// keypoints are drawn i.i.d. from a normal with the teacher's statistics.
/// Throws Error(kShapeMismatch) when the teacher does not cover exactly the
/// body set on the same grid.
LinearHead expand_head(const LinearHead& teacher, const SkeletonSpec& spec,
                       std::uint64_t seed, const ExpansionOptions& options = {});

/// Copies the hidden layer and expands the head.
ToyModel expand_model(const ToyModel& teacher, const SkeletonSpec& spec,
                      std::uint64_t seed, const ExpansionOptions& options = {});

/// Largest absolute difference, over probes and over the teacher's
/// keypoints, between student and teacher logits and between their softmax
/// distributions.
double initial_equivalence_check(const ToyModel& student,
                                 const ToyModel& teacher,
                                 const Eigen::MatrixXd& probe_inputs);

// Binary container: "SPHD", u32 version, then dimensions, keypoint names and
// row map, then row-major little-endian float64 weights and bias. Models add
// a hidden-layer block. Throws Error(kParseError) on malformed input and
// Error(kIoError) on stream failures.
void write_head(std::ostream& out, const LinearHead& head);
LinearHead read_head(std::istream& in);
void write_model(std::ostream& out, const ToyModel& model);
ToyModel read_model(std::istream& in);
void save_model(const std::string& path, const ToyModel& model);
ToyModel load_model(const std::string& path);

nlohmann::json expansion_manifest(std::uint64_t seed,
                                  const ExpansionOptions& options,
                                  const LinearHead& teacher);

}  // namespace spinepose
