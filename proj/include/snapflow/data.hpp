#pragma once

// Snapshot datasets: ingestion, preprocessing, holdout splits and synthetic
// benchmark generators.

#include "snapflow/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace snapflow {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Cells observed at strictly increasing physical times; rows are cells,
// columns genes. Immutable after construction.
class SnapshotDataset {
 public:
  SnapshotDataset() = default;
  SnapshotDataset(std::vector<double> times, std::vector<Matrix> cells, std::vector<std::string> genes = {},
                  nlohmann::json provenance = nlohmann::json::object(), bool log_normalized = false);

  std::size_t timepoint_count() const { return times_.size(); }
  const std::vector<double>& times() const { return times_; }
  double time(std::size_t k) const { return times_.at(k); }
  const Matrix& cells(std::size_t k) const { return cells_.at(k); }
  Index gene_dim() const { return static_cast<Index>(genes_.size()); }
  Index cell_count() const;
  const std::vector<std::string>& genes() const { return genes_; }
  const nlohmann::json& provenance() const { return provenance_; }
  bool log_normalized() const { return log_normalized_; }

  std::optional<std::size_t> index_of(double t, double tol = 1e-9) const;
  // Rows of every timepoint stacked in time order.
  Matrix concatenated() const;

 private:
  std::vector<double> times_;
  std::vector<Matrix> cells_;
  std::vector<std::string> genes_;
  nlohmann::json provenance_;
  bool log_normalized_ = false;
};

// "time,<gene>,<gene>,..." header, one row per cell. Rows may appear in any
// order; rows sharing a time are grouped.
SnapshotDataset load_csv(const std::filesystem::path& path);
// Writes the CSV and, when provenance is non-empty, "<path>.provenance.json".
void save_csv(const SnapshotDataset& ds, const std::filesystem::path& path);

// Median library-size normalisation, log1p, then the `target_hvg` genes of
// highest variance (across all cells) are kept in their original order.
SnapshotDataset preprocess(const SnapshotDataset& ds, Index target_hvg);

enum class Task { Interpolation, Extrapolation };
const char* task_name(Task task);

struct Holdout {
  double time = 0.0;
  Task task = Task::Interpolation;
  Matrix cells;
};

struct HoldoutSplit {
  std::vector<double> train_times;
  std::vector<Holdout> holdouts;  // interpolation first, each group in time order
};

struct SplitRequest {
  std::vector<double> interpolation;
  std::vector<double> extrapolation;
};

// {"interp": [...], "extrap": [...]}; times are physical time values.
SplitRequest split_request_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const SplitRequest& req);
nlohmann::json to_json(const HoldoutSplit& split);

// Removes the requested timepoints from training. Interpolation holdouts must
// be strictly bracketed by remaining training times; extrapolation holdouts
// must follow every training time; at least two training times must remain.
std::pair<SnapshotDataset, HoldoutSplit> split_holdout(const SnapshotDataset& ds, const SplitRequest& req);

enum class SyntheticKind { DriftGaussian, Bifurcation, Rotation };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::DriftGaussian;
  Index ambient_dim = 2;
  Index gene_dim = 2;
  Index timepoints = 8;
  Index cells_per_timepoint = 300;
  double time_step = 1.0;
  double noise = 0.1;       // per-coordinate std of the ambient Gaussian
  double gene_noise = 0.0;  // isotropic std added after lifting to gene space
  double drift = 1.0;       // drift-gaussian: mean c t 1; bifurcation: speed along axis 0
  double split_time = 3.0;  // bifurcation
  double branch_speed = 1.0;
  double angular_speed = 0.5;  // rotation: radians per unit time
  double radius = 2.0;
  std::uint64_t seed = 0;
};

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const SyntheticSpec& spec);

struct SyntheticData {
  SnapshotDataset dataset;
  Matrix lift;                       // gene_dim x ambient_dim, orthonormal columns
  std::vector<RowVector> ambient_means;  // generator mean per timepoint (branch average)
  RowVector branch_axis;             // unit ambient direction the branches separate along
};

// drift-gaussian: N(c t 1, s^2 I). bifurcation: one Gaussian moving along
// axis 0 until split_time, then an equal mixture whose branches leave along
// axis 1 at +-branch_speed. rotation: anisotropic Gaussian whose centre and
// covariance rotate by angular_speed * t. Ambient samples are lifted with a
// fixed orthonormal map when gene_dim > ambient_dim.
SyntheticData synth_generate(const SyntheticSpec& spec);

}  // namespace snapflow
