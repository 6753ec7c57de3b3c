#pragma once

// Held-out timepoint prediction, population metrics, the naive baseline and
// report/projection output.

#include "snapflow/data.hpp"
#include "snapflow/ot.hpp"
#include "snapflow/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace snapflow {

struct PredictionSet {
  double time = 0.0;
  Matrix cells;
  nlohmann::json provenance = nlohmann::json::object();
};

// Samples n_cells source cells at t_0 (with replacement only when the source
// has fewer), encodes them with reparameterisation, rolls the forward field
// through the query times with RK4 and decodes. Results follow the order of
// `query_times`.
std::vector<PredictionSet> predict(const Model& model, const Matrix& source, std::span<const double> query_times,
                                   Index n_cells, std::uint64_t seed);
// Uses the training snapshot at t_0 as source.
std::vector<PredictionSet> predict(const Model& model, const SnapshotDataset& train,
                                   std::span<const double> query_times, Index n_cells, std::uint64_t seed);

// Mean Euclidean distance over all cross pairs.
double l2_metric(const Matrix& x, const Matrix& y);

// The latest training snapshot at or before `query_time`.
PredictionSet naive_baseline(const SnapshotDataset& train, double query_time);

struct EvalConfig {
  OtDistanceOptions ot{};
  Index max_cells = 1000;
  std::uint64_t seed = 0;
};

struct MetricRow {
  double time = 0.0;
  Task task = Task::Interpolation;
  double wasserstein = 0.0;
  double l2 = 0.0;
  Index n_true = 0;
  Index n_pred = 0;
  double naive_wasserstein = 0.0;
  double naive_l2 = 0.0;
};

struct MetricSummary {
  std::string task;  // "interp", "extrap" or "all"
  std::size_t count = 0;
  double wasserstein = 0.0;
  double l2 = 0.0;
  double naive_wasserstein = 0.0;
  double naive_l2 = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<MetricSummary> summary;
  bool debiased = true;
  double blur = 0.05;
  double scaling = 0.5;
};

// Arithmetic means of the rows, per task present and overall.
std::vector<MetricSummary> summarize(const std::vector<MetricRow>& rows);

// Any callable giving the predicted population at a holdout.
using Predictor = std::function<Matrix(const Holdout& holdout, Index n_cells)>;

MetricReport evaluate(const Predictor& predictor, const SnapshotDataset& train, const HoldoutSplit& split,
                      const EvalConfig& config);
MetricReport evaluate(const Model& model, const SnapshotDataset& train, const HoldoutSplit& split,
                      const EvalConfig& config);

void write_report_csv(const MetricReport& report, const std::filesystem::path& path);
nlohmann::json to_json(const MetricReport& report);

void write_prediction_csv(const PredictionSet& prediction, const std::vector<std::string>& genes,
                          const std::filesystem::path& path);

// Fits two principal axes on the true cells, projects both populations and
// writes "x,y,time,source" rows (source is "true" or "pred").
void emit_projection(const std::vector<std::pair<double, Matrix>>& truth,
                     const std::vector<PredictionSet>& predictions, const std::filesystem::path& path);

}  // namespace snapflow
