#include "snapflow/eval.hpp"

#include "snapflow/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace snapflow {

namespace {

std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::vector<PredictionSet> predict(const Model& model, const Matrix& source, std::span<const double> query_times,
                                   Index n_cells, std::uint64_t seed) {
  if (n_cells < 1) throw std::invalid_argument("predict: n_cells must be >= 1");
  if (source.rows() < 1 || source.cols() != model.vae.gene_dim())
    throw ShapeError("predict source", source.rows(), source.cols(), source.rows(), model.vae.gene_dim());
  const double t0 = model.t0();
  for (double q : query_times)
    if (q < t0) throw std::invalid_argument("predict: query time " + num(q) + " precedes t_0 = " + num(t0));

  Rng rng(seed);
  std::vector<Index> rows(static_cast<std::size_t>(n_cells));
  if (source.rows() >= n_cells) {
    std::vector<Index> pool(static_cast<std::size_t>(source.rows()));
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index i = 0; i < n_cells; ++i) {
      std::uniform_int_distribution<Index> pick(i, source.rows() - 1);
      std::swap(pool[i], pool[pick(rng)]);
      rows[i] = pool[i];
    }
  } else {
    std::uniform_int_distribution<Index> pick(0, source.rows() - 1);
    for (auto& r : rows) r = pick(rng);
  }
  Matrix x(n_cells, source.cols());
  for (Index i = 0; i < n_cells; ++i) x.row(i) = source.row(rows[i]);
  const Encoding enc = encode(model.vae, Tensor::constant(std::move(x)), rng);

  std::vector<double> sorted(query_times.begin(), query_times.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const double step = model.config.rk4_step;
  const Rollout roll = integrate(model.forward, enc.z.detach(), t0, sorted, Integrator::Rk4, step);

  std::vector<PredictionSet> out;
  for (double q : query_times) {
    const auto k = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), q) - sorted.begin());
    PredictionSet p;
    p.time = q;
    p.cells = decode(model.vae, roll.states[k]).value();
    p.provenance = {{"integrator", "rk4"}, {"step", step}, {"seed", seed}, {"n_cells", n_cells}, {"t0", t0}};
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PredictionSet> predict(const Model& model, const SnapshotDataset& train,
                                   std::span<const double> query_times, Index n_cells, std::uint64_t seed) {
  if (std::abs(train.time(0) - model.t0()) > 1e-12)
    throw std::invalid_argument("predict: dataset t_0 differs from the model's");
  return predict(model, train.cells(0), query_times, n_cells, seed);
}

double l2_metric(const Matrix& x, const Matrix& y) {
  if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument("l2_metric: empty point set");
  if (x.cols() != y.cols()) throw ShapeError("l2_metric", x.rows(), x.cols(), y.rows(), y.cols());
  double acc = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    double row = 0.0;
    for (Index j = 0; j < y.rows(); ++j) row += (x.row(i) - y.row(j)).norm();
    acc += row;
  }
  return acc / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
}

PredictionSet naive_baseline(const SnapshotDataset& train, double query_time) {
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < train.timepoint_count(); ++k)
    if (train.time(k) <= query_time) best = k;
  if (!best) throw std::invalid_argument("naive_baseline: no training timepoint at or before " + num(query_time));
  PredictionSet p;
  p.time = query_time;
  p.cells = train.cells(*best);
  p.provenance = {{"baseline", "naive"}, {"source_time", train.time(*best)}};
  return p;
}

std::vector<MetricSummary> summarize(const std::vector<MetricRow>& rows) {
  std::vector<MetricSummary> out;
  auto reduce = [&](const std::string& name, auto keep) {
    MetricSummary s;
    s.task = name;
    for (const auto& r : rows) {
      if (!keep(r)) continue;
      ++s.count;
      s.wasserstein += r.wasserstein;
      s.l2 += r.l2;
      s.naive_wasserstein += r.naive_wasserstein;
      s.naive_l2 += r.naive_l2;
    }
    if (s.count == 0) return;
    const double n = static_cast<double>(s.count);
    s.wasserstein /= n;
    s.l2 /= n;
    s.naive_wasserstein /= n;
    s.naive_l2 /= n;
    out.push_back(s);
  };
  reduce("interp", [](const MetricRow& r) { return r.task == Task::Interpolation; });
  reduce("extrap", [](const MetricRow& r) { return r.task == Task::Extrapolation; });
  reduce("all", [](const MetricRow&) { return true; });
  return out;
}

MetricReport evaluate(const Predictor& predictor, const SnapshotDataset& train, const HoldoutSplit& split,
                      const EvalConfig& config) {
  if (split.holdouts.empty()) throw std::invalid_argument("evaluate: split has no holdouts");
  MetricReport report;
  report.debiased = config.ot.debiased;
  report.blur = config.ot.blur;
  report.scaling = config.ot.scaling;
  for (const auto& h : split.holdouts) {
    if (h.cells.cols() != train.gene_dim())
      throw ShapeError("evaluate holdout", h.cells.rows(), h.cells.cols(), h.cells.rows(), train.gene_dim());
  }
  for (const auto& h : split.holdouts) {
    MetricRow row;
    row.time = h.time;
    row.task = h.task;
    row.n_true = h.cells.rows();
    const Index n = std::min<Index>(h.cells.rows(), config.max_cells);
    const Matrix pred = predictor(h, n);
    row.n_pred = pred.rows();
    row.wasserstein = ot_distance(h.cells, pred, config.ot);
    row.l2 = l2_metric(h.cells, pred);
    const PredictionSet naive = naive_baseline(train, h.time);
    row.naive_wasserstein = ot_distance(h.cells, naive.cells, config.ot);
    row.naive_l2 = l2_metric(h.cells, naive.cells);
    report.rows.push_back(row);
  }
  report.summary = summarize(report.rows);
  return report;
}

MetricReport evaluate(const Model& model, const SnapshotDataset& train, const HoldoutSplit& split,
                      const EvalConfig& config) {
  if (train.gene_dim() != model.vae.gene_dim())
    throw ShapeError("evaluate dataset/model genes", train.gene_dim(), 1, model.vae.gene_dim(), 1);
  const Predictor predictor = [&](const Holdout& h, Index n) {
    const double t = h.time;
    return predict(model, train, std::span(&t, 1), n, config.seed).front().cells;
  };
  return evaluate(predictor, train, split, config);
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "kind,time,task,wasserstein,l2,n_true,n_pred,naive_wasserstein,naive_l2\n";
  for (const auto& r : report.rows)
    out << "row," << num(r.time) << ',' << task_name(r.task) << ',' << num(r.wasserstein) << ',' << num(r.l2) << ','
        << r.n_true << ',' << r.n_pred << ',' << num(r.naive_wasserstein) << ',' << num(r.naive_l2) << '\n';
  for (const auto& s : report.summary)
    out << "summary,," << s.task << ',' << num(s.wasserstein) << ',' << num(s.l2) << ",,," << num(s.naive_wasserstein)
        << ',' << num(s.naive_l2) << '\n';
}

nlohmann::json to_json(const MetricReport& report) {
  nlohmann::json doc;
  doc["wasserstein_variant"] = report.debiased ? "debiased_sinkhorn" : "entropic_sinkhorn";
  doc["blur"] = report.blur;
  doc["scaling"] = report.scaling;
  doc["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows)
    doc["rows"].push_back({{"time", r.time},
                           {"task", task_name(r.task)},
                           {"wasserstein", r.wasserstein},
                           {"l2", r.l2},
                           {"n_true", r.n_true},
                           {"n_pred", r.n_pred},
                           {"naive_wasserstein", r.naive_wasserstein},
                           {"naive_l2", r.naive_l2}});
  doc["summary"] = nlohmann::json::object();
  for (const auto& s : report.summary)
    doc["summary"][s.task] = {{"count", s.count},
                              {"wasserstein", s.wasserstein},
                              {"l2", s.l2},
                              {"naive_wasserstein", s.naive_wasserstein},
                              {"naive_l2", s.naive_l2}};
  return doc;
}

void write_prediction_csv(const PredictionSet& p, const std::vector<std::string>& genes,
                          const std::filesystem::path& path) {
  if (static_cast<Index>(genes.size()) != p.cells.cols())
    throw ShapeError("write_prediction_csv", p.cells.rows(), p.cells.cols(), 1, static_cast<Index>(genes.size()));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "time";
  for (const auto& g : genes) out << ',' << g;
  out << '\n';
  const std::string t = num(p.time);
  for (Index i = 0; i < p.cells.rows(); ++i) {
    out << t;
    for (Index j = 0; j < p.cells.cols(); ++j) out << ',' << num(p.cells(i, j));
    out << '\n';
  }
}

void emit_projection(const std::vector<std::pair<double, Matrix>>& truth, const std::vector<PredictionSet>& predictions,
                     const std::filesystem::path& path) {
  Index rows = 0, cols = -1;
  for (const auto& [t, m] : truth) {
    if (cols >= 0 && m.cols() != cols) throw ShapeError("emit_projection", m.rows(), m.cols(), m.rows(), cols);
    cols = m.cols();
    rows += m.rows();
  }
  if (cols < 2) throw std::invalid_argument("emit_projection: fewer than 2 feature dimensions");
  Matrix all(rows, cols);
  Index r = 0;
  for (const auto& [t, m] : truth) {
    all.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  const Pca pca = fit_pca(all, 2);
  if (!(pca.explained_variance(1) > 1e-12 * std::max(pca.explained_variance(0), 1e-300)))
    throw std::invalid_argument("emit_projection: fewer than 2 effective dimensions in the true cells");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "x,y,time,source\n";
  auto dump = [&](double t, const Matrix& m, const char* source) {
    const Matrix xy = pca.transform(m);
    for (Index i = 0; i < xy.rows(); ++i)
      out << num(xy(i, 0)) << ',' << num(xy(i, 1)) << ',' << num(t) << ',' << source << '\n';
  };
  for (const auto& [t, m] : truth) dump(t, m, "true");
  for (const auto& p : predictions) {
    if (p.cells.cols() != cols) throw ShapeError("emit_projection", p.cells.rows(), p.cells.cols(), 1, cols);
    dump(p.time, p.cells, "pred");
  }
}

}  // namespace snapflow
