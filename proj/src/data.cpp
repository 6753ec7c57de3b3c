#include "snapflow/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace snapflow {

ParseError::ParseError(const std::string& file, std::size_t line, const std::string& what)
    : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

SnapshotDataset::SnapshotDataset(std::vector<double> times, std::vector<Matrix> cells, std::vector<std::string> genes,
                                 nlohmann::json provenance, bool log_normalized)
    : times_(std::move(times)),
      cells_(std::move(cells)),
      genes_(std::move(genes)),
      provenance_(std::move(provenance)),
      log_normalized_(log_normalized) {
  if (times_.size() != cells_.size()) throw std::invalid_argument("SnapshotDataset: times/cells length mismatch");
  if (times_.empty()) throw std::invalid_argument("SnapshotDataset: no timepoints");
  const Index g = cells_.front().cols();
  if (genes_.empty()) {
    for (Index j = 0; j < g; ++j) genes_.push_back("gene_" + std::to_string(j + 1));
  }
  if (static_cast<Index>(genes_.size()) != g) throw std::invalid_argument("SnapshotDataset: gene label count mismatch");
  for (std::size_t k = 0; k < times_.size(); ++k) {
    if (!std::isfinite(times_[k])) throw std::invalid_argument("SnapshotDataset: non-finite time");
    if (k > 0 && !(times_[k] > times_[k - 1]))
      throw std::invalid_argument("SnapshotDataset: times must be strictly increasing");
    if (cells_[k].cols() != g) throw std::invalid_argument("SnapshotDataset: gene dimension differs between timepoints");
    if (cells_[k].rows() < 1) throw std::invalid_argument("SnapshotDataset: empty timepoint");
    if (!cells_[k].allFinite()) throw std::invalid_argument("SnapshotDataset: non-finite expression value");
    if (log_normalized_ && (cells_[k].array() < 0.0).any())
      throw std::invalid_argument("SnapshotDataset: negative value in log-normalized data");
  }
}

Index SnapshotDataset::cell_count() const {
  Index n = 0;
  for (const auto& c : cells_) n += c.rows();
  return n;
}

std::optional<std::size_t> SnapshotDataset::index_of(double t, double tol) const {
  for (std::size_t k = 0; k < times_.size(); ++k)
    if (std::abs(times_[k] - t) <= tol) return k;
  return std::nullopt;
}

Matrix SnapshotDataset::concatenated() const {
  Matrix out(cell_count(), gene_dim());
  Index r = 0;
  for (const auto& c : cells_) {
    out.middleRows(r, c.rows()) = c;
    r += c.rows();
  }
  return out;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

SnapshotDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string file = path.string();
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> genes;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) break;
  }
  if (trim(line).empty()) throw ParseError(file, lineno, "missing header");
  {
    auto fields = split_fields(line);
    if (fields.size() < 2 || trim(fields[0]) != "time")
      throw ParseError(file, lineno, "header must be 'time,<gene>,...'");
    for (std::size_t j = 1; j < fields.size(); ++j) {
      auto name = trim(fields[j]);
      if (name.empty()) throw ParseError(file, lineno, "empty gene name in header column " + std::to_string(j + 1));
      genes.emplace_back(name);
    }
  }
  const std::size_t g = genes.size();
  std::map<double, std::vector<std::vector<double>>> groups;
  std::vector<double> row(g);
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != g + 1)
      throw ParseError(file, lineno, "expected " + std::to_string(g + 1) + " fields, found " +
                                         std::to_string(fields.size()));
    double t = 0.0;
    if (!parse_double(fields[0], t) || !std::isfinite(t)) throw ParseError(file, lineno, "non-numeric time");
    for (std::size_t j = 0; j < g; ++j) {
      if (!parse_double(fields[j + 1], row[j]) || !std::isfinite(row[j]))
        throw ParseError(file, lineno, "non-numeric value in column " + std::to_string(j + 2));
    }
    groups[t].push_back(row);
  }
  if (groups.empty()) throw ParseError(file, lineno, "no data rows");

  std::vector<double> times;
  std::vector<Matrix> cells;
  for (auto& [t, rows] : groups) {
    // Order within a timepoint does not carry information; sort rows so the
    // dataset is independent of file row order.
    std::sort(rows.begin(), rows.end());
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(g));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < g; ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    times.push_back(t);
    cells.push_back(std::move(m));
  }
  nlohmann::json prov = nlohmann::json::object();
  auto sidecar = path;
  sidecar += ".provenance.json";
  bool log_normalized = false;
  if (std::filesystem::exists(sidecar)) {
    std::ifstream ps(sidecar);
    prov = nlohmann::json::parse(ps);
    log_normalized = prov.value("log_normalized", false);
  }
  return SnapshotDataset(std::move(times), std::move(cells), std::move(genes), std::move(prov), log_normalized);
}

void save_csv(const SnapshotDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "time";
  for (const auto& g : ds.genes()) out << ',' << g;
  out << '\n';
  for (std::size_t k = 0; k < ds.timepoint_count(); ++k) {
    const Matrix& m = ds.cells(k);
    const std::string t = format_double(ds.time(k));
    for (Index i = 0; i < m.rows(); ++i) {
      out << t;
      for (Index j = 0; j < m.cols(); ++j) out << ',' << format_double(m(i, j));
      out << '\n';
    }
  }
  if (!ds.provenance().empty()) {
    auto sidecar = path;
    sidecar += ".provenance.json";
    std::ofstream ps(sidecar);
    nlohmann::json prov = ds.provenance();
    prov["log_normalized"] = ds.log_normalized();
    ps << prov.dump(2) << '\n';
  }
}

SnapshotDataset preprocess(const SnapshotDataset& ds, Index target_hvg) {
  if (target_hvg < 1) throw std::invalid_argument("preprocess: target-hvg must be positive");
  const Index g = ds.gene_dim();
  std::vector<double> libs;
  Index global = 0;
  for (std::size_t k = 0; k < ds.timepoint_count(); ++k) {
    const Matrix& m = ds.cells(k);
    if ((m.array() < 0.0).any()) throw std::invalid_argument("preprocess: counts must be nonnegative");
    for (Index i = 0; i < m.rows(); ++i, ++global) {
      const double lib = m.row(i).sum();
      if (!(lib > 0.0))
        throw std::invalid_argument("preprocess: cell " + std::to_string(global) + " (timepoint " +
                                    std::to_string(k) + ", row " + std::to_string(i) + ") has zero counts");
      libs.push_back(lib);
    }
  }
  std::vector<double> sorted = libs;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

  std::vector<Matrix> transformed;
  std::size_t c = 0;
  for (std::size_t k = 0; k < ds.timepoint_count(); ++k) {
    Matrix m = ds.cells(k);
    for (Index i = 0; i < m.rows(); ++i, ++c) m.row(i) *= median / libs[c];
    transformed.push_back(m.array().log1p().matrix());
  }

  // Population variance per gene over all cells.
  Vector mean = Vector::Zero(g), sq = Vector::Zero(g);
  for (const auto& m : transformed) {
    mean += m.colwise().sum().transpose();
    sq += m.array().square().matrix().colwise().sum().transpose();
  }
  const double total = static_cast<double>(n);
  Vector var = (sq / total - (mean / total).cwiseAbs2()).cwiseMax(0.0);

  const Index keep = std::min(target_hvg, g);
  std::vector<Index> order(static_cast<std::size_t>(g));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return var(a) > var(b); });
  std::vector<Index> selected(order.begin(), order.begin() + keep);
  std::sort(selected.begin(), selected.end());

  std::vector<Matrix> cells;
  for (const auto& m : transformed) {
    Matrix s(m.rows(), keep);
    for (Index j = 0; j < keep; ++j) s.col(j) = m.col(selected[j]);
    cells.push_back(std::move(s));
  }
  std::vector<std::string> genes;
  for (Index j : selected) genes.push_back(ds.genes()[j]);

  nlohmann::json prov = ds.provenance();
  prov["preprocess"] = {{"normalization", "median_library_size"},
                        {"median_library_size", median},
                        {"transform", "log1p"},
                        {"hvg_rule", "variance_of_log_normalized"},
                        {"target_hvg", target_hvg},
                        {"selected_genes", genes}};
  return SnapshotDataset(ds.times(), std::move(cells), std::move(genes), std::move(prov), true);
}

const char* task_name(Task task) { return task == Task::Interpolation ? "interp" : "extrap"; }

SplitRequest split_request_from_json(const nlohmann::json& doc) {
  SplitRequest req;
  if (doc.contains("interp")) req.interpolation = doc.at("interp").get<std::vector<double>>();
  if (doc.contains("extrap")) req.extrapolation = doc.at("extrap").get<std::vector<double>>();
  return req;
}

nlohmann::json to_json(const SplitRequest& req) {
  return {{"interp", req.interpolation}, {"extrap", req.extrapolation}};
}

nlohmann::json to_json(const HoldoutSplit& split) {
  nlohmann::json doc;
  doc["train_times"] = split.train_times;
  std::vector<double> interp, extrap;
  for (const auto& h : split.holdouts) (h.task == Task::Interpolation ? interp : extrap).push_back(h.time);
  doc["interp"] = interp;
  doc["extrap"] = extrap;
  return doc;
}

std::pair<SnapshotDataset, HoldoutSplit> split_holdout(const SnapshotDataset& ds, const SplitRequest& req) {
  std::vector<bool> held(ds.timepoint_count(), false);
  auto mark = [&](double t) {
    const auto k = ds.index_of(t);
    if (!k) throw std::invalid_argument("split_holdout: time " + format_double(t) + " not in dataset");
    if (held[*k]) throw std::invalid_argument("split_holdout: time " + format_double(t) + " held out twice");
    held[*k] = true;
    return *k;
  };
  std::vector<std::size_t> interp, extrap;
  for (double t : req.interpolation) interp.push_back(mark(t));
  for (double t : req.extrapolation) extrap.push_back(mark(t));

  std::vector<double> times;
  std::vector<Matrix> cells;
  for (std::size_t k = 0; k < ds.timepoint_count(); ++k) {
    if (held[k]) continue;
    times.push_back(ds.time(k));
    cells.push_back(ds.cells(k));
  }
  if (times.size() < 2) throw std::invalid_argument("split_holdout: fewer than two training timepoints remain");
  const double lo = times.front(), hi = times.back();

  HoldoutSplit split;
  split.train_times = times;
  std::sort(interp.begin(), interp.end());
  std::sort(extrap.begin(), extrap.end());
  for (std::size_t k : interp) {
    const double t = ds.time(k);
    if (!(t > lo && t < hi))
      throw std::invalid_argument("split_holdout: interpolation time " + format_double(t) +
                                  " is not bracketed by training times");
    split.holdouts.push_back({t, Task::Interpolation, ds.cells(k)});
  }
  for (std::size_t k : extrap) {
    const double t = ds.time(k);
    if (!(t > hi))
      throw std::invalid_argument("split_holdout: extrapolation time " + format_double(t) +
                                  " does not follow every training time");
    split.holdouts.push_back({t, Task::Extrapolation, ds.cells(k)});
  }
  nlohmann::json prov = ds.provenance();
  prov["split"] = to_json(req);
  SnapshotDataset train(std::move(times), std::move(cells), ds.genes(), std::move(prov), ds.log_normalized());
  return {std::move(train), std::move(split)};
}

namespace {

const std::pair<SyntheticKind, const char*> kKindNames[] = {
    {SyntheticKind::DriftGaussian, "drift-gaussian"},
    {SyntheticKind::Bifurcation, "bifurcation"},
    {SyntheticKind::Rotation, "rotation"},
};

}  // namespace

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& doc) {
  SyntheticSpec s;
  const auto kind = doc.at("kind").get<std::string>();
  bool found = false;
  for (const auto& [k, name] : kKindNames)
    if (kind == name) {
      s.kind = k;
      found = true;
    }
  if (!found) throw std::invalid_argument("unknown synthetic kind: " + kind);
  s.ambient_dim = doc.value("ambient_dim", s.ambient_dim);
  s.gene_dim = doc.value("gene_dim", s.ambient_dim);
  s.timepoints = doc.value("timepoints", s.timepoints);
  s.cells_per_timepoint = doc.value("cells_per_timepoint", s.cells_per_timepoint);
  s.time_step = doc.value("time_step", s.time_step);
  s.noise = doc.value("noise", s.noise);
  s.gene_noise = doc.value("gene_noise", s.gene_noise);
  s.drift = doc.value("drift", s.drift);
  s.split_time = doc.value("split_time", s.split_time);
  s.branch_speed = doc.value("branch_speed", s.branch_speed);
  s.angular_speed = doc.value("angular_speed", s.angular_speed);
  s.radius = doc.value("radius", s.radius);
  s.seed = doc.value("seed", s.seed);
  return s;
}

nlohmann::json to_json(const SyntheticSpec& s) {
  const char* kind = "";
  for (const auto& [k, name] : kKindNames)
    if (k == s.kind) kind = name;
  return {{"kind", kind},
          {"ambient_dim", s.ambient_dim},
          {"gene_dim", s.gene_dim},
          {"timepoints", s.timepoints},
          {"cells_per_timepoint", s.cells_per_timepoint},
          {"time_step", s.time_step},
          {"noise", s.noise},
          {"gene_noise", s.gene_noise},
          {"drift", s.drift},
          {"split_time", s.split_time},
          {"branch_speed", s.branch_speed},
          {"angular_speed", s.angular_speed},
          {"radius", s.radius},
          {"seed", s.seed}};
}

SyntheticData synth_generate(const SyntheticSpec& spec) {
  if (spec.ambient_dim < 1 || spec.gene_dim < 1 || spec.timepoints < 1 || spec.cells_per_timepoint < 1)
    throw std::invalid_argument("synth_generate: counts and dimensions must be positive");
  if (spec.gene_dim < spec.ambient_dim) throw std::invalid_argument("synth_generate: gene_dim < ambient_dim");
  if (!(spec.noise >= 0.0) || !(spec.gene_noise >= 0.0) || !(spec.time_step > 0.0))
    throw std::invalid_argument("synth_generate: noise must be >= 0 and time_step > 0");
  if ((spec.kind == SyntheticKind::Bifurcation || spec.kind == SyntheticKind::Rotation) && spec.ambient_dim < 2)
    throw std::invalid_argument("synth_generate: kind requires ambient_dim >= 2");

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const Index d = spec.ambient_dim, g = spec.gene_dim, n = spec.cells_per_timepoint;

  SyntheticData out;
  if (g == d) {
    out.lift = Matrix::Identity(g, d);
  } else {
    Matrix raw(g, d);
    for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(raw);
    out.lift = qr.householderQ() * Matrix::Identity(g, d);
  }
  out.branch_axis = RowVector::Zero(d);
  out.branch_axis(d > 1 ? 1 : 0) = 1.0;

  std::vector<double> times;
  std::vector<Matrix> cells;
  for (Index k = 0; k < spec.timepoints; ++k) {
    const double t = static_cast<double>(k) * spec.time_step;
    Matrix amb(n, d);
    RowVector mean = RowVector::Zero(d);
    switch (spec.kind) {
      case SyntheticKind::DriftGaussian: {
        mean.setConstant(spec.drift * t);
        for (Index i = 0; i < n; ++i)
          for (Index j = 0; j < d; ++j) amb(i, j) = mean(j) + spec.noise * normal(rng);
        break;
      }
      case SyntheticKind::Bifurcation: {
        mean(0) = spec.drift * t;
        const double offset = spec.branch_speed * std::max(0.0, t - spec.split_time);
        for (Index i = 0; i < n; ++i) {
          const double side = (offset > 0.0 && coin(rng)) ? -1.0 : 1.0;
          for (Index j = 0; j < d; ++j) amb(i, j) = mean(j) + spec.noise * normal(rng);
          amb(i, 1) += side * offset;
        }
        break;
      }
      case SyntheticKind::Rotation: {
        const double a = spec.angular_speed * t;
        Eigen::Matrix2d rot;
        rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        mean(0) = spec.radius * std::cos(a);
        mean(1) = spec.radius * std::sin(a);
        for (Index i = 0; i < n; ++i) {
          Eigen::Vector2d e(2.0 * spec.noise * normal(rng), 0.5 * spec.noise * normal(rng));
          Eigen::Vector2d p = rot * e;
          amb(i, 0) = mean(0) + p(0);
          amb(i, 1) = mean(1) + p(1);
          for (Index j = 2; j < d; ++j) amb(i, j) = spec.noise * normal(rng);
        }
        break;
      }
    }
    Matrix genes = amb * out.lift.transpose();
    if (spec.gene_noise > 0.0)
      for (Index i = 0; i < genes.size(); ++i) genes.data()[i] += spec.gene_noise * normal(rng);
    times.push_back(t);
    cells.push_back(std::move(genes));
    out.ambient_means.push_back(mean);
  }
  nlohmann::json prov = {{"synthetic", to_json(spec)}};
  out.dataset = SnapshotDataset(std::move(times), std::move(cells), {}, std::move(prov));
  return out;
}

}  // namespace snapflow
