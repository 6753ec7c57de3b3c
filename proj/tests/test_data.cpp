#include "snapflow/data.hpp"
#include "snapflow/stats.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace snapflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "snapflow_test_data";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const fs::path p = scratch(name);
  std::ofstream(p) << text;
  return p;
}

std::size_t error_line(const fs::path& p) {
  try {
    load_csv(p);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

}  // namespace

TEST_CASE("load_csv groups rows by time") {
  const auto p = write_text("small.csv", "time,a,b\n0,1,2\n1,3,4\n0,5,6\n1,7,8\n1,9,10\n");
  const SnapshotDataset ds = load_csv(p);
  REQUIRE(ds.timepoint_count() == 2);
  CHECK(ds.cells(0).rows() == 2);
  CHECK(ds.cells(1).rows() == 3);
  CHECK(ds.genes() == std::vector<std::string>{"a", "b"});
  CHECK(ds.time(1) == 1.0);

  const auto q = write_text("shuffled.csv", "time,a,b\n1,9,10\n0,5,6\n1,3,4\n1,7,8\n0,1,2\n");
  const SnapshotDataset shuffled = load_csv(q);
  for (std::size_t k = 0; k < 2; ++k) CHECK(shuffled.cells(k) == ds.cells(k));
}

TEST_CASE("load_csv errors carry line numbers") {
  CHECK(error_line(write_text("hdr.csv", "t,a\n0,1\n")) == 1);
  CHECK(error_line(write_text("ragged.csv", "time,a,b\n0,1,2\n0,1\n")) == 3);
  CHECK(error_line(write_text("nonnum.csv", "time,a\n0,1\n1,x\n2,3\n")) == 3);
  CHECK(error_line(write_text("nan.csv", "time,a\n0,nan\n")) == 2);
  CHECK_THROWS(load_csv(scratch("does_not_exist.csv")));
}

TEST_CASE("csv round trip with provenance sidecar") {
  SyntheticSpec spec;
  spec.gene_dim = 5;
  spec.timepoints = 3;
  spec.cells_per_timepoint = 20;
  spec.seed = 4;
  const SnapshotDataset ds = synth_generate(spec).dataset;
  const auto p = scratch("roundtrip.csv");
  save_csv(ds, p);
  CHECK(fs::exists(p.string() + ".provenance.json"));
  const SnapshotDataset back = load_csv(p);
  REQUIRE(back.timepoint_count() == ds.timepoint_count());
  for (std::size_t k = 0; k < ds.timepoint_count(); ++k) {
    // Rows come back sorted within each time; compare as sorted sets.
    auto sorted = [](Matrix m) {
      std::vector<RowVector> rows;
      for (Index i = 0; i < m.rows(); ++i) rows.push_back(m.row(i));
      std::sort(rows.begin(), rows.end(), [](const RowVector& a, const RowVector& b) {
        return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
      });
      for (Index i = 0; i < m.rows(); ++i) m.row(i) = rows[i];
      return m;
    };
    CHECK((sorted(back.cells(k)) - sorted(ds.cells(k))).cwiseAbs().maxCoeff() < 1e-9);
  }
  CHECK(back.provenance().contains("synthetic"));
}

TEST_CASE("dataset invariants") {
  CHECK_THROWS(SnapshotDataset({1.0, 0.5}, {Matrix::Zero(1, 2), Matrix::Zero(1, 2)}));
  CHECK_THROWS(SnapshotDataset({0.0, 1.0}, {Matrix::Zero(1, 2), Matrix::Zero(1, 3)}));
  CHECK_THROWS(SnapshotDataset({0.0}, {Matrix::Zero(0, 2)}));
  Matrix neg = Matrix::Zero(1, 2);
  neg(0, 0) = -1.0;
  CHECK_THROWS(SnapshotDataset({0.0}, {neg}, {}, nlohmann::json::object(), true));
}

TEST_CASE("preprocess arithmetic") {
  Matrix counts(3, 2);
  counts << 1, 1, 2, 2, 0, 4;  // library sizes 2, 4, 4 -> median 4
  const SnapshotDataset raw({0.0}, {counts});
  const SnapshotDataset pp = preprocess(raw, 2);
  CHECK(pp.log_normalized());
  CHECK(pp.cells(0)(0, 0) == doctest::Approx(std::log1p(2.0)));
  CHECK(pp.cells(0)(2, 1) == doctest::Approx(std::log1p(4.0)));

  Matrix two(3, 2);
  two << 1, 1, 1, 1, 1, 1;  // median library 2, cell (1,1) unchanged
  const SnapshotDataset pp2 = preprocess(SnapshotDataset({0.0}, {two}), 2);
  CHECK(pp2.cells(0)(0, 0) == doctest::Approx(std::log(2.0)));
  CHECK(pp.provenance().contains("preprocess"));
}

TEST_CASE("preprocess gene selection") {
  Matrix counts(4, 4);
  counts << 5, 1, 9, 0,  //
      5, 7, 1, 3,        //
      5, 2, 4, 8,        //
      5, 9, 0, 1;
  const SnapshotDataset raw({0.0, 1.0}, {counts.topRows(2), counts.bottomRows(2)}, {"flat", "g2", "g3", "g4"});
  const SnapshotDataset all = preprocess(raw, 4);
  CHECK(all.gene_dim() == 4);
  const SnapshotDataset three = preprocess(raw, 3);
  CHECK(std::find(three.genes().begin(), three.genes().end(), "flat") == three.genes().end());
  const SnapshotDataset again = preprocess(raw, 3);
  CHECK(again.genes() == three.genes());

  Matrix zero_cell = counts;
  zero_cell.row(2).setZero();
  try {
    preprocess(SnapshotDataset({0.0}, {zero_cell}), 2);
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("cell 2") != std::string::npos);
  }
}

TEST_CASE("split_holdout on twelve timepoints") {
  std::vector<double> times;
  std::vector<Matrix> cells;
  for (int k = 0; k < 12; ++k) {
    times.push_back(k);
    cells.push_back(Matrix::Constant(2, 3, k));
  }
  const SnapshotDataset ds(times, cells);
  SplitRequest req;
  req.interpolation = {4, 6, 8};
  req.extrapolation = {10, 11};
  const auto [train, split] = split_holdout(ds, req);
  CHECK(train.timepoint_count() == 7);
  REQUIRE(split.holdouts.size() == 5);
  CHECK(split.holdouts[0].task == Task::Interpolation);
  CHECK(split.holdouts[4].task == Task::Extrapolation);
  CHECK(split.holdouts[4].cells(0, 0) == 11.0);
  std::vector<double> all = train.times();
  for (const auto& h : split.holdouts) all.push_back(h.time);
  std::sort(all.begin(), all.end());
  CHECK(all == times);

  const auto [same, none] = split_holdout(ds, SplitRequest{});
  CHECK(same.timepoint_count() == 12);
  CHECK(none.holdouts.empty());

  CHECK_THROWS(split_holdout(ds, SplitRequest{{0.0}, {}}));
  CHECK_THROWS(split_holdout(ds, SplitRequest{{}, {9.0}}));
  CHECK_THROWS(split_holdout(ds, SplitRequest{{2.5}, {}}));
  SplitRequest greedy;
  for (int k = 1; k < 12; ++k) greedy.extrapolation.push_back(k);
  CHECK_THROWS(split_holdout(ds, greedy));

  const auto json_req = split_request_from_json(nlohmann::json::parse(R"({"interp": [4, 6, 8], "extrap": [10, 11]})"));
  CHECK(json_req.interpolation == std::vector<double>{4, 6, 8});
  CHECK(json_req.extrapolation == std::vector<double>{10, 11});
}

TEST_CASE("synthetic drift gaussians") {
  SyntheticSpec spec;
  spec.timepoints = 10;
  spec.cells_per_timepoint = 400;
  spec.noise = 0.1;
  spec.seed = 77;
  const SyntheticData data = synth_generate(spec);
  const double se = 0.1 / std::sqrt(400.0);
  for (std::size_t k = 0; k < 10; ++k) {
    const RowVector m = data.dataset.cells(k).colwise().mean();
    CHECK(std::abs(m(0) - double(k)) < 4 * se);
    CHECK(std::abs(m(1) - double(k)) < 4 * se);
  }
  const SyntheticData again = synth_generate(spec);
  for (std::size_t k = 0; k < 10; ++k) CHECK(again.dataset.cells(k) == data.dataset.cells(k));

  spec.gene_dim = 10;
  const SyntheticData lifted = synth_generate(spec);
  CHECK(lifted.dataset.gene_dim() == 10);
  CHECK((lifted.lift.transpose() * lifted.lift - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);

  spec.cells_per_timepoint = 0;
  CHECK_THROWS(synth_generate(spec));
  CHECK_THROWS(synthetic_spec_from_json(nlohmann::json{{"kind", "spiral"}}));
}

TEST_CASE("bifurcation is unimodal before the split and bimodal after") {
  SyntheticSpec spec;
  spec.kind = SyntheticKind::Bifurcation;
  spec.cells_per_timepoint = 300;
  spec.noise = 0.2;
  spec.split_time = 3.0;
  spec.seed = 5;
  const SyntheticData data = synth_generate(spec);
  const double threshold = dip_unimodal_threshold(300, 0.95, 200, 1);
  auto dip_at = [&](std::size_t k) {
    const Matrix& x = data.dataset.cells(k);
    std::vector<double> proj(static_cast<std::size_t>(x.rows()));
    for (Index i = 0; i < x.rows(); ++i) proj[i] = x.row(i).dot(data.branch_axis);
    return dip_statistic(proj);
  };
  CHECK(dip_at(1) < threshold);
  CHECK(dip_at(3) < threshold);
  CHECK(dip_at(5) > threshold);
}

TEST_CASE("generators stay finite with the declared shape over random specs") {
  Rng rng(99);
  std::uniform_int_distribution<Index> dim(2, 5), tp(1, 6), cells(1, 30);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int rep = 0; rep < 1000; ++rep) {
    SyntheticSpec s;
    s.kind = static_cast<SyntheticKind>(rep % 3);
    s.ambient_dim = dim(rng);
    s.gene_dim = s.ambient_dim + dim(rng) - 2;
    s.timepoints = tp(rng);
    s.cells_per_timepoint = cells(rng);
    s.noise = u(rng);
    s.gene_noise = u(rng) / 4;
    s.drift = u(rng) - 1.0;
    s.time_step = 0.1 + u(rng);
    s.seed = static_cast<std::uint64_t>(rep);
    const SnapshotDataset ds = synth_generate(s).dataset;
    REQUIRE(ds.timepoint_count() == static_cast<std::size_t>(s.timepoints));
    for (std::size_t k = 0; k < ds.timepoint_count(); ++k) {
      REQUIRE(ds.cells(k).rows() == s.cells_per_timepoint);
      REQUIRE(ds.cells(k).cols() == s.gene_dim);
      REQUIRE(ds.cells(k).allFinite());
    }
  }
}
