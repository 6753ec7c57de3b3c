// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.
#include "gradcheck.hpp"
#include "snapflow/eval.hpp"
#include "snapflow/stats.hpp"
#include "snapflow/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include <sys/wait.h>

using namespace snapflow;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

Matrix randn(Index r, Index c, Rng& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void randomize(VelocityField& f, Rng& rng, double s = 0.5) {
  for (auto& p : f.parameters()) p.mutable_value() = randn(p.rows(), p.cols(), rng, s);
}

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail, Clock::time_point start) {
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  std::printf("%s [%d] %s: %s (%.1fs)\n", ok ? "PASS" : "FAIL", id, name, detail.c_str(), secs);
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --- 1 ---------------------------------------------------------------------

void gradients() {
  const auto start = Clock::now();
  Rng rng(101);
  std::uniform_int_distribution<Index> dim(1, 5), rows(1, 6), hidden(2, 8);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index g = dim(rng) + 1, d = dim(rng), h = hidden(rng), b = rows(rng) + 1;
    const Vae vae(VaeArchitecture{.gene_dim = g, .latent_dim = d, .hidden = h}, rng);
    const Tensor x = Tensor::constant(randn(b, g, rng));
    const std::uint64_t noise_seed = rng();
    const double lkl = unif(rng);
    worst = std::max(worst, testing::check_gradients(
                                [&] {
                                  Rng noise(noise_seed);
                                  return vae_loss(vae, x, lkl, noise).total;
                                },
                                vae.parameters())
                                .max_relative_error);

    const double t0 = 3.0 * unif(rng), t1 = t0 + 0.1 + 2.0 * unif(rng);
    const Index tdim = 2 * (1 + rng() % 3);
    const TimeEmbedding emb(tdim, t0, t1);
    VelocityField fwd(Direction::Forward, FieldArchitecture{d, h, tdim, 1000.0}, emb, rng);
    VelocityField bwd(Direction::Backward, FieldArchitecture{d, h, tdim, 1000.0}, emb, rng);
    randomize(fwd, rng);
    randomize(bwd, rng);

    Tensor z = Tensor::parameter(randn(b, d, rng));
    const Matrix w = randn(b, d, rng);
    std::vector<double> ts(static_cast<std::size_t>(b));
    for (auto& t : ts) t = t0 + (t1 - t0) * unif(rng);
    auto params = fwd.parameters();
    params.push_back(z);
    worst = std::max(worst, testing::check_gradients(
                                [&] { return sum(mul(eval_field(fwd, ts, z), Tensor::constant(w))); }, params)
                                .max_relative_error);

    const Matrix za = randn(b, d, rng), zb = randn(b, d, rng);
    const auto u = uniform_marginal<double>(b);
    const Index k = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(b));
    const TopKCoupling top = topk_truncate(sinkhorn(cost_euclidean(za, zb), u, u, 0.5), k);
    std::vector<double> alphas(top.pair_count());
    for (auto& a : alphas) a = unif(rng);
    auto field_params = fwd.parameters();
    for (const auto& p : bwd.parameters()) field_params.push_back(p);
    worst = std::max(worst, testing::check_gradients(
                                [&] { return fm_loss_topk(top, za, zb, t0, t1, fwd, bwd, alphas).total; },
                                field_params)
                                .max_relative_error);
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  report(1, "gradient correctness", worst < 1e-4 && secs < 60.0,
         "100 configs x {vae_loss, eval_field, fm_loss_topk}, max rel err " + fmt("%.2e", worst), start);
}

// --- 2 ---------------------------------------------------------------------

// Uniform square problems have a permutation matrix among the LP optima.
double assignment_optimum(const Matrix& c) {
  std::vector<int> perm(static_cast<std::size_t>(c.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Index i = 0; i < c.rows(); ++i) s += c(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(c.rows());
}

void sinkhorn_lp() {
  const auto start = Clock::now();
  Rng rng(202);
  std::uniform_int_distribution<Index> size(1, 8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double eps = 0.05;
  double worst_marg = 0.0, worst_gap = -1.0;
  int bad = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const Index n = size(rng);
    Matrix c(n, n);
    for (Index i = 0; i < c.size(); ++i) c.data()[i] = unit(rng);
    const auto u = uniform_marginal<double>(n);
    const auto pi = sinkhorn(c, u, u, eps, SinkhornOptions{.max_iters = 1000000, .tol = 5e-7});
    const double marg = std::max((pi.plan.rowwise().sum() - u).cwiseAbs().maxCoeff(),
                                 (pi.plan.colwise().sum().transpose() - u).cwiseAbs().maxCoeff());
    const double gap = transport_cost(pi, c) - assignment_optimum(c);
    worst_marg = std::max(worst_marg, marg);
    worst_gap = std::max(worst_gap, gap / (eps * std::log(double(n * n)) + 1e-6));
    if (!(marg < 1e-6) || gap < -1e-9 || gap > eps * std::log(double(n * n)) + 1e-6) ++bad;
  }
  const Matrix zero = Matrix::Zero(6, 6);
  const auto u6 = uniform_marginal<double>(6);
  const double zero_err = (sinkhorn(zero, u6, u6, eps).plan.array() - 1.0 / 36.0).abs().maxCoeff();
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  report(2, "sinkhorn vs exact LP", bad == 0 && zero_err < 1e-9 && secs < 60.0,
         "200 instances, max marginal err " + fmt("%.2e", worst_marg) + ", max gap/bound " + fmt("%.3f", worst_gap) +
             ", zero-cost err " + fmt("%.1e", zero_err),
         start);
}

// --- 3 ---------------------------------------------------------------------

VelocityField zero_field(Direction dir, Index d, Rng& rng) {
  VelocityField f(dir, FieldArchitecture{d, 6, 4, 1000.0}, TimeEmbedding(4, 0.0, 5.0), rng);
  for (auto& p : f.parameters()) p.mutable_value().setZero();
  return f;
}

void cost_fusion() {
  const auto start = Clock::now();
  Rng rng(303);
  std::uniform_int_distribution<Index> size(1, 16), dim(1, 6);
  std::uniform_real_distribution<double> unif(0.0, 4.0);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index d = dim(rng);
    const Matrix za = randn(size(rng), d, rng, 2.0), zb = randn(size(rng), d, rng, 2.0);
    const VelocityField f = zero_field(Direction::Forward, d, rng), b = zero_field(Direction::Backward, d, rng);
    const double ta = unif(rng), tb = ta + 0.05 + unif(rng);
    auto fwd = [&](double t, const Matrix& z) { return Matrix(eval_field(f, t, Tensor::constant(z)).value()); };
    auto bwd = [&](double t, const Matrix& z) { return Matrix(eval_field(b, t, Tensor::constant(z)).value()); };
    const auto bi = cost_bidirectional(za, zb, fwd, bwd, ta, tb);
    const auto eu = cost_euclidean(za, zb);
    worst = std::max(worst, (bi.entries - eu.entries).cwiseAbs().maxCoeff());
  }
  report(3, "cost-fusion identity", worst < 1e-12, "100 batches, max |C_bi - C_euc| " + fmt("%.1e", worst), start);
}

// --- 4 ---------------------------------------------------------------------

void topk_exact() {
  const auto start = Clock::now();
  Rng rng(404);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double worst = 0.0;
  for (Index b : {4, 8, 16}) {
    for (int rep = 0; rep < 5; ++rep) {
      const Index d = 3;
      const TimeEmbedding emb(4, 0.0, 2.0);
      VelocityField fwd(Direction::Forward, FieldArchitecture{d, 8, 4, 1000.0}, emb, rng);
      VelocityField bwd(Direction::Backward, FieldArchitecture{d, 8, 4, 1000.0}, emb, rng);
      const Matrix za = randn(b, d, rng), zb = randn(b, d, rng);
      const double ta = 0.25, tb = 1.75;
      const auto u = uniform_marginal<double>(b);
      const auto pi = sinkhorn(cost_euclidean(za, zb), u, u, 0.1, SinkhornOptions{.max_iters = 100000, .tol = 1e-12});
      const TopKCoupling top = topk_truncate(pi, b);

      // Shared alpha per (i, j), laid out in the coupling's pair order.
      Matrix alpha(b, b);
      for (Index i = 0; i < alpha.size(); ++i) alpha.data()[i] = unif(rng);
      std::vector<double> alphas;
      for (std::size_t p = 0; p < top.pair_count(); ++p) alphas.push_back(alpha(top.row_index[p], top.col_index[p]));
      const double got = fm_loss_topk(top, za, zb, ta, tb, fwd, bwd, alphas).total.item();

      double full = 0.0;
      for (Index i = 0; i < b; ++i)
        for (Index j = 0; j < b; ++j) {
          const double a = alpha(i, j), t = (1 - a) * ta + a * tb;
          const Tensor z = Tensor::constant(Matrix((1 - a) * za.row(i) + a * zb.row(j)));
          const RowVector target = (zb.row(j) - za.row(i)) / (tb - ta);
          full += pi.plan(i, j) * ((eval_field(fwd, t, z).value() - target).squaredNorm() +
                                   (eval_field(bwd, t, z).value() - target).squaredNorm());
        }
      full /= pi.plan.sum();
      worst = std::max(worst, std::abs(got - full));
    }
  }
  report(4, "top-K exactness at K = B", worst < 1e-10, "B in {4,8,16}, max |diff| " + fmt("%.1e", worst), start);
}

// --- 5 ---------------------------------------------------------------------

double rk4_error(double step) {
  const FieldFn f = [](double, const Tensor& z) { return z; };
  const double t1 = 1.0;
  const Rollout r = integrate(f, Tensor::constant(Matrix::Ones(1, 1)), 0.0, std::span(&t1, 1), Integrator::Rk4, step);
  return std::abs(r.states.back().item() - std::exp(1.0));
}

void integrator() {
  const auto start = Clock::now();
  const double e1 = rk4_error(0.1), e2 = rk4_error(0.05), e3 = rk4_error(0.025);
  const double r1 = e1 / e2, r2 = e2 / e3;
  const bool ok = e1 < 1e-5 && r1 >= 12 && r1 <= 20 && r2 >= 12 && r2 <= 20;
  report(5, "RK4 accuracy and order", ok,
         "err(0.1) " + fmt("%.2e", e1) + ", ratios " + fmt("%.2f", r1) + " " + fmt("%.2f", r2), start);
}

// --- 6, 7 ------------------------------------------------------------------

// Desk-scale architecture; every other knob is the library default.
TrainConfig e2e_config(std::uint64_t seed) {
  TrainConfig c;
  c.latent_dim = 8;
  c.vae_hidden = 64;
  c.field_hidden = 64;
  c.time_dim = 16;
  c.batch_size = 64;
  c.max_steps = 1500;
  c.vae_epochs = 200;
  c.seed = seed;
  return c;
}

void end_to_end_drift() {
  const auto start = Clock::now();
  bool interp_ok = true, extrap_ok = true;
  std::ostringstream interp_detail, extrap_detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    SyntheticSpec spec;
    spec.gene_dim = 10;
    spec.timepoints = 8;
    spec.cells_per_timepoint = 300;
    spec.noise = 0.3;
    spec.gene_noise = 0.05;
    spec.seed = seed;
    const SnapshotDataset ds = synth_generate(spec).dataset;
    const auto [train, split] = split_holdout(ds, SplitRequest{{3.0, 5.0}, {7.0}});
    const FitResult fit_result = fit(train, e2e_config(seed));
    EvalConfig ec;
    ec.seed = seed;
    const MetricReport rep = evaluate(fit_result.model, train, split, ec);
    for (const auto& r : rep.rows) {
      const double ratio = r.wasserstein / r.naive_wasserstein;
      std::printf("  seed %llu t=%g %s W=%.4f naive=%.4f ratio=%.3f steps=%zu\n",
                  static_cast<unsigned long long>(seed), r.time, task_name(r.task), r.wasserstein,
                  r.naive_wasserstein, ratio, fit_result.log.steps.size());
      if (r.task == Task::Interpolation) {
        interp_ok = interp_ok && ratio <= 0.6;
        interp_detail << ' ' << fmt("%.3f", ratio);
      } else {
        extrap_ok = extrap_ok && ratio <= 0.8;
        extrap_detail << ' ' << fmt("%.3f", ratio);
      }
    }
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  report(6, "end-to-end interpolation", interp_ok && secs <= 600.0,
         "W/naive at t=3,5 over 3 seeds:" + interp_detail.str() + " (bound 0.6)", start);
  report(7, "end-to-end extrapolation", extrap_ok && secs <= 600.0,
         "W/naive at t=7 over 3 seeds:" + extrap_detail.str() + " (bound 0.8)", start);
}

// --- 8 ---------------------------------------------------------------------

void bifurcation() {
  const auto start = Clock::now();
  SyntheticSpec spec;
  spec.kind = SyntheticKind::Bifurcation;
  spec.gene_dim = 10;
  spec.timepoints = 8;
  spec.cells_per_timepoint = 300;
  spec.noise = 0.2;
  spec.gene_noise = 0.05;
  spec.split_time = 3.0;
  spec.seed = 8;
  const SyntheticData data = synth_generate(spec);
  const auto [train, split] = split_holdout(data.dataset, SplitRequest{{4.0}, {}});
  const FitResult fr = fit(train, e2e_config(8));
  const Index n = 300;
  const std::vector<double> q{4.0};
  const Matrix pred = predict(fr.model, train, q, n, 8).front().cells;

  const Vector axis = data.lift * data.branch_axis.transpose();
  std::vector<double> proj(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) proj[i] = pred.row(i).dot(axis);
  const double dip = dip_statistic(proj);
  const double threshold = dip_unimodal_threshold(n, 0.95, 1000, 8);
  report(8, "bifurcation stays bimodal", dip > threshold,
         "dip " + fmt("%.4f", dip) + " vs unimodal 95% threshold " + fmt("%.4f", threshold), start);
}

// --- 9 ---------------------------------------------------------------------

void schedule() {
  const auto start = Clock::now();
  SyntheticSpec spec;
  spec.gene_dim = 4;
  spec.timepoints = 4;
  spec.cells_per_timepoint = 40;
  const SnapshotDataset ds = synth_generate(spec).dataset;
  TrainConfig c;
  c.latent_dim = 2;
  c.vae_hidden = 8;
  c.field_hidden = 8;
  c.time_dim = 4;
  c.batch_size = 16;
  c.vae_epochs = 2;
  c.max_steps = 240;
  c.convergence_window = 1000;
  const FitResult r = fit(ds, c);
  long switch_step = -1, globals = 0;
  bool ok = r.log.steps.size() == 240;
  Phase prev = Phase::Warmup;
  for (const auto& s : r.log.steps) {
    if (s.phase != prev) {
      ok = ok && switch_step < 0 && s.phase == Phase::Fused;
      switch_step = s.step;
    }
    prev = s.phase;
    ok = ok && s.l_ot.has_value() == (s.step % c.ot_period == 0);
    globals += s.l_ot.has_value();
  }
  ok = ok && switch_step == c.warmup_steps + 1 && globals == 24 && r.log.rollouts == 24;
  report(9, "schedule conformance", ok,
         "fused from step " + std::to_string(switch_step) + ", " + std::to_string(globals) +
             " global evaluations in 240 steps",
         start);
}

// --- 10 --------------------------------------------------------------------

int run(const std::string& args) {
  const std::string cmd = std::string(SNAPFLOW_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism() {
  const auto start = Clock::now();
  const fs::path root = fs::temp_directory_path() / "snapflow_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "spec.json") << R"({"kind": "drift-gaussian", "gene_dim": 10, "timepoints": 8,
    "cells_per_timepoint": 100, "noise": 0.3, "gene_noise": 0.05, "seed": 4})";
  std::ofstream(root / "split.json") << R"({"interp": [3, 5], "extrap": [7]})";
  std::ofstream(root / "train.json") << R"({"epsilon": 0.05, "warmup_steps": 20, "ot_period": 10,
    "lambda_fm": 1, "lambda_ot": 0.1, "lambda_dyn": 0.1, "lambda_kl": 0.001, "latent_dim": 4,
    "vae_hidden": 16, "field_hidden": 16, "time_dim": 8, "batch_size": 32, "max_steps": 60,
    "vae_epochs": 10, "seed": 9})";
  bool ok = run("synth --config " + (root / "spec.json").string() + " --out " + (root / "data").string()) == 0;
  const std::string data = (root / "data" / "data.csv").string(), split = (root / "split.json").string();
  for (const char* name : {"a", "b"}) {
    const fs::path out = root / name;
    ok = ok && run("train --config " + (root / "train.json").string() + " --data " + data + " --split " + split +
                   " --out " + (out / "train").string()) == 0;
    ok = ok && run("evaluate --checkpoint " + (out / "train" / "model.json").string() + " --data " + data +
                   " --split " + split + " --out " + (out / "eval").string()) == 0;
  }
  const std::string log_a = slurp(root / "a" / "train" / "train_log.csv");
  const std::string rep_a = slurp(root / "a" / "eval" / "report.csv");
  ok = ok && !log_a.empty() && !rep_a.empty() && log_a == slurp(root / "b" / "train" / "train_log.csv") &&
       rep_a == slurp(root / "b" / "eval" / "report.csv");
  report(10, "determinism", ok, "train_log.csv and report.csv byte-identical across two CLI runs", start);
}

}  // namespace

int main() {
  gradients();
  sinkhorn_lp();
  cost_fusion();
  topk_exact();
  integrator();
  end_to_end_drift();
  bifurcation();
  schedule();
  determinism();
  std::printf("%d criteria failed\n", failures);
  return failures;
}
