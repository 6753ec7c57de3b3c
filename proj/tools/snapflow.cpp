// snapflow: synth / train / evaluate / predict.

#include "snapflow/checkpoint.hpp"
#include "snapflow/data.hpp"
#include "snapflow/eval.hpp"
#include "snapflow/trainer.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace snapflow;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

json versions() {
  return {{"snapflow", kVersion},
          {"checkpoint_format", kCheckpointFormatVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)}};
}

std::vector<double> parse_times(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (item.empty() || used != item.size()) throw UsageError("--times: not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--times: no times given");
  return out;
}

std::string time_tag(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

struct Options {
  std::string config, data, split, out, checkpoint, times;
  std::optional<std::uint64_t> seed;
  long n = 1000;
  bool freeze_vae = false;
  bool projection = false;
};

int cmd_synth(const Options& o) {
  json doc = read_json(o.config);
  if (o.seed) doc["seed"] = *o.seed;
  SyntheticSpec spec;
  try {
    spec = synthetic_spec_from_json(doc);
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid synthetic spec: ") + e.what());
  }
  const SyntheticData data = synth_generate(spec);
  fs::create_directories(o.out);
  save_csv(data.dataset, fs::path(o.out) / "data.csv");
  write_json_atomic(fs::path(o.out) / "spec.json", to_json(spec));
  std::cout << "wrote " << (fs::path(o.out) / "data.csv").string() << " (" << data.dataset.timepoint_count()
            << " timepoints, " << data.dataset.cell_count() << " cells)\n";
  return 0;
}

int cmd_train(const Options& o) {
  TrainConfig config = train_config_from_json(read_json(o.config));
  if (o.seed) config.seed = *o.seed;
  if (o.freeze_vae) config.freeze_vae = true;
  config.validate();

  const SnapshotDataset full = load_csv(o.data);
  SnapshotDataset train = full;
  json split_doc = nullptr;
  if (!o.split.empty()) {
    auto [tr, split] = split_holdout(full, split_request_from_json(read_json(o.split)));
    train = std::move(tr);
    split_doc = to_json(split_request_from_json(read_json(o.split)));
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  std::vector<std::string> checkpoints;
  const auto begin = std::chrono::steady_clock::now();
  const FitResult result = fit(train, config, [&](const Model& m, long step) {
    const fs::path p = out / "checkpoints" / ("step_" + std::to_string(step) + ".json");
    fs::create_directories(p.parent_path());
    save_model(m, p);
    checkpoints.push_back(p.string());
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count();

  save_model(result.model, out / "model.json");
  checkpoints.push_back((out / "model.json").string());
  write_train_log_csv(result.log, out / "train_log.csv", config.log_wall_time);

  json manifest;
  manifest["command"] = "train";
  manifest["config"] = to_json(config);
  manifest["seed"] = config.seed;
  manifest["data"] = {{"path", o.data}, {"provenance", full.provenance()}};
  manifest["split"] = split_doc;
  manifest["checkpoints"] = checkpoints;
  manifest["train_log"] = (out / "train_log.csv").string();
  manifest["converged"] = result.log.converged;
  manifest["phase2_steps"] = result.log.steps.size();
  manifest["rollouts"] = result.log.rollouts;
  manifest["versions"] = versions();
  manifest["wall_clock"] = {{"finished_utc", utc_now()}, {"seconds", seconds}};
  write_json_atomic(out / "manifest.json", manifest);
  std::cout << "trained " << result.log.steps.size() << " steps"
            << (result.log.converged ? " (converged)" : "") << "; model at " << (out / "model.json").string()
            << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  const Model model = load_model(o.checkpoint);
  const SnapshotDataset full = load_csv(o.data);
  if (full.gene_dim() != model.vae.gene_dim())
    throw std::invalid_argument("dataset has " + std::to_string(full.gene_dim()) + " genes but the checkpoint expects " +
                                std::to_string(model.vae.gene_dim()));
  auto [train, split] = split_holdout(full, split_request_from_json(read_json(o.split)));

  EvalConfig cfg;
  cfg.ot.blur = model.config.blur;
  cfg.ot.scaling = model.config.scaling;
  cfg.seed = o.seed.value_or(model.config.seed);
  const MetricReport report = evaluate(model, train, split, cfg);

  const fs::path out(o.out);
  fs::create_directories(out);
  write_report_csv(report, out / "report.csv");
  write_json_atomic(out / "report.json", to_json(report));

  if (o.projection) {
    std::vector<std::pair<double, Matrix>> truth;
    std::vector<double> times;
    for (const auto& h : split.holdouts) {
      truth.emplace_back(h.time, h.cells);
      times.push_back(h.time);
    }
    const auto preds = predict(model, train, times, std::min<Index>(cfg.max_cells, train.cells(0).rows() * 4), cfg.seed);
    emit_projection(truth, preds, out / "projection.csv");
  }

  json manifest;
  manifest["command"] = "evaluate";
  manifest["checkpoint"] = o.checkpoint;
  manifest["data"] = {{"path", o.data}, {"provenance", full.provenance()}};
  manifest["split"] = read_json(o.split);
  manifest["seed"] = cfg.seed;
  manifest["report"] = {(out / "report.csv").string(), (out / "report.json").string()};
  manifest["versions"] = versions();
  manifest["wall_clock"] = {{"finished_utc", utc_now()}};
  write_json_atomic(out / "manifest.json", manifest);
  for (const auto& s : report.summary)
    std::cout << s.task << ": W=" << s.wasserstein << " (naive " << s.naive_wasserstein << "), l2=" << s.l2
              << " (naive " << s.naive_l2 << ")\n";
  return 0;
}

int cmd_predict(const Options& o) {
  if (o.n < 1) throw UsageError("--n must be >= 1");
  const std::vector<double> times = parse_times(o.times);
  const Model model = load_model(o.checkpoint);
  const std::uint64_t seed = o.seed.value_or(model.config.seed);
  const auto preds = predict(model, model.source_cells, times, o.n, seed);

  std::vector<std::string> genes;
  std::optional<SnapshotDataset> data;
  if (!o.data.empty()) {
    data = load_csv(o.data);
    if (data->gene_dim() != model.vae.gene_dim()) throw std::invalid_argument("dataset/checkpoint gene count mismatch");
    genes = data->genes();
  } else {
    for (Index g = 0; g < model.vae.gene_dim(); ++g) genes.push_back("gene_" + std::to_string(g + 1));
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  for (const auto& p : preds) write_prediction_csv(p, genes, out / ("pred_t" + time_tag(p.time) + ".csv"));
  if (o.projection) {
    std::vector<std::pair<double, Matrix>> truth;
    if (data) {
      for (std::size_t k = 0; k < data->timepoint_count(); ++k) truth.emplace_back(data->time(k), data->cells(k));
    } else {
      truth.emplace_back(model.t0(), model.source_cells);
    }
    emit_projection(truth, preds, out / "projection.csv");
  }
  std::cout << "wrote " << preds.size() << " prediction files to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("SNAPFLOW_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"Latent flow matching on snapshot populations"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", seed, "RNG seed override"); };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", o.config, "SyntheticSpec JSON")->required();
  synth->add_option("--out", o.out, "output directory")->required();
  add_seed(synth);

  auto* train = app.add_subcommand("train", "two-phase training");
  train->add_option("--config", o.config, "TrainConfig JSON")->required();
  train->add_option("--data", o.data, "dataset CSV")->required();
  train->add_option("--split", o.split, "holdout split JSON (holdouts are excluded from training)");
  train->add_option("--out", o.out, "output directory")->required();
  train->add_flag("--freeze-vae", o.freeze_vae, "keep the VAE fixed during Phase II");
  add_seed(train);

  auto* eval = app.add_subcommand("evaluate", "metrics at held-out times");
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  eval->add_option("--data", o.data, "dataset CSV")->required();
  eval->add_option("--split", o.split, "holdout split JSON")->required();
  eval->add_option("--out", o.out, "output directory")->required();
  eval->add_flag("--emit-projection", o.projection, "write a PCA projection CSV");
  add_seed(eval);

  auto* pred = app.add_subcommand("predict", "generate populations at query times");
  pred->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  pred->add_option("--times", o.times, "comma separated query times")->required();
  pred->add_option("--n", o.n, "cells per query time");
  pred->add_option("--out", o.out, "output directory")->required();
  pred->add_option("--data", o.data, "dataset CSV (gene names, projection truth)");
  pred->add_flag("--emit-projection", o.projection, "write a PCA projection CSV");
  add_seed(pred);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  for (auto* cmd : {synth, train, eval, pred})
    if (cmd->get_option("--seed")->count() > 0) o.seed = seed;

  try {
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_evaluate(o);
    if (*pred) return cmd_predict(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
