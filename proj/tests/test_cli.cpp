// Drives the snapflow executable end to end through the shell.
#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "snapflow_test_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(SNAPFLOW_CLI) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write(const std::string& name, const nlohmann::json& doc) {
  const fs::path p = kRoot / name;
  std::ofstream(p) << doc.dump();
  return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

nlohmann::json tiny_train_config() {
  return {{"epsilon", 0.05},  {"warmup_steps", 3}, {"ot_period", 4},   {"lambda_fm", 1.0},
          {"lambda_ot", 0.1},  {"lambda_dyn", 0.1}, {"lambda_kl", 1e-3}, {"latent_dim", 2},
          {"vae_hidden", 8},   {"field_hidden", 8}, {"time_dim", 4},     {"batch_size", 8},
          {"top_k", 3},        {"vae_epochs", 3},   {"max_steps", 8},    {"checkpoint_every", 4}};
}

struct Workspace {
  fs::path data, split, config;
  Workspace() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const auto spec = write("spec.json", {{"kind", "drift-gaussian"}, {"gene_dim", 4}, {"timepoints", 6},
                                          {"cells_per_timepoint", 30}, {"seed", 3}});
    REQUIRE(run("synth --config " + q(spec) + " --out " + q(kRoot / "synth")) == 0);
    data = kRoot / "synth" / "data.csv";
    split = write("split.json", {{"interp", {2.0}}, {"extrap", {5.0}}});
    config = write("train.json", tiny_train_config());
  }
};

}  // namespace

TEST_CASE("usage errors exit with status 2") {
  Workspace ws;
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train --data " + q(ws.data)) == 2);
  const auto bad = write("bad_spec.json", {{"kind", "spiral"}});
  CHECK(run("synth --config " + q(bad) + " --out " + q(kRoot / "bad")) == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("train, evaluate and predict") {
  Workspace ws;
  const fs::path out = kRoot / "run";
  REQUIRE(run("train --config " + q(ws.config) + " --data " + q(ws.data) + " --split " + q(ws.split) + " --out " +
              q(out)) == 0);
  CHECK(fs::exists(out / "model.json"));
  CHECK(fs::exists(out / "train_log.csv"));
  CHECK(fs::exists(out / "checkpoints" / "step_4.json"));
  CHECK(fs::exists(out / "checkpoints" / "step_8.json"));
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(manifest.contains("seed"));
  CHECK(manifest.contains("config"));
  CHECK(manifest["rollouts"] == 2);

  const fs::path ev = kRoot / "eval";
  REQUIRE(run("evaluate --checkpoint " + q(out / "model.json") + " --data " + q(ws.data) + " --split " +
              q(ws.split) + " --out " + q(ev) + " --emit-projection") == 0);
  CHECK(fs::exists(ev / "report.csv"));
  CHECK(fs::exists(ev / "report.json"));
  CHECK(fs::exists(ev / "projection.csv"));

  const fs::path pr = kRoot / "pred";
  REQUIRE(run("predict --checkpoint " + q(out / "model.json") + " --times 0.0,4.5,11.0 --n 12 --out " + q(pr)) == 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(pr))
    if (e.path().filename().string().rfind("pred_t", 0) == 0) ++files;
  CHECK(files == 3);

  CHECK(run("predict --checkpoint " + q(out / "model.json") + " --times 1.0 --n 0 --out " + q(pr)) == 2);
  CHECK(run("predict --checkpoint " + q(out / "model.json") + " --times -1.0 --out " + q(pr)) != 0);
  CHECK(run("evaluate --checkpoint " + q(kRoot / "missing.json") + " --data " + q(ws.data) + " --split " +
            q(ws.split) + " --out " + q(ev)) == 1);
}

TEST_CASE("evaluate rejects a dataset with a different gene count") {
  Workspace ws;
  const fs::path out = kRoot / "run";
  REQUIRE(run("train --config " + q(ws.config) + " --data " + q(ws.data) + " --out " + q(out)) == 0);
  const auto spec = write("spec5.json", {{"kind", "drift-gaussian"}, {"gene_dim", 5}, {"timepoints", 6}, {"cells_per_timepoint", 10}});
  REQUIRE(run("synth --config " + q(spec) + " --out " + q(kRoot / "synth5")) == 0);
  CHECK(run("evaluate --checkpoint " + q(out / "model.json") + " --data " + q(kRoot / "synth5" / "data.csv") +
            " --split " + q(ws.split) + " --out " + q(kRoot / "eval5")) == 1);
  CHECK_FALSE(fs::exists(kRoot / "eval5" / "report.csv"));
}

TEST_CASE("identical invocations give identical artefacts") {
  Workspace ws;
  for (const char* name : {"a", "b"}) {
    const fs::path out = kRoot / name;
    REQUIRE(run("train --config " + q(ws.config) + " --data " + q(ws.data) + " --split " + q(ws.split) +
                " --out " + q(out / "train")) == 0);
    REQUIRE(run("evaluate --checkpoint " + q(out / "train" / "model.json") + " --data " + q(ws.data) +
                " --split " + q(ws.split) + " --out " + q(out / "eval")) == 0);
  }
  CHECK(slurp(kRoot / "a" / "train" / "train_log.csv") == slurp(kRoot / "b" / "train" / "train_log.csv"));
  CHECK(slurp(kRoot / "a" / "train" / "model.json") == slurp(kRoot / "b" / "train" / "model.json"));
  CHECK(slurp(kRoot / "a" / "eval" / "report.csv") == slurp(kRoot / "b" / "eval" / "report.csv"));
}
