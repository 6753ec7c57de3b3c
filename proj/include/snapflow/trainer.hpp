#pragma once

// Two-phase training of the latent flow model.
//
// Phase I fits the VAE on every training cell. Phase II repeatedly picks an
// adjacent pair of training times, couples encoded minibatches by entropic
// OT (squared-Euclidean cost during warmup, the bidirectional fused cost
// afterwards), regresses both velocity fields onto linear-bridge velocities
// of the K heaviest pairs per row, and every `ot_period` steps anchors full
// rollouts from t_0 against every training snapshot.

#include "snapflow/adam.hpp"
#include "snapflow/checkpoint.hpp"
#include "snapflow/data.hpp"
#include "snapflow/flow.hpp"
#include "snapflow/ot.hpp"
#include "snapflow/vae.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace snapflow {

struct TrainConfig {
  // Model shape.
  Index latent_dim = 50;
  Index vae_hidden = 256;
  Index field_hidden = 256;
  Index time_dim = 64;
  double time_max_frequency = 1000.0;

  // Local coupling and flow matching.
  double epsilon = 0.05;
  bool normalize_cost = true;  // divide the minibatch cost by its max before Sinkhorn
  int sinkhorn_max_iters = 500;
  double sinkhorn_tol = 1e-6;
  long warmup_steps = 200;
  Index top_k = 5;
  Index batch_size = 128;
  int alpha_samples = 1;

  // Global anchoring.
  long ot_period = 10;
  Index global_batch_size = 0;  // 0: use batch_size
  double rk4_step = 0.1;
  double blur = 0.05;
  double scaling = 0.5;
  int global_sinkhorn_iters = 100;

  double lambda_fm = 1.0;
  double lambda_ot = 0.1;
  double lambda_dyn = 0.1;
  double lambda_kl = 1e-3;

  double learning_rate = 1e-3;
  long vae_epochs = 500;
  long vae_patience = 20;  // epochs without improvement before stopping Phase I
  long max_steps = 3000;
  long convergence_window = 100;
  long patience = 5;  // windows without relative improvement >= convergence_tol
  double convergence_tol = 1e-4;
  bool freeze_vae = false;
  long checkpoint_every = 0;
  bool log_wall_time = false;
  std::uint64_t seed = 0;

  void validate() const;
  Index global_batch() const { return global_batch_size > 0 ? global_batch_size : batch_size; }
};

// Keys epsilon, warmup_steps, ot_period and the four loss weights are
// required; every other key is optional. Unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const TrainConfig& config);

// Everything needed to generate populations: VAE, both fields, the source
// snapshot at t_0 and the training time grid.
struct Model {
  TrainConfig config;
  Vae vae;
  VelocityField forward;
  VelocityField backward;
  std::vector<double> train_times;
  Matrix source_cells;

  double t0() const { return train_times.front(); }
  ParameterSet parameters() const;  // "vae.*", "field.forward.*", "field.backward.*"
};

Model init_model(const SnapshotDataset& train, const TrainConfig& config);

nlohmann::json model_to_json(const Model& model);
Model model_from_json(const nlohmann::json& doc);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

struct FmLoss {
  Tensor forward;
  Tensor backward;
  Tensor total;
};

// Top-K weighted flow matching. `alphas` holds alpha_samples draws per
// retained pair, pair-major in TopKCoupling order. Latents enter as
// constants; gradients reach only the field parameters.
FmLoss fm_loss_topk(const TopKCoupling& coupling, const Matrix& za, const Matrix& zb, double ta, double tb,
                    const VelocityField& forward, const VelocityField& backward, std::span<const double> alphas,
                    int alpha_samples = 1);
FmLoss fm_loss_topk(const TopKCoupling& coupling, const Matrix& za, const Matrix& zb, double ta, double tb,
                    const VelocityField& forward, const VelocityField& backward, Rng& rng, int alpha_samples = 1);

struct GlobalLosses {
  Tensor ot;   // gene space, averaged over training times
  Tensor dyn;  // latent space, averaged over training times
  std::vector<double> ot_terms;
  std::vector<double> dyn_terms;
};

// Encodes a batch from t_0, rolls the forward field through every training
// time with RK4, and compares against observed batches: decoded cells in gene
// space (ot) and encoder latents in latent space (dyn). The k = 0 comparison
// uses the source batch itself.
GlobalLosses global_losses(const Model& model, const SnapshotDataset& train, Index batch, Rng& rng);
Tensor global_ot_loss(const Model& model, const SnapshotDataset& train, Index batch, Rng& rng);
Tensor latent_dyn_loss(const Model& model, const SnapshotDataset& train, Index batch, Rng& rng);

enum class Phase { Warmup, Fused };
const char* phase_name(Phase phase);

struct StepRecord {
  long step = 0;
  Phase phase = Phase::Warmup;
  std::size_t interval = 0;
  double l_vae = 0.0;
  double l_fm = 0.0;
  std::optional<double> l_ot;
  std::optional<double> l_dyn;
  double total = 0.0;
  double retained_mass = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<double> vae_epoch_losses;
  std::vector<StepRecord> steps;
  bool converged = false;
  long rollouts = 0;  // long-horizon rollouts performed by global losses
};

// Columns: step, phase, l_vae, l_fm, l_ot, l_dyn, total, retained_mass,
// seconds. Absent global terms and unrecorded wall time are empty fields.
void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path, bool wall_time);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const StepRecord& record);
  const StepRecord& record() const { return record_; }

 private:
  StepRecord record_;
};

class Trainer {
 public:
  Trainer(Model& model, const SnapshotDataset& train, TrainConfig config);

  // Phase I. Returns the mean loss of each epoch run.
  std::vector<double> pretrain_vae();
  // One Phase II step; `step` is 1-based.
  StepRecord train_step(long step);

  Phase phase_for(long step) const { return step <= config_.warmup_steps ? Phase::Warmup : Phase::Fused; }
  bool global_step(long step) const { return step % config_.ot_period == 0; }
  long rollouts() const { return rollouts_; }

 private:
  std::vector<Tensor> phase_two_parameters() const;

  Model& model_;
  const SnapshotDataset& train_;
  TrainConfig config_;
  Rng rng_;
  std::optional<Adam> optimizer_;
  long rollouts_ = 0;
};

struct FitResult {
  Model model;
  TrainLog log;
};

using CheckpointFn = std::function<void(const Model&, long step)>;

FitResult fit(const SnapshotDataset& train, const TrainConfig& config, const CheckpointFn& on_checkpoint = {});

}  // namespace snapflow
