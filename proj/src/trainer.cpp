#include "snapflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace snapflow {

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("TrainConfig: ") + what);
  };
  require(epsilon > 0.0, "epsilon must be > 0");
  require(warmup_steps >= 0, "warmup_steps must be >= 0");
  require(ot_period >= 1, "ot_period must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(top_k >= 1 && top_k <= batch_size, "top_k must lie in [1, batch_size]");
  require(lambda_fm >= 0.0 && lambda_ot >= 0.0 && lambda_dyn >= 0.0 && lambda_kl >= 0.0,
          "loss weights must be >= 0");
  require(alpha_samples >= 1, "alpha_samples must be >= 1");
  require(latent_dim >= 1 && vae_hidden >= 1 && field_hidden >= 1, "dimensions must be positive");
  require(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even and >= 2");
  require(rk4_step > 0.0 && blur > 0.0, "rk4_step and blur must be > 0");
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(max_steps >= 0 && vae_epochs >= 0, "step counts must be >= 0");
  require(convergence_window >= 1 && patience >= 1, "convergence_window and patience must be >= 1");
}

namespace {

#define SNAPFLOW_CONFIG_FIELDS(X)                                                                     \
  X(latent_dim) X(vae_hidden) X(field_hidden) X(time_dim) X(time_max_frequency) X(epsilon)           \
  X(normalize_cost)                                                                             \
  X(sinkhorn_max_iters) X(sinkhorn_tol) X(warmup_steps) X(top_k) X(batch_size) X(alpha_samples)      \
  X(ot_period) X(global_batch_size) X(rk4_step) X(blur) X(scaling) X(global_sinkhorn_iters)          \
  X(lambda_fm) X(lambda_ot) X(lambda_dyn) X(lambda_kl) X(learning_rate) X(vae_epochs) X(vae_patience) \
  X(max_steps) X(convergence_window) X(patience) X(convergence_tol) X(freeze_vae) X(checkpoint_every) \
  X(log_wall_time) X(seed)

const char* const kRequiredKeys[] = {"epsilon",   "warmup_steps", "ot_period", "lambda_fm",
                                     "lambda_ot", "lambda_dyn",   "lambda_kl"};

// Draws `count` row indices from [0, n): without replacement when n >= count.
std::vector<Index> sample_rows(Index n, Index count, Rng& rng) {
  std::vector<Index> out(static_cast<std::size_t>(count));
  if (n >= count) {
    std::vector<Index> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index i = 0; i < count; ++i) {
      std::uniform_int_distribution<Index> pick(i, n - 1);
      std::swap(pool[i], pool[pick(rng)]);
      out[i] = pool[i];
    }
  } else {
    std::uniform_int_distribution<Index> pick(0, n - 1);
    for (auto& v : out) v = pick(rng);
  }
  return out;
}

Matrix take_rows(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

// Detached field evaluation for coupling costs.
auto frozen(const VelocityField& field) {
  return [&field](double t, const Matrix& z) { return Matrix(eval_field(field, t, Tensor::constant(z)).value()); };
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const char* key : kRequiredKeys)
    if (!doc.contains(key)) throw std::invalid_argument(std::string("config: missing required key '") + key + "'");
  std::set<std::string> known;
#define SNAPFLOW_KNOWN(name) known.insert(#name);
  SNAPFLOW_CONFIG_FIELDS(SNAPFLOW_KNOWN)
#undef SNAPFLOW_KNOWN
  for (const auto& [key, value] : doc.items())
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");

  TrainConfig c;
#define SNAPFLOW_READ(name)                                                                      \
  if (doc.contains(#name)) {                                                                     \
    try {                                                                                        \
      c.name = doc.at(#name).get<decltype(c.name)>();                                            \
    } catch (const nlohmann::json::exception&) {                                                 \
      throw std::invalid_argument("config: key '" #name "' has the wrong type");                 \
    }                                                                                            \
  }
  SNAPFLOW_CONFIG_FIELDS(SNAPFLOW_READ)
#undef SNAPFLOW_READ
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json doc;
#define SNAPFLOW_WRITE(name) doc[#name] = c.name;
  SNAPFLOW_CONFIG_FIELDS(SNAPFLOW_WRITE)
#undef SNAPFLOW_WRITE
  return doc;
}

// --- model -----------------------------------------------------------------

ParameterSet Model::parameters() const {
  ParameterSet p;
  vae.register_parameters(p, "vae");
  forward.register_parameters(p, "field.forward");
  backward.register_parameters(p, "field.backward");
  return p;
}

Model init_model(const SnapshotDataset& train, const TrainConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  m.train_times = train.times();
  m.source_cells = train.cells(0);
  Rng init(config.seed);
  VaeArchitecture va;
  va.gene_dim = train.gene_dim();
  va.latent_dim = config.latent_dim;
  va.hidden = config.vae_hidden;
  m.vae = Vae(va, init);
  FieldArchitecture fa;
  fa.latent_dim = config.latent_dim;
  fa.hidden = config.field_hidden;
  fa.time_dim = config.time_dim;
  fa.max_frequency = config.time_max_frequency;
  const TimeEmbedding emb(config.time_dim, m.train_times.front(), m.train_times.back(), config.time_max_frequency);
  m.forward = VelocityField(Direction::Forward, fa, emb, init);
  m.backward = VelocityField(Direction::Backward, fa, emb, init);
  return m;
}

nlohmann::json model_to_json(const Model& model) {
  nlohmann::json doc = params_to_json(model.parameters());
  doc["config"] = to_json(model.config);
  doc["gene_dim"] = model.vae.gene_dim();
  doc["train_times"] = model.train_times;
  doc["time_normalization"] = {model.forward.embedding().t_min(), model.forward.embedding().t_max()};
  const Matrix& s = model.source_cells;
  doc["source_cells"] = {{"shape", {s.rows(), s.cols()}},
                         {"values", std::vector<double>(s.data(), s.data() + s.size())}};
  return doc;
}

Model model_from_json(const nlohmann::json& doc) {
  TrainConfig config = train_config_from_json(doc.at("config"));
  const auto times = doc.at("train_times").get<std::vector<double>>();
  const auto shape = doc.at("source_cells").at("shape").get<std::vector<Index>>();
  const auto values = doc.at("source_cells").at("values").get<std::vector<double>>();
  if (shape.size() != 2 || static_cast<Index>(values.size()) != shape[0] * shape[1] || times.size() < 2)
    throw std::runtime_error("checkpoint: malformed source_cells or train_times");
  Matrix source = Eigen::Map<const Matrix>(values.data(), shape[0], shape[1]);
  // Rebuild the architecture on a stand-in dataset, then overwrite weights.
  std::vector<Matrix> cells(times.size(), source);
  SnapshotDataset stub(times, std::move(cells));
  Model m = init_model(stub, config);
  params_from_json(m.parameters(), doc);
  m.source_cells = std::move(source);
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) { write_json_atomic(path, model_to_json(model)); }

Model load_model(const std::filesystem::path& path) { return model_from_json(read_json(path)); }

// --- losses ----------------------------------------------------------------

FmLoss fm_loss_topk(const TopKCoupling& coupling, const Matrix& za, const Matrix& zb, double ta, double tb,
                    const VelocityField& forward, const VelocityField& backward, std::span<const double> alphas,
                    int alpha_samples) {
  if (!(tb > ta)) throw std::invalid_argument("fm_loss_topk: requires t_b > t_a");
  if (za.cols() != zb.cols()) throw ShapeError("fm_loss_topk", za.rows(), za.cols(), zb.rows(), zb.cols());
  if (coupling.rows != za.rows() || coupling.cols != zb.rows())
    throw ShapeError("fm_loss_topk coupling", coupling.rows, coupling.cols, za.rows(), zb.rows());
  if (!(coupling.retained_mass > 0.0)) throw std::invalid_argument("fm_loss_topk: degenerate coupling (m = 0)");
  const std::size_t pairs = coupling.pair_count();
  const auto samples = static_cast<std::size_t>(alpha_samples);
  if (alphas.size() != pairs * samples)
    throw std::invalid_argument("fm_loss_topk: expected " + std::to_string(pairs * samples) + " alpha draws");

  const Index rows = static_cast<Index>(pairs * samples);
  const double dt = tb - ta;
  Matrix z_alpha(rows, za.cols());
  Matrix target(rows, za.cols());
  Matrix target_back(rows, za.cols());
  std::vector<double> t_alpha(static_cast<std::size_t>(rows));
  Vector weight(rows);
  const double norm = 1.0 / (coupling.retained_mass * static_cast<double>(samples));
  for (std::size_t p = 0; p < pairs; ++p) {
    const Index i = coupling.row_index[p], j = coupling.col_index[p];
    for (std::size_t s = 0; s < samples; ++s) {
      const auto r = static_cast<Index>(p * samples + s);
      const double a = alphas[p * samples + s];
      t_alpha[r] = (1.0 - a) * ta + a * tb;
      z_alpha.row(r) = (1.0 - a) * za.row(i) + a * zb.row(j);
      target.row(r) = (zb.row(j) - za.row(i)) / dt;
      target_back.row(r) = (za.row(i) - zb.row(j)) / (ta - tb);
      weight(r) = coupling.weight[p] * norm;
    }
  }
  const Tensor z = Tensor::constant(std::move(z_alpha));
  auto term = [&](const VelocityField& field, Matrix u) {
    const Matrix features = field.embedding()(t_alpha);
    Tensor residual = sub(eval_field(field, features, z), Tensor::constant(std::move(u)));
    return sum(scale_rows(row_sum(square(residual)), weight));
  };
  FmLoss out;
  out.forward = term(forward, std::move(target));
  out.backward = term(backward, std::move(target_back));
  out.total = add(out.forward, out.backward);
  return out;
}

FmLoss fm_loss_topk(const TopKCoupling& coupling, const Matrix& za, const Matrix& zb, double ta, double tb,
                    const VelocityField& forward, const VelocityField& backward, Rng& rng, int alpha_samples) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> alphas(coupling.pair_count() * static_cast<std::size_t>(alpha_samples));
  for (auto& a : alphas) a = unif(rng);
  return fm_loss_topk(coupling, za, zb, ta, tb, forward, backward, alphas, alpha_samples);
}

GlobalLosses global_losses(const Model& model, const SnapshotDataset& train, Index batch, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("global_losses: batch must be >= 1");
  for (std::size_t k = 0; k < train.timepoint_count(); ++k)
    if (train.cells(k).rows() == 0) throw std::invalid_argument("global_losses: empty timepoint");
  const auto& cfg = model.config;
  OtDistanceOptions ot;
  ot.blur = cfg.blur;
  ot.scaling = cfg.scaling;
  ot.debiased = true;
  ot.sinkhorn.max_iters = cfg.global_sinkhorn_iters;

  const auto src_idx = sample_rows(train.cells(0).rows(), batch, rng);
  const Tensor x0 = Tensor::constant(take_rows(train.cells(0), src_idx));
  const Encoding enc0 = encode(model.vae, x0, rng);
  const std::vector<double>& times = train.times();
  const Rollout roll = integrate(model.forward, enc0.z, times.front(), times, Integrator::Rk4, cfg.rk4_step);

  GlobalLosses out;
  Tensor ot_sum = Tensor::scalar(0.0), dyn_sum = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < times.size(); ++k) {
    Tensor observed = x0;
    Tensor enc_latents = enc0.z;
    if (k > 0) {
      const auto idx = sample_rows(train.cells(k).rows(), batch, rng);
      observed = Tensor::constant(take_rows(train.cells(k), idx));
      enc_latents = encode(model.vae, observed, rng).z;
    }
    const Tensor& z_ode = roll.states[k];
    Tensor ot_k = sinkhorn_loss(observed, decode(model.vae, z_ode), ot);
    Tensor dyn_k = sinkhorn_loss(enc_latents, z_ode, ot);
    out.ot_terms.push_back(ot_k.item());
    out.dyn_terms.push_back(dyn_k.item());
    ot_sum = add(ot_sum, ot_k);
    dyn_sum = add(dyn_sum, dyn_k);
  }
  const double inv = 1.0 / static_cast<double>(times.size());
  out.ot = scale(ot_sum, inv);
  out.dyn = scale(dyn_sum, inv);
  return out;
}

Tensor global_ot_loss(const Model& model, const SnapshotDataset& train, Index batch, Rng& rng) {
  return global_losses(model, train, batch, rng).ot;
}

Tensor latent_dyn_loss(const Model& model, const SnapshotDataset& train, Index batch, Rng& rng) {
  return global_losses(model, train, batch, rng).dyn;
}

// --- training loop ---------------------------------------------------------

const char* phase_name(Phase phase) { return phase == Phase::Warmup ? "warmup" : "fused"; }

NonFiniteLoss::NonFiniteLoss(const StepRecord& r)
    : std::runtime_error([&] {
        std::ostringstream os;
        os << "non-finite loss at step " << r.step << " (phase " << phase_name(r.phase) << ", l_vae=" << r.l_vae
           << ", l_fm=" << r.l_fm << ", l_ot=" << (r.l_ot ? *r.l_ot : 0.0)
           << ", l_dyn=" << (r.l_dyn ? *r.l_dyn : 0.0) << ")";
        return os.str();
      }()),
      record_(r) {}

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path, bool wall_time) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "step,phase,l_vae,l_fm,l_ot,l_dyn,total,retained_mass,seconds\n";
  for (const auto& r : log.steps) {
    out << r.step << ',' << phase_name(r.phase) << ',' << r.l_vae << ',' << r.l_fm << ',';
    if (r.l_ot) out << *r.l_ot;
    out << ',';
    if (r.l_dyn) out << *r.l_dyn;
    out << ',' << r.total << ',' << r.retained_mass << ',';
    if (wall_time) out << r.seconds;
    out << '\n';
  }
}

Trainer::Trainer(Model& model, const SnapshotDataset& train, TrainConfig config)
    : model_(model), train_(train), config_(std::move(config)) {
  config_.validate();
  if (train.timepoint_count() < 2) throw std::invalid_argument("Trainer: need at least two training timepoints");
  if (train.gene_dim() != model.vae.gene_dim())
    throw ShapeError("Trainer dataset/model genes", train.gene_dim(), 1, model.vae.gene_dim(), 1);
  std::seed_seq seq{config_.seed, std::uint64_t{0x5eed}};
  rng_.seed(seq);
}

std::vector<double> Trainer::pretrain_vae() {
  std::vector<double> losses;
  if (config_.vae_epochs == 0) return losses;
  const Matrix all = train_.concatenated();
  const Index n = all.rows();
  Adam opt(model_.vae.parameters(), {.learning_rate = config_.learning_rate});
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  long stale = 0;
  for (long epoch = 0; epoch < config_.vae_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng_);
    double acc = 0.0;
    long batches = 0;
    for (Index start = 0; start < n; start += config_.batch_size) {
      const Index count = std::min(config_.batch_size, n - start);
      const Tensor x = Tensor::constant(take_rows(all, std::span(order).subspan(start, count)));
      VaeLoss loss = vae_loss(model_.vae, x, config_.lambda_kl, rng_);
      acc += loss.total.item();
      ++batches;
      backward(loss.total);
      opt.step();
    }
    const double mean = acc / static_cast<double>(batches);
    if (!std::isfinite(mean)) throw std::runtime_error("Phase I: non-finite VAE loss at epoch " + std::to_string(epoch));
    losses.push_back(mean);
    if (mean < best * (1.0 - config_.convergence_tol)) {
      best = mean;
      stale = 0;
    } else if (++stale >= config_.vae_patience) {
      break;
    }
  }
  return losses;
}

std::vector<Tensor> Trainer::phase_two_parameters() const {
  const ParameterSet p = model_.parameters();
  return config_.freeze_vae ? p.tensors("field.") : p.tensors();
}

StepRecord Trainer::train_step(long step) {
  if (!optimizer_) optimizer_.emplace(phase_two_parameters(), AdamConfig{.learning_rate = config_.learning_rate});
  const auto t_start = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = step;
  rec.phase = phase_for(step);

  std::uniform_int_distribution<std::size_t> pick_interval(0, train_.timepoint_count() - 2);
  rec.interval = pick_interval(rng_);
  const double ta = train_.time(rec.interval), tb = train_.time(rec.interval + 1);
  const Matrix& cells_a = train_.cells(rec.interval);
  const Matrix& cells_b = train_.cells(rec.interval + 1);
  const Index batch = config_.batch_size;
  const auto ia = sample_rows(cells_a.rows(), batch, rng_);
  const auto ib = sample_rows(cells_b.rows(), batch, rng_);
  Matrix xab(2 * batch, cells_a.cols());
  xab << take_rows(cells_a, ia), take_rows(cells_b, ib);
  const Tensor x = Tensor::constant(std::move(xab));

  const Encoding enc = encode(model_.vae, x, rng_);
  const VaeLoss lvae = vae_loss(model_.vae, x, enc, config_.lambda_kl);
  const Matrix za = enc.z.value().topRows(batch);
  const Matrix zb = enc.z.value().bottomRows(batch);

  CostMatrix<double> cost =
      rec.phase == Phase::Warmup
          ? cost_euclidean(za, zb)
          : cost_bidirectional(za, zb, frozen(model_.forward), frozen(model_.backward), ta, tb);
  if (config_.normalize_cost) {
    const double top = cost.entries.maxCoeff();
    if (top > 0.0) cost.entries /= top;
  }
  const auto u = uniform_marginal<double>(batch);
  const auto pi = sinkhorn(cost, u, u, config_.epsilon,
                           SinkhornOptions{.max_iters = config_.sinkhorn_max_iters, .tol = config_.sinkhorn_tol});
  const TopKCoupling topk = topk_truncate(pi, config_.top_k);
  rec.retained_mass = topk.retained_mass;
  const FmLoss fm = fm_loss_topk(topk, za, zb, ta, tb, model_.forward, model_.backward, rng_, config_.alpha_samples);

  Tensor total = add(lvae.total, scale(fm.total, config_.lambda_fm));
  if (global_step(step) && (config_.lambda_ot > 0.0 || config_.lambda_dyn > 0.0)) {
    const GlobalLosses g = global_losses(model_, train_, config_.global_batch(), rng_);
    ++rollouts_;
    rec.l_ot = g.ot.item();
    rec.l_dyn = g.dyn.item();
    total = add(total, add(scale(g.ot, config_.lambda_ot), scale(g.dyn, config_.lambda_dyn)));
  }
  rec.l_vae = lvae.total.item();
  rec.l_fm = fm.total.item();
  rec.total = total.item();
  if (!std::isfinite(rec.total)) throw NonFiniteLoss(rec);

  backward(total);
  if (config_.freeze_vae)
    for (auto& p : model_.vae.parameters()) p.zero_grad();
  optimizer_->step();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rec;
}

FitResult fit(const SnapshotDataset& train, const TrainConfig& config, const CheckpointFn& on_checkpoint) {
  if (train.timepoint_count() < 2) throw std::invalid_argument("fit: need at least two training timepoints");
  FitResult result{init_model(train, config), {}};
  Trainer trainer(result.model, train, config);
  result.log.vae_epoch_losses = trainer.pretrain_vae();

  double window_acc = 0.0;
  double best = std::numeric_limits<double>::infinity();
  long stale = 0;
  for (long s = 1; s <= config.max_steps; ++s) {
    result.log.steps.push_back(trainer.train_step(s));
    window_acc += result.log.steps.back().total;
    if (config.checkpoint_every > 0 && on_checkpoint && s % config.checkpoint_every == 0)
      on_checkpoint(result.model, s);
    if (s % config.convergence_window == 0) {
      const double mean = window_acc / static_cast<double>(config.convergence_window);
      window_acc = 0.0;
      if (mean < best * (1.0 - config.convergence_tol)) {
        best = mean;
        stale = 0;
      } else if (++stale >= config.patience) {
        result.log.converged = true;
        break;
      }
    }
  }
  result.log.rollouts = trainer.rollouts();
  return result;
}

}  // namespace snapflow
