#pragma once

// Time-conditioned latent velocity fields and fixed-step ODE integrators.

#include "snapflow/checkpoint.hpp"
#include "snapflow/nn.hpp"
#include "snapflow/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace snapflow {

// Sinusoidal features of a physical time. Times are mapped affinely so that
// [t_min, t_max] -> [0, 1] (values outside extrapolate the same map), then
// expanded as (sin(w_k s) ..., cos(w_k s) ...) with w_k spaced geometrically
// over [1, max_frequency] * pi.
class TimeEmbedding {
 public:
  TimeEmbedding() = default;
  TimeEmbedding(Index dim, double t_min, double t_max, double max_frequency = 1000.0);

  Index dim() const { return dim_; }
  double t_min() const { return t_min_; }
  double t_max() const { return t_max_; }
  double max_frequency() const { return max_frequency_; }
  const Vector& frequencies() const { return freq_; }

  double normalize(double t) const;
  RowVector operator()(double t) const;
  Matrix operator()(std::span<const double> times) const;

 private:
  Index dim_ = 0;
  double t_min_ = 0.0;
  double t_max_ = 1.0;
  double max_frequency_ = 1000.0;
  Vector freq_;
};

enum class Direction { Forward, Backward };

struct FieldArchitecture {
  Index latent_dim = 50;
  Index hidden = 256;
  Index time_dim = 64;
  double max_frequency = 1000.0;
};

// Residual MLP on concat(z, embed(t)):
//   h1 = tanh(W_in [z, e] + b_in)
//   h2 = h1 + tanh(W_blk h1 + b_blk)
//   v  = W_out h2 + b_out + S z
class VelocityField {
 public:
  VelocityField() = default;
  VelocityField(Direction direction, const FieldArchitecture& arch, const TimeEmbedding& embedding,
                Rng& init_rng);

  Direction direction() const { return direction_; }
  const FieldArchitecture& architecture() const { return arch_; }
  const TimeEmbedding& embedding() const { return embedding_; }
  Index latent_dim() const { return arch_.latent_dim; }

  Linear input;
  Linear block;
  Linear output;
  Linear skip;

  void register_parameters(ParameterSet& params, const std::string& prefix) const;
  std::vector<Tensor> parameters() const;

 private:
  Direction direction_ = Direction::Forward;
  FieldArchitecture arch_;
  TimeEmbedding embedding_;
};

// Velocity at a common time for every row of z.
Tensor eval_field(const VelocityField& field, double t, const Tensor& z);
// Velocity with one time per row of z.
Tensor eval_field(const VelocityField& field, std::span<const double> times, const Tensor& z);
// Velocity given precomputed per-row time features (rows x time_dim).
Tensor eval_field(const VelocityField& field, const Matrix& time_features, const Tensor& z);

enum class Integrator { Euler, Rk4 };

using FieldFn = std::function<Tensor(double, const Tensor&)>;

struct Rollout {
  std::vector<double> times;
  std::vector<Tensor> states;  // one per query time
  Integrator method = Integrator::Rk4;
  double step = 0.1;
  long field_evaluations = 0;
};

// Fixed-step integration from (t0, z0) through every query time. Queries
// must all lie on one side of t0 and be ordered away from it (ascending for
// forward-in-time, descending for backward). The last step of each segment is
// shortened so each query time is hit exactly. States stay differentiable
// with respect to anything z0 or the field depends on.
Rollout integrate(const FieldFn& field, const Tensor& z0, double t0, std::span<const double> query_times,
                  Integrator method, double step);

// Forward fields integrate toward later times, backward fields toward
// earlier times.
Rollout integrate(const VelocityField& field, const Tensor& z0, double t0, std::span<const double> query_times,
                  Integrator method = Integrator::Rk4, double step = 0.1);

}  // namespace snapflow
