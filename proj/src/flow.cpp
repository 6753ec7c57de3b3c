#include "snapflow/flow.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace snapflow {

TimeEmbedding::TimeEmbedding(Index dim, double t_min, double t_max, double max_frequency)
    : dim_(dim), t_min_(t_min), t_max_(t_max), max_frequency_(max_frequency) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("TimeEmbedding: dimension must be even and >= 2");
  if (!(t_max >= t_min)) throw std::invalid_argument("TimeEmbedding: t_max < t_min");
  if (!(max_frequency >= 1.0)) throw std::invalid_argument("TimeEmbedding: max_frequency must be >= 1");
  const Index half = dim / 2;
  freq_.resize(half);
  for (Index k = 0; k < half; ++k) {
    const double frac = half == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(half - 1);
    freq_(k) = std::numbers::pi * std::pow(max_frequency, frac);
  }
}

double TimeEmbedding::normalize(double t) const {
  const double span = t_max_ - t_min_;
  return span > 0.0 ? (t - t_min_) / span : t - t_min_;
}

RowVector TimeEmbedding::operator()(double t) const {
  const double s = normalize(t);
  const Index half = dim_ / 2;
  RowVector e(dim_);
  for (Index k = 0; k < half; ++k) {
    e(k) = std::sin(freq_(k) * s);
    e(half + k) = std::cos(freq_(k) * s);
  }
  return e;
}

Matrix TimeEmbedding::operator()(std::span<const double> times) const {
  Matrix out(static_cast<Index>(times.size()), dim_);
  for (std::size_t i = 0; i < times.size(); ++i) out.row(static_cast<Index>(i)) = (*this)(times[i]);
  return out;
}

VelocityField::VelocityField(Direction direction, const FieldArchitecture& arch, const TimeEmbedding& embedding,
                             Rng& init_rng)
    : direction_(direction), arch_(arch), embedding_(embedding) {
  if (embedding.dim() != arch.time_dim)
    throw std::invalid_argument("VelocityField: embedding dimension does not match architecture");
  input = Linear(arch.latent_dim + arch.time_dim, arch.hidden, init_rng);
  block = Linear(arch.hidden, arch.hidden, init_rng);
  output = Linear(arch.hidden, arch.latent_dim, init_rng, 0.1);
  skip = Linear(arch.latent_dim, arch.latent_dim, init_rng, 0.0, false);
}

void VelocityField::register_parameters(ParameterSet& params, const std::string& prefix) const {
  input.register_parameters(params, prefix + ".input");
  block.register_parameters(params, prefix + ".block");
  output.register_parameters(params, prefix + ".output");
  skip.register_parameters(params, prefix + ".skip");
}

std::vector<Tensor> VelocityField::parameters() const {
  ParameterSet p;
  register_parameters(p, "field");
  return p.tensors();
}

Tensor eval_field(const VelocityField& field, const Matrix& time_features, const Tensor& z) {
  if (z.cols() != field.latent_dim()) throw ShapeError("eval_field", z.rows(), z.cols(), z.rows(), field.latent_dim());
  if (time_features.rows() != z.rows() || time_features.cols() != field.embedding().dim())
    throw ShapeError("eval_field time features", time_features.rows(), time_features.cols(), z.rows(),
                     field.embedding().dim());
  Tensor h1 = tanh(field.input(concat_cols(z, Tensor::constant(time_features))));
  Tensor h2 = add(h1, tanh(field.block(h1)));
  return add(field.output(h2), field.skip(z));
}

Tensor eval_field(const VelocityField& field, double t, const Tensor& z) {
  const RowVector e = field.embedding()(t);
  return eval_field(field, Matrix(e.replicate(z.rows(), 1)), z);
}

Tensor eval_field(const VelocityField& field, std::span<const double> times, const Tensor& z) {
  if (static_cast<Index>(times.size()) != z.rows())
    throw ShapeError("eval_field times", static_cast<Index>(times.size()), 1, z.rows(), z.cols());
  return eval_field(field, field.embedding()(times), z);
}

namespace {

Tensor step_state(const FieldFn& field, Integrator method, double t, double h, const Tensor& z, long& evals) {
  if (method == Integrator::Euler) {
    ++evals;
    return add(z, scale(field(t, z), h));
  }
  evals += 4;
  Tensor k1 = field(t, z);
  Tensor k2 = field(t + 0.5 * h, add(z, scale(k1, 0.5 * h)));
  Tensor k3 = field(t + 0.5 * h, add(z, scale(k2, 0.5 * h)));
  Tensor k4 = field(t + h, add(z, scale(k3, h)));
  Tensor incr = add(add(k1, scale(add(k2, k3), 2.0)), k4);
  return add(z, scale(incr, h / 6.0));
}

}  // namespace

Rollout integrate(const FieldFn& field, const Tensor& z0, double t0, std::span<const double> query_times,
                  Integrator method, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("integrate: step must be positive");
  double sign = 0.0;
  double prev = t0;
  for (double q : query_times) {
    const double d = q - prev;
    if (d != 0.0) {
      const double s = d > 0.0 ? 1.0 : -1.0;
      if (sign != 0.0 && s != sign)
        throw std::invalid_argument("integrate: query times must be sorted away from t0");
      sign = s;
    }
    prev = q;
  }

  Rollout out;
  out.method = method;
  out.step = step;
  Tensor z = z0;
  double t = t0;
  for (double target : query_times) {
    while (t != target) {
      const double remaining = target - t;
      double h = sign * step;
      // Absorb a sliver remainder into the current step.
      if (std::abs(remaining) <= step * (1.0 + 1e-9)) h = remaining;
      z = step_state(field, method, t, h, z, out.field_evaluations);
      t = (h == remaining) ? target : t + h;
      if (!z.value().allFinite()) {
        std::ostringstream os;
        os << "integrate: non-finite state at t=" << t;
        throw std::runtime_error(os.str());
      }
    }
    out.times.push_back(target);
    out.states.push_back(z);
  }
  return out;
}

Rollout integrate(const VelocityField& field, const Tensor& z0, double t0, std::span<const double> query_times,
                  Integrator method, double step) {
  for (double q : query_times) {
    if (field.direction() == Direction::Forward && q < t0)
      throw std::invalid_argument("integrate: forward field queried before t0");
    if (field.direction() == Direction::Backward && q > t0)
      throw std::invalid_argument("integrate: backward field queried after t0");
  }
  const FieldFn fn = [&field](double t, const Tensor& z) { return eval_field(field, t, z); };
  return integrate(fn, z0, t0, query_times, method, step);
}

}  // namespace snapflow
