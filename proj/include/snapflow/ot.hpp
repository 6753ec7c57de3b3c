#pragma once

// Entropic optimal transport between point clouds.
//
// Dense routines are templated on the scalar type and accept any Eigen
// expression; the Tensor overloads at the bottom wrap them with
// envelope-style gradients (the plan is held constant, gradients flow into
// the cost entries only).

#include "snapflow/tensor.hpp"
#include "snapflow/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace snapflow {

enum class CostKind { Euclidean, BidirectionalFused, GeneSpace, LatentSpace };

template <typename Scalar>
struct CostMatrix {
  MatrixX<Scalar> entries;
  CostKind kind = CostKind::Euclidean;

  Index rows() const { return entries.rows(); }
  Index cols() const { return entries.cols(); }
};

// C_ij = ||a_i - b_j||^2, via the Gram expansion.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> pairwise_sq_dist(const Eigen::MatrixBase<DerivedA>& a,
                                                    const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.cols()) throw ShapeError("pairwise_sq_dist", a.rows(), a.cols(), b.rows(), b.cols());
  MatrixX<Scalar> out = Scalar(-2) * (a * b.transpose());
  out.colwise() += a.rowwise().squaredNorm();
  out.rowwise() += b.rowwise().squaredNorm().transpose();
  return out.cwiseMax(Scalar(0));
}

template <typename DerivedA, typename DerivedB>
CostMatrix<typename DerivedA::Scalar> cost_euclidean(const Eigen::MatrixBase<DerivedA>& za,
                                                     const Eigen::MatrixBase<DerivedB>& zb,
                                                     CostKind kind = CostKind::Euclidean) {
  if (za.cols() != zb.cols()) throw ShapeError("cost_euclidean", za.rows(), za.cols(), zb.rows(), zb.cols());
  return {pairwise_sq_dist(za, zb), kind};
}

// z + field(t_from, z) * dt. `field` maps (t, batch) to a same-shape batch.
template <typename Field, typename Derived>
MatrixX<typename Derived::Scalar> euler_one_step(const Field& field, typename Derived::Scalar t_from,
                                                 const Eigen::MatrixBase<Derived>& z,
                                                 typename Derived::Scalar dt) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> zz = z;
  MatrixX<Scalar> v = field(t_from, zz);
  if (v.rows() != zz.rows() || v.cols() != zz.cols())
    throw ShapeError("euler_one_step", zz.rows(), zz.cols(), v.rows(), v.cols());
  return zz + v * dt;
}

// 1/2 ||za_i + vf(ta, za_i) dt - zb_j||^2 + 1/2 ||za_i - (zb_j + vb(tb, zb_j)(ta - tb))||^2
template <typename ForwardField, typename BackwardField, typename DerivedA, typename DerivedB>
CostMatrix<typename DerivedA::Scalar> cost_bidirectional(const Eigen::MatrixBase<DerivedA>& za,
                                                         const Eigen::MatrixBase<DerivedB>& zb,
                                                         const ForwardField& forward,
                                                         const BackwardField& backward,
                                                         typename DerivedA::Scalar ta,
                                                         typename DerivedA::Scalar tb) {
  using Scalar = typename DerivedA::Scalar;
  if (!(tb > ta)) throw std::invalid_argument("cost_bidirectional: requires t_b > t_a");
  if (za.cols() != zb.cols()) throw ShapeError("cost_bidirectional", za.rows(), za.cols(), zb.rows(), zb.cols());
  const MatrixX<Scalar> pred_b = euler_one_step(forward, ta, za, tb - ta);
  const MatrixX<Scalar> pred_a = euler_one_step(backward, tb, zb, ta - tb);
  MatrixX<Scalar> c = Scalar(0.5) * pairwise_sq_dist(pred_b, zb) + Scalar(0.5) * pairwise_sq_dist(za, pred_a);
  return {std::move(c), CostKind::BidirectionalFused};
}

template <typename Scalar>
struct Coupling {
  MatrixX<Scalar> plan;
  VectorX<Scalar> row_marginal;
  VectorX<Scalar> col_marginal;
  Scalar epsilon = 0;
  // Dual potentials of the final iterate.
  VectorX<Scalar> f;
  VectorX<Scalar> g;
  bool converged = false;
  int iterations = 0;
  Scalar marginal_error = 0;
};

struct SinkhornOptions {
  int max_iters = 500;
  double tol = 1e-6;
  int stage_iters = 100;  // sweeps per annealing stage
};

template <typename Scalar>
VectorX<Scalar> uniform_marginal(Index n) {
  return VectorX<Scalar>::Constant(n, Scalar(1) / static_cast<Scalar>(n));
}

namespace detail {

// out_i = -eps * log sum_j exp(log_w_j + (pot_j - C_ij) / eps), for rows of C.
template <typename Scalar>
void softmin_rows(const MatrixX<Scalar>& c, const VectorX<Scalar>& log_w, const VectorX<Scalar>& pot,
                  Scalar eps, VectorX<Scalar>& out) {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  const Scalar inv = Scalar(1) / eps;
  const Array base = log_w.array() + pot.array() * inv;
  Array tmp(c.cols());
  out.resize(c.rows());
  for (Index i = 0; i < c.rows(); ++i) {
    tmp = base - c.row(i).transpose().array() * inv;
    const Scalar hi = tmp.maxCoeff();
    // exp below ~-708 goes subnormal and is very slow; those terms are negligible anyway.
    out(i) = -eps * (hi + std::log((tmp - hi).max(Scalar(-700)).exp().sum()));
  }
}

template <typename Scalar>
void validate_marginal(const VectorX<Scalar>& w, Index n, const char* which) {
  if (w.size() != n) throw ShapeError(std::string("sinkhorn ") + which + " marginal", w.size(), 1, n, 1);
  if ((w.array() <= Scalar(0)).any() || !w.allFinite())
    throw std::invalid_argument(std::string("sinkhorn: ") + which + " marginal must be positive");
  if (std::abs(w.sum() - Scalar(1)) > Scalar(1e-9))
    throw std::invalid_argument(std::string("sinkhorn: ") + which + " marginal must sum to 1");
}

}  // namespace detail

// Log-domain Sinkhorn for  min <P, C> + eps * sum P (log P - 1)  over
// couplings of (a, b). `epsilon_schedule` optionally lists larger
// regularisations, each run for up to `stage_iters` sweeps to warm-start the
// potentials, before the iterations at `epsilon`. Stops once every row marginal is within `tol`
// (columns are exact after each sweep).
template <typename Derived>
Coupling<typename Derived::Scalar> sinkhorn(const Eigen::MatrixBase<Derived>& cost,
                                            const VectorX<typename Derived::Scalar>& a,
                                            const VectorX<typename Derived::Scalar>& b,
                                            typename Derived::Scalar epsilon, SinkhornOptions opts = {},
                                            const std::vector<typename Derived::Scalar>& epsilon_schedule = {}) {
  using Scalar = typename Derived::Scalar;
  const MatrixX<Scalar> c = cost;
  if (!(epsilon > Scalar(0))) throw std::invalid_argument("sinkhorn: epsilon must be positive");
  if (c.size() == 0) throw std::invalid_argument("sinkhorn: empty cost matrix");
  if (!c.allFinite()) throw std::invalid_argument("sinkhorn: cost matrix has non-finite entries");
  detail::validate_marginal(a, c.rows(), "row");
  detail::validate_marginal(b, c.cols(), "column");

  const MatrixX<Scalar> ct = c.transpose();
  const VectorX<Scalar> log_a = a.array().log();
  const VectorX<Scalar> log_b = b.array().log();
  VectorX<Scalar> f = VectorX<Scalar>::Zero(c.rows());
  VectorX<Scalar> g = VectorX<Scalar>::Zero(c.cols());
  VectorX<Scalar> f_next;

  for (Scalar eps : epsilon_schedule) {
    if (!(eps > epsilon)) continue;
    for (int k = 0; k < opts.stage_iters; ++k) {
      detail::softmin_rows(c, log_b, g, eps, f_next);
      const bool done = ((f - f_next).array() / eps).abs().maxCoeff() < Scalar(opts.tol);
      f = f_next;
      detail::softmin_rows(ct, log_a, f, eps, g);
      if (done) break;
    }
  }
  detail::softmin_rows(ct, log_a, f, epsilon, g);

  Coupling<Scalar> out;
  Scalar err = std::numeric_limits<Scalar>::infinity();
  int it = 0;
  for (; it < opts.max_iters; ++it) {
    detail::softmin_rows(c, log_b, g, epsilon, f_next);
    // Row sums under the current (f, g) are a_i * exp((f_i - f_next_i) / eps).
    err = (a.array() * (((f - f_next).array() / epsilon).exp() - Scalar(1))).abs().maxCoeff();
    if (err < opts.tol) break;
    f = f_next;
    detail::softmin_rows(ct, log_a, f, epsilon, g);
  }
  out.converged = err < opts.tol;
  out.iterations = it;
  out.marginal_error = err;

  out.plan.resize(c.rows(), c.cols());
  for (Index i = 0; i < c.rows(); ++i)
    for (Index j = 0; j < c.cols(); ++j)
      out.plan(i, j) = std::exp(log_a(i) + log_b(j) + (f(i) + g(j) - c(i, j)) / epsilon);
  out.row_marginal = a;
  out.col_marginal = b;
  out.epsilon = epsilon;
  out.f = std::move(f);
  out.g = std::move(g);
  return out;
}

template <typename Scalar>
Coupling<Scalar> sinkhorn(const CostMatrix<Scalar>& cost, const VectorX<Scalar>& a, const VectorX<Scalar>& b,
                          Scalar epsilon, SinkhornOptions opts = {}) {
  return sinkhorn(cost.entries, a, b, epsilon, opts);
}

// <P, C>
template <typename Scalar, typename Derived>
Scalar transport_cost(const Coupling<Scalar>& p, const Eigen::MatrixBase<Derived>& cost) {
  return p.plan.cwiseProduct(cost).sum();
}

// <P, C> + eps * KL(P | a b^T); the objective whose debiased combination
// is the Sinkhorn divergence.
template <typename Scalar, typename Derived>
Scalar entropic_cost(const Coupling<Scalar>& p, const Eigen::MatrixBase<Derived>& cost) {
  Scalar kl = 0;
  for (Index i = 0; i < p.plan.rows(); ++i)
    for (Index j = 0; j < p.plan.cols(); ++j) {
      const Scalar v = p.plan(i, j);
      if (v > Scalar(0)) kl += v * std::log(v / (p.row_marginal(i) * p.col_marginal(j)));
    }
  return transport_cost(p, cost) + p.epsilon * kl;
}

// Per-row K heaviest entries of a coupling.
struct TopKCoupling {
  Index rows = 0;
  Index cols = 0;
  Index k = 0;
  // Flattened retained pairs: row i occupies [i*k, (i+1)*k), heaviest first.
  std::vector<Index> row_index;
  std::vector<Index> col_index;
  std::vector<double> weight;
  double retained_mass = 0;

  std::size_t pair_count() const { return weight.size(); }
  std::vector<Index> neighbors(Index i) const;
};

// Ties go to the lower column index.
TopKCoupling topk_truncate(const MatrixX<double>& plan, Index k);
inline TopKCoupling topk_truncate(const Coupling<double>& pi, Index k) { return topk_truncate(pi.plan, k); }

struct OtDistanceOptions {
  double blur = 0.05;
  double scaling = 0.5;
  bool debiased = true;
  SinkhornOptions sinkhorn{};
};

// Geometric schedule of regularisations, from the squared diameter of the
// union of both clouds down to (but excluding) blur^2, in ratios scaling^2.
template <typename DerivedX, typename DerivedY>
std::vector<typename DerivedX::Scalar> annealing_schedule(const Eigen::MatrixBase<DerivedX>& x,
                                                          const Eigen::MatrixBase<DerivedY>& y,
                                                          double blur, double scaling) {
  using Scalar = typename DerivedX::Scalar;
  std::vector<Scalar> eps;
  if (!(scaling > 0.0 && scaling < 1.0)) return eps;
  const RowVectorX<Scalar> lo = x.colwise().minCoeff().cwiseMin(y.colwise().minCoeff());
  const RowVectorX<Scalar> hi = x.colwise().maxCoeff().cwiseMax(y.colwise().maxCoeff());
  const Scalar target = Scalar(blur * blur);
  Scalar e = (hi - lo).squaredNorm();
  const Scalar ratio = Scalar(scaling * scaling);
  while (e > target) {
    eps.push_back(e);
    e *= ratio;
  }
  return eps;
}

// Entropic OT value between uniform point clouds under squared-Euclidean
// cost with eps = blur^2, annealed from the cloud diameter. The debiased
// variant subtracts half of each self-transport term.
template <typename DerivedX, typename DerivedY>
typename DerivedX::Scalar ot_distance(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y,
                                      const OtDistanceOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument("ot_distance: empty point set");
  if (x.cols() != y.cols()) throw ShapeError("ot_distance", x.rows(), x.cols(), y.rows(), y.cols());
  if (!(opts.blur > 0.0)) throw std::invalid_argument("ot_distance: blur must be positive");
  const Scalar eps = Scalar(opts.blur * opts.blur);
  const auto schedule = annealing_schedule(x, y, opts.blur, opts.scaling);
  const auto ax = uniform_marginal<Scalar>(x.rows());
  const auto ay = uniform_marginal<Scalar>(y.rows());
  auto term = [&](const auto& p, const auto& q, const VectorX<Scalar>& wp, const VectorX<Scalar>& wq) {
    const MatrixX<Scalar> c = pairwise_sq_dist(p, q);
    return entropic_cost(sinkhorn(c, wp, wq, eps, opts.sinkhorn, schedule), c);
  };
  Scalar value = term(x, y, ax, ay);
  if (opts.debiased) value -= Scalar(0.5) * (term(x, x, ax, ax) + term(y, y, ay, ay));
  return value;
}

// Differentiable counterpart of ot_distance over uniform clouds: plans are
// solved on the current values and frozen, so the gradient is that of
// <P, C(x, y)> for each term.
Tensor sinkhorn_loss(const Tensor& x, const Tensor& y, const OtDistanceOptions& opts = {});

}  // namespace snapflow
