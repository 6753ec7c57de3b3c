#include "snapflow/ot.hpp"

namespace snapflow {

std::vector<Index> TopKCoupling::neighbors(Index i) const {
  const auto begin = col_index.begin() + i * k;
  return {begin, begin + k};
}

TopKCoupling topk_truncate(const MatrixX<double>& plan, Index k) {
  const Index n = plan.rows(), m = plan.cols();
  if (k < 1 || k > m) throw std::out_of_range("topk_truncate: K=" + std::to_string(k) +
                                              " outside [1, " + std::to_string(m) + "]");
  TopKCoupling out;
  out.rows = n;
  out.cols = m;
  out.k = k;
  out.row_index.reserve(static_cast<std::size_t>(n * k));
  out.col_index.reserve(static_cast<std::size_t>(n * k));
  out.weight.reserve(static_cast<std::size_t>(n * k));
  std::vector<Index> order(static_cast<std::size_t>(m));
  for (Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index x, Index y) {
      if (plan(i, x) != plan(i, y)) return plan(i, x) > plan(i, y);
      return x < y;
    });
    for (Index r = 0; r < k; ++r) {
      out.row_index.push_back(i);
      out.col_index.push_back(order[r]);
      out.weight.push_back(plan(i, order[r]));
      out.retained_mass += plan(i, order[r]);
    }
  }
  return out;
}

namespace {

// <P, C(p, q)> + eps KL, differentiable in p and q through C only.
Tensor frozen_plan_term(const Tensor& p, const Tensor& q, double eps, const std::vector<double>& schedule,
                        const SinkhornOptions& opts) {
  Tensor c = sq_dist(p, q);
  const auto wp = uniform_marginal<double>(p.rows());
  const auto wq = uniform_marginal<double>(q.rows());
  const auto plan = sinkhorn(c.value(), wp, wq, eps, opts, schedule);
  const double entropic = entropic_cost(plan, c.value()) - transport_cost(plan, c.value());
  return add_scalar(sum(mul(c, Tensor::constant(plan.plan))), entropic);
}

}  // namespace

Tensor sinkhorn_loss(const Tensor& x, const Tensor& y, const OtDistanceOptions& opts) {
  if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument("sinkhorn_loss: empty point set");
  if (x.cols() != y.cols()) throw ShapeError("sinkhorn_loss", x.rows(), x.cols(), y.rows(), y.cols());
  const double eps = opts.blur * opts.blur;
  const auto schedule = annealing_schedule(x.value(), y.value(), opts.blur, opts.scaling);
  Tensor value = frozen_plan_term(x, y, eps, schedule, opts.sinkhorn);
  if (!opts.debiased) return value;
  Tensor self_x = frozen_plan_term(x, x, eps, schedule, opts.sinkhorn);
  Tensor self_y = frozen_plan_term(y, y, eps, schedule, opts.sinkhorn);
  return sub(value, scale(add(self_x, self_y), 0.5));
}

}  // namespace snapflow
