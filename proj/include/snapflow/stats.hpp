#pragma once

#include "snapflow/types.hpp"

#include <span>

namespace snapflow {

// Hartigan's dip statistic of a univariate sample: the sup-distance between
// the empirical CDF and the closest unimodal CDF. Lies in [1/(2n), 1/4].
double dip_statistic(std::span<const double> sample);

// Upper `quantile` of the dip statistic over `replicates` Gaussian samples of
// size n (the dip is location/scale invariant, so one reference suffices).
double dip_unimodal_threshold(Index n, double quantile, int replicates, std::uint64_t seed);

struct Pca {
  RowVector mean;
  Matrix components;  // k x p, rows are unit principal axes
  Vector explained_variance;
  Vector explained_variance_ratio;

  Matrix transform(const Matrix& x) const;
};

// Principal axes of the rows of x, largest variance first. Each axis is
// signed so its largest-magnitude loading is positive.
Pca fit_pca(const Matrix& x, Index components);

}  // namespace snapflow
