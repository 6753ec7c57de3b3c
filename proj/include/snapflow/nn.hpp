#pragma once

#include "snapflow/checkpoint.hpp"
#include "snapflow/tensor.hpp"

#include <string>

namespace snapflow {

// y = x W + b, with W stored in x out layout.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  // Glorot-uniform weights scaled by `gain`, zero bias.
  Linear(Index in, Index out, Rng& rng, double gain = 1.0, bool with_bias = true);

  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
  bool has_bias() const { return bias.size() > 0; }

  Tensor operator()(const Tensor& x) const;
  void register_parameters(ParameterSet& params, const std::string& prefix) const;
};

}  // namespace snapflow
