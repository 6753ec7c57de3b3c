#pragma once

#include "snapflow/tensor.hpp"

#include <vector>

namespace snapflow {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  // Applies one update from the current grads, then zeros them. Throws if a
  // parameter has no grad.
  void step();
  void zero_grad();

  long step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_count_ = 0;
};

}  // namespace snapflow
