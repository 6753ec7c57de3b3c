#include "snapflow/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace snapflow {

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("Adam: parameter does not require grad");
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad())
      throw std::runtime_error("Adam: parameter " + std::to_string(k) + " has no gradient");
  }
  ++step_count_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Matrix& g = params_[k].grad();
    m_[k] = b1 * m_[k] + (1.0 - b1) * g;
    v_[k] = b2 * v_[k] + (1.0 - b2) * g.cwiseProduct(g);
    Matrix& w = params_[k].mutable_value();
    w.array() -= config_.learning_rate * (m_[k].array() / c1) /
                 ((v_[k].array() / c2).sqrt() + config_.epsilon);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace snapflow
