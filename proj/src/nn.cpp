#include "snapflow/nn.hpp"

#include <cmath>

namespace snapflow {

Linear::Linear(Index in, Index out, Rng& rng, double gain, bool with_bias) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  weight = Tensor::parameter(std::move(w));
  bias = with_bias ? Tensor::parameter(Matrix::Zero(1, out)) : Tensor();
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.cols() != weight.rows()) throw ShapeError("linear", x.rows(), x.cols(), weight.rows(), weight.cols());
  Tensor y = matmul(x, weight);
  return has_bias() ? add(y, bias) : y;
}

void Linear::register_parameters(ParameterSet& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  if (has_bias()) params.add(prefix + ".bias", bias);
}

}  // namespace snapflow
