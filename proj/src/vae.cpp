#include "snapflow/vae.hpp"

#include <stdexcept>

namespace snapflow {

Vae::Vae(const VaeArchitecture& arch, Rng& init_rng) : arch_(arch) {
  if (arch.gene_dim < 1 || arch.latent_dim < 1 || arch.hidden < 1)
    throw std::invalid_argument("Vae: dimensions must be positive");
  encoder_hidden = Linear(arch.gene_dim, arch.hidden, init_rng);
  encoder_head = Linear(arch.hidden, 2 * arch.latent_dim, init_rng);
  decoder_hidden = Linear(arch.latent_dim, arch.hidden, init_rng);
  decoder_out = Linear(arch.hidden, arch.gene_dim, init_rng);
}

void Vae::register_parameters(ParameterSet& params, const std::string& prefix) const {
  encoder_hidden.register_parameters(params, prefix + ".encoder.hidden");
  encoder_head.register_parameters(params, prefix + ".encoder.head");
  decoder_hidden.register_parameters(params, prefix + ".decoder.hidden");
  decoder_out.register_parameters(params, prefix + ".decoder.out");
}

std::vector<Tensor> Vae::parameters() const {
  ParameterSet p;
  register_parameters(p);
  return p.tensors();
}

Encoding encode(const Vae& vae, const Tensor& x, Rng& rng, Sampling sampling) {
  if (x.cols() != vae.gene_dim()) throw ShapeError("encode", x.rows(), x.cols(), x.rows(), vae.gene_dim());
  if (!x.value().allFinite()) throw std::invalid_argument("encode: input contains non-finite values");
  const auto& arch = vae.architecture();
  const Index d = arch.latent_dim;
  Tensor h = leaky_relu(vae.encoder_hidden(x));
  Tensor head = vae.encoder_head(h);
  Encoding enc;
  enc.mu = col_slice(head, 0, d);
  enc.log_sigma = clamp(col_slice(head, d, d), arch.log_sigma_min, arch.log_sigma_max);
  enc.sigma = exp(enc.log_sigma);
  if (sampling == Sampling::Mean) {
    enc.z = enc.mu;
    return enc;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix noise(x.rows(), d);
  for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = normal(rng);
  enc.z = add(enc.mu, mul(enc.sigma, Tensor::constant(std::move(noise))));
  return enc;
}

Encoding encode(const Vae& vae, const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  return encode(vae, x, rng);
}

Tensor decode(const Vae& vae, const Tensor& z) {
  if (z.cols() != vae.latent_dim()) throw ShapeError("decode", z.rows(), z.cols(), z.rows(), vae.latent_dim());
  return vae.decoder_out(leaky_relu(vae.decoder_hidden(z)));
}

Tensor kl_standard_normal(const Tensor& mu, const Tensor& log_sigma) {
  // sigma^2 - log sigma^2 written through log sigma to keep one exp.
  Tensor per_entry = add_scalar(sub(add(square(mu), exp(scale(log_sigma, 2.0))), scale(log_sigma, 2.0)), -1.0);
  return scale(sum(per_entry), 0.5 / static_cast<double>(mu.rows()));
}

VaeLoss vae_loss(const Vae& vae, const Tensor& x, const Encoding& enc, double lambda_kl) {
  if (x.rows() == 0) throw std::invalid_argument("vae_loss: empty batch");
  VaeLoss out;
  Tensor residual = sub(x, decode(vae, enc.z));
  out.reconstruction = scale(sum(square(residual)), 1.0 / static_cast<double>(x.rows()));
  out.kl = kl_standard_normal(enc.mu, enc.log_sigma);
  out.total = add(out.reconstruction, scale(out.kl, lambda_kl));
  return out;
}

VaeLoss vae_loss(const Vae& vae, const Tensor& x, double lambda_kl, Rng& rng) {
  return vae_loss(vae, x, encode(vae, x, rng), lambda_kl);
}

}  // namespace snapflow
