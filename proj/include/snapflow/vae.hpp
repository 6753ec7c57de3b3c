#pragma once

// Gaussian-encoder VAE between gene space R^G and latent space R^d.
//
//   encoder: G -> hidden -> 2d   (mu | log sigma), leaky-relu hidden layer
//   decoder: d -> hidden -> G    leaky-relu hidden layer, linear output
//
// log sigma is clamped to [log_sigma_min, log_sigma_max] before
// exponentiation.

#include "snapflow/checkpoint.hpp"
#include "snapflow/nn.hpp"
#include "snapflow/tensor.hpp"

#include <cstdint>
#include <vector>

namespace snapflow {

struct VaeArchitecture {
  Index gene_dim = 0;
  Index latent_dim = 50;
  Index hidden = 256;
  double log_sigma_min = -5.0;
  double log_sigma_max = 5.0;
};

class Vae {
 public:
  Vae() = default;
  Vae(const VaeArchitecture& arch, Rng& init_rng);

  const VaeArchitecture& architecture() const { return arch_; }
  Index gene_dim() const { return arch_.gene_dim; }
  Index latent_dim() const { return arch_.latent_dim; }

  Linear encoder_hidden;
  Linear encoder_head;
  Linear decoder_hidden;
  Linear decoder_out;

  // Keys under "<prefix>.encoder.*" and "<prefix>.decoder.*".
  void register_parameters(ParameterSet& params, const std::string& prefix = "vae") const;
  std::vector<Tensor> parameters() const;

 private:
  VaeArchitecture arch_;
};

enum class Sampling { Reparameterized, Mean };

struct Encoding {
  Tensor mu;
  Tensor log_sigma;  // clamped
  Tensor sigma;
  Tensor z;
};

// z = mu + sigma * noise, noise ~ N(0, I) from `rng`. With Sampling::Mean the
// noise is skipped and z = mu.
Encoding encode(const Vae& vae, const Tensor& x, Rng& rng, Sampling sampling = Sampling::Reparameterized);
Encoding encode(const Vae& vae, const Tensor& x, std::uint64_t seed);

Tensor decode(const Vae& vae, const Tensor& z);

// Mean over rows of 1/2 sum_j (mu^2 + sigma^2 - 1 - log sigma^2).
Tensor kl_standard_normal(const Tensor& mu, const Tensor& log_sigma);

struct VaeLoss {
  Tensor total;
  Tensor reconstruction;  // mean over rows of ||x - x_hat||^2
  Tensor kl;
};

VaeLoss vae_loss(const Vae& vae, const Tensor& x, double lambda_kl, Rng& rng);
// Loss of an already computed encoding (shares the latent sample with
// callers that reuse it).
VaeLoss vae_loss(const Vae& vae, const Tensor& x, const Encoding& enc, double lambda_kl);

}  // namespace snapflow
