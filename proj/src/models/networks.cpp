#include <algorithm>
#include <stdexcept>

#include "advdef/models.hpp"

namespace advdef::models {

namespace {

void require_batch_of(const Tensor& x, const Shape& per_sample, const std::string& who) {
  bool ok = x.rank() == per_sample.size() + 1 && std::equal(per_sample.begin(), per_sample.end(), x.shape().begin() + 1);
  if (!ok)
    throw std::invalid_argument(who + ": input " + shape_str(x.shape()) + " does not match [batch, " +
                                shape_str(per_sample) + "]");
}

}  // namespace

Tensor classifier_forward(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x, nn::Mode mode,
                          Rng* rng) {
  require_batch_of(x, spec.input, spec.name);
  return nn::forward(spec.layers, params, x, {mode, rng});
}

std::vector<int> predict(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x) {
  NoGradGuard no_grad;
  return nn::argmax_rows(classifier_forward(spec, params, x));
}

Posterior vae_encode(const VaeSpec& spec, const ParamStore& params, const Tensor& x) {
  require_batch_of(x, spec.input, spec.name + " encoder");
  auto h = nn::forward(spec.encoder, params, x, {nn::Mode::eval});
  Posterior p;
  p.mu = slice_cols(h, 0, spec.latent);
  p.logvar = slice_cols(h, spec.latent, 2 * spec.latent);
  p.sigma = exp(mul_scalar(p.logvar, 0.5f));
  return p;
}

Tensor vae_sample(const Tensor& mu, const Tensor& sigma, Rng& rng, float clip_lo, float clip_hi) {
  if (mu.shape() != sigma.shape())
    throw std::invalid_argument("vae_sample: mu " + shape_str(mu.shape()) + " vs sigma " + shape_str(sigma.shape()));
  return add(mu, mul(sigma, gaussian(rng, mu.shape(), clip_lo, clip_hi)));
}

Tensor vae_decode_logits(const VaeSpec& spec, const ParamStore& params, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != spec.latent)
    throw std::invalid_argument(spec.name + " decoder: latent " + shape_str(z.shape()) + " does not match [batch, " +
                                std::to_string(spec.latent) + "]");
  return nn::forward(spec.decoder, params, z, {nn::Mode::eval});
}

Tensor vae_decode(const VaeSpec& spec, const ParamStore& params, const Tensor& z) {
  return sigmoid(vae_decode_logits(spec, params, z));
}

Tensor vae_reconstruct(const VaeSpec& spec, const ParamStore& params, const Tensor& x, Rng& rng) {
  auto post = vae_encode(spec, params, x);
  return vae_decode(spec, params, vae_sample(post.mu, post.sigma, rng, spec.clip_lo, spec.clip_hi));
}

Tensor kl_gaussian(const Tensor& mu, const Tensor& sigma) {
  if (mu.shape() != sigma.shape()) throw std::invalid_argument("kl_gaussian: mu and sigma differ in shape");
  for (float s : sigma.data())
    if (!(s > 0.0f)) throw std::domain_error("kl_gaussian: sigma must be positive");
  auto terms = sub(add(square(mu), square(sigma)), mul_scalar(log(sigma), 2.0f));
  return mul_scalar(add_scalar(sum(terms), -static_cast<float>(mu.numel())), 0.5f);
}

Tensor kl_gaussian_logvar(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape()) throw std::invalid_argument("kl_gaussian: mu and logvar differ in shape");
  auto terms = sub(add(square(mu), exp(logvar)), logvar);
  return mul_scalar(add_scalar(sum(terms), -static_cast<float>(mu.numel())), 0.5f);
}

VaeLoss vae_loss(const VaeSpec& spec, const ParamStore& params, const Tensor& x, Rng& rng) {
  const float inv_batch = 1.0f / static_cast<float>(x.dim(0));
  auto post = vae_encode(spec, params, x);
  auto z = vae_sample(post.mu, post.sigma, rng, spec.clip_lo, spec.clip_hi);
  auto logits = vae_decode_logits(spec, params, z);
  Tensor recon = spec.recon == ReconLoss::bce ? nn::bce_with_logits(x, logits, nn::Reduction::sum)
                                              : mul_scalar(nn::mse(x, sigmoid(logits), nn::Reduction::sum), 0.5f);
  recon = mul_scalar(recon, inv_batch);
  auto kl = mul_scalar(kl_gaussian_logvar(post.mu, post.logvar), inv_batch);
  VaeLoss out;
  out.recon = recon.item();
  out.kl = kl.item();
  out.total = spec.beta == 0.0f ? recon : add(recon, mul_scalar(kl, spec.beta));
  return out;
}

}  // namespace advdef::models
