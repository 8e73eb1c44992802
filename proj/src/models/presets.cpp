#include <stdexcept>

#include "advdef/models.hpp"

namespace advdef::models {

using nn::Activation;

std::string to_string(DatasetTag tag) {
  switch (tag) {
    case DatasetTag::mnist: return "mnist";
    case DatasetTag::cifar10: return "cifar10";
    case DatasetTag::synthetic_hires: return "synthetic-hires";
  }
  return "?";
}

DatasetTag dataset_tag_from_string(const std::string& s) {
  for (auto t : {DatasetTag::mnist, DatasetTag::cifar10, DatasetTag::synthetic_hires})
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown dataset tag '" + s + "'");
}

std::string to_string(ReconLoss r) { return r == ReconLoss::mse ? "mse" : "bce"; }

ReconLoss recon_loss_from_string(const std::string& s) {
  if (s == "mse") return ReconLoss::mse;
  if (s == "bce") return ReconLoss::bce;
  throw std::invalid_argument("unknown reconstruction loss '" + s + "'");
}

std::vector<std::string> classifier_preset_names() { return {"mnist-cnn", "cifar10-cnn", "hires-cnn"}; }

std::vector<std::string> vae_preset_names() {
  return {"mnist-vae", "cifar10-vae", "patch-vae-16", "patch-vae-32", "patch-vae-64"};
}

namespace {

ClassifierSpec mnist_cnn() {
  ClassifierSpec s{"mnist-cnn", DatasetTag::mnist, {28, 28, 1}, {}, 10};
  s.layers = {LayerSpec::conv("conv1", 32), LayerSpec::maxpool(),
              LayerSpec::conv("conv2", 64), LayerSpec::maxpool(),
              LayerSpec::flatten(),         LayerSpec::dense("fc1", 1024),
              LayerSpec::dropout(0.4f),     LayerSpec::dense("logits", 10, Activation::none)};
  return s;
}

ClassifierSpec cifar10_cnn() {
  ClassifierSpec s{"cifar10-cnn", DatasetTag::cifar10, {32, 32, 3}, {}, 10};
  const std::size_t widths[] = {32, 64, 128};
  const float rates[] = {0.2f, 0.3f, 0.4f};
  for (int b = 0; b < 3; ++b) {
    for (char sub : {'a', 'b'}) {
      std::string id = std::to_string(b + 1) + sub;
      s.layers.push_back(LayerSpec::conv("conv" + id, widths[b]));
      s.layers.push_back(LayerSpec::batchnorm("bn" + id));
    }
    s.layers.push_back(LayerSpec::maxpool());
    s.layers.push_back(LayerSpec::dropout(rates[b]));
  }
  s.layers.push_back(LayerSpec::flatten());
  s.layers.push_back(LayerSpec::dense("logits", 10, Activation::none));
  return s;
}

// Conv+pool, conv, conv, dense encoder with the mirrored decoder used by the
// colour VAEs: dense, reshape, tconv, tconv, upsample, tconv.
VaeSpec colour_vae(std::string name, std::size_t size, std::size_t c1, std::size_t c2, std::size_t c3,
                   std::size_t width) {
  VaeSpec v;
  v.name = std::move(name);
  v.input = {size, size, 3};
  v.latent = width / 2;
  v.recon = ReconLoss::mse;
  LayerSpec head = LayerSpec::dense("enc_out", width, Activation::none);
  head.zero_init = true;
  v.encoder = {LayerSpec::conv("enc1", c1), LayerSpec::maxpool(), LayerSpec::conv("enc2", c2),
               LayerSpec::conv("enc3", c3), LayerSpec::flatten(), head};
  const std::size_t h = size / 2;
  v.decoder = {LayerSpec::dense("dec_in", h * h * c3), LayerSpec::reshape({h, h, c3}),
               LayerSpec::tconv("dec3", c2),           LayerSpec::tconv("dec2", c1),
               LayerSpec::upsample(),                  LayerSpec::tconv("dec_out", 3, Activation::none)};
  return v;
}

VaeSpec mnist_vae() {
  VaeSpec v;
  v.name = "mnist-vae";
  v.input = {28, 28, 1};
  v.latent = 128;
  v.beta = 0.1f;
  v.recon = ReconLoss::bce;
  LayerSpec head = LayerSpec::dense("enc_out", 256, Activation::none);
  head.zero_init = true;
  v.encoder = {LayerSpec::conv("enc1", 16), LayerSpec::maxpool(), LayerSpec::conv("enc2", 8),
               LayerSpec::maxpool(),        LayerSpec::flatten(), head};
  v.decoder = {LayerSpec::dense("dec_in", 7 * 7 * 8), LayerSpec::reshape({7, 7, 8}),
               LayerSpec::upsample(),                 LayerSpec::tconv("dec2", 16),
               LayerSpec::upsample(),                 LayerSpec::tconv("dec_out", 1, Activation::none)};
  return v;
}

}  // namespace

ClassifierSpec hires_classifier(Shape input, std::size_t classes) {
  if (input.size() != 3 || input[0] % 8 || input[1] % 8)
    throw std::invalid_argument("hires classifier needs an H x W x C input with H, W divisible by 8");
  ClassifierSpec s{"hires-cnn", DatasetTag::synthetic_hires, input, {}, classes};
  s.layers = {LayerSpec::conv("conv1", 16), LayerSpec::maxpool(),     LayerSpec::conv("conv2", 32),
              LayerSpec::maxpool(),         LayerSpec::conv("conv3", 32), LayerSpec::maxpool(),
              LayerSpec::flatten(),         LayerSpec::dense("fc1", 128), LayerSpec::dropout(0.3f),
              LayerSpec::dense("logits", classes, Activation::none)};
  return s;
}

ClassifierSpec classifier_preset(const std::string& name) {
  if (name == "mnist-cnn") return mnist_cnn();
  if (name == "cifar10-cnn") return cifar10_cnn();
  if (name == "hires-cnn") return hires_classifier({64, 64, 3}, 6);
  throw std::invalid_argument("unknown classifier preset '" + name + "'");
}

VaeSpec vae_preset(const std::string& name) {
  if (name == "mnist-vae") return mnist_vae();
  if (name == "cifar10-vae") {
    auto v = colour_vae(name, 32, 64, 32, 16, 1024);
    v.beta = 0.5f;
    return v;
  }
  VaeSpec v;
  if (name == "patch-vae-16") v = colour_vae(name, 16, 64, 32, 16, 512);
  else if (name == "patch-vae-32") v = colour_vae(name, 32, 64, 32, 16, 512);
  else if (name == "patch-vae-64") v = colour_vae(name, 64, 128, 64, 32, 1024);
  if (!v.name.empty()) {
    v.beta = 0.03f;
    return v;
  }
  throw std::invalid_argument("unknown vae preset '" + name + "'");
}

void validate(const ClassifierSpec& spec) {
  auto trace = nn::shape_trace(spec.layers, spec.input);
  if (trace.back() != Shape{spec.classes})
    throw std::invalid_argument("classifier " + spec.name + ": layers end in " + shape_str(trace.back()) +
                                ", expected [" + std::to_string(spec.classes) + "]");
}

void validate(const VaeSpec& spec) {
  auto enc = nn::shape_trace(spec.encoder, spec.input);
  if (spec.latent == 0 || enc.back() != Shape{2 * spec.latent})
    throw std::invalid_argument("vae " + spec.name + ": encoder ends in " + shape_str(enc.back()) +
                                ", expected [" + std::to_string(2 * spec.latent) + "]");
  auto dec = nn::shape_trace(spec.decoder, {spec.latent});
  if (dec.back() != spec.input)
    throw std::invalid_argument("vae " + spec.name + ": decoder ends in " + shape_str(dec.back()) +
                                ", expected " + shape_str(spec.input));
  if (spec.beta < 0.0f) throw std::invalid_argument("vae " + spec.name + ": beta must be non-negative");
  if (spec.clip_lo > spec.clip_hi) throw std::invalid_argument("vae " + spec.name + ": invalid noise clip range");
}

ParamStore init_classifier(const ClassifierSpec& spec, std::uint64_t seed) {
  validate(spec);
  ParamStore p;
  Rng rng(seed, 0);
  nn::init_params(spec.layers, spec.input, p, rng);
  return p;
}

ParamStore init_vae(const VaeSpec& spec, std::uint64_t seed) {
  validate(spec);
  ParamStore p;
  Rng enc(seed, 0), dec(seed, 1);
  nn::init_params(spec.encoder, spec.input, p, enc);
  nn::init_params(spec.decoder, {spec.latent}, p, dec);
  return p;
}

}  // namespace advdef::models
