#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "advdef/dataset.hpp"
#include "advdef/layers.hpp"

namespace advdef::models {

using nn::LayerSpec;
using nn::ParamStore;

enum class DatasetTag { mnist, cifar10, synthetic_hires };
std::string to_string(DatasetTag tag);
DatasetTag dataset_tag_from_string(const std::string& s);

struct ClassifierSpec {
  std::string name;
  DatasetTag dataset = DatasetTag::mnist;
  Shape input;
  std::vector<LayerSpec> layers;
  std::size_t classes = 10;

  bool operator==(const ClassifierSpec&) const = default;
};

enum class ReconLoss { mse, bce };
std::string to_string(ReconLoss r);
ReconLoss recon_loss_from_string(const std::string& s);

/// The encoder ends in a dense layer of width 2 * latent holding the mean and
/// log-variance halves. The decoder emits logits; decoding applies a sigmoid.
struct VaeSpec {
  std::string name;
  Shape input;
  std::vector<LayerSpec> encoder;
  std::size_t latent = 0;
  std::vector<LayerSpec> decoder;
  float beta = 1.0f;
  float clip_lo = kDefaultNoiseClipLo;
  float clip_hi = kDefaultNoiseClipHi;
  ReconLoss recon = ReconLoss::mse;

  bool operator==(const VaeSpec&) const = default;
};

std::vector<std::string> classifier_preset_names();
std::vector<std::string> vae_preset_names();
/// "mnist-cnn", "cifar10-cnn" or "hires-cnn".
ClassifierSpec classifier_preset(const std::string& name);
/// Small CNN for the synthetic high-resolution images.
ClassifierSpec hires_classifier(Shape input, std::size_t classes);
/// "mnist-vae", "cifar10-vae", "patch-vae-16", "patch-vae-32" or "patch-vae-64".
VaeSpec vae_preset(const std::string& name);

/// Throws std::invalid_argument when the layer chain does not produce the
/// advertised output (classes, 2 * latent, decoder back to the input shape).
void validate(const ClassifierSpec& spec);
void validate(const VaeSpec& spec);

ParamStore init_classifier(const ClassifierSpec& spec, std::uint64_t seed);
ParamStore init_vae(const VaeSpec& spec, std::uint64_t seed);

// ---- classifier --------------------------------------------------------------

/// Logits [batch, classes]. `rng` drives dropout and is needed in train mode.
Tensor classifier_forward(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x,
                          nn::Mode mode = nn::Mode::eval, Rng* rng = nullptr);
std::vector<int> predict(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x);

// ---- vae ---------------------------------------------------------------------

struct Posterior {
  Tensor mu;      // [batch, latent]
  Tensor logvar;  // [batch, latent]
  Tensor sigma;   // exp(logvar / 2)
};

Posterior vae_encode(const VaeSpec& spec, const ParamStore& params, const Tensor& x);
/// z = mu + sigma * clip(eps, lo, hi) with eps standard normal.
Tensor vae_sample(const Tensor& mu, const Tensor& sigma, Rng& rng, float clip_lo, float clip_hi);
Tensor vae_decode_logits(const VaeSpec& spec, const ParamStore& params, const Tensor& z);
/// Pixels in [0, 1], shape [batch, ...input].
Tensor vae_decode(const VaeSpec& spec, const ParamStore& params, const Tensor& z);
/// decode(sample(encode(x))) with the spec's noise clip range.
Tensor vae_reconstruct(const VaeSpec& spec, const ParamStore& params, const Tensor& x, Rng& rng);

/// 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2) over every element.
Tensor kl_gaussian(const Tensor& mu, const Tensor& sigma);
/// Same quantity from the log-variance, which is how the loss computes it.
Tensor kl_gaussian_logvar(const Tensor& mu, const Tensor& logvar);

struct VaeLoss {
  Tensor total;  // recon + beta * kl, per image averaged over the batch
  double recon = 0.0;
  double kl = 0.0;
};

/// Reconstruction term: summed binary cross-entropy (bce) or 0.5 * squared
/// error (mse) per image. Both terms are averaged over the batch.
VaeLoss vae_loss(const VaeSpec& spec, const ParamStore& params, const Tensor& x, Rng& rng);

// ---- training ----------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double seconds = 0.0;
};

struct TrainConfig {
  nn::OptimizerConfig optimizer;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Stop once the reconstruction term changes by less than this fraction
  /// over `early_stop_window` epochs. Zero disables the check.
  double early_stop_tau = 0.0;
  std::size_t early_stop_window = 2;
  /// Random crops drawn per epoch when the model input is smaller than the
  /// images. Zero means one crop per image.
  std::size_t patches_per_epoch = 0;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainReport {
  std::vector<double> loss;   // mean minibatch objective per epoch
  std::vector<double> recon;  // vae only
  std::vector<double> kl;     // vae only
  double initial_loss = 0.0;  // objective on the training data before the first update
  double final_loss = 0.0;    // same evaluation after the last update
  double final_metric = 0.0;  // training accuracy (classifier) or reconstruction term (vae)
  double wall_seconds = 0.0;
  bool early_stopped = false;
};

struct TrainedClassifier {
  ParamStore params;
  TrainReport report;
};

struct TrainedVae {
  ParamStore params;
  TrainReport report;
};

TrainedClassifier train_classifier(const ClassifierSpec& spec, const Dataset& data, const TrainConfig& config);
TrainedVae train_vae(const VaeSpec& spec, const Tensor& images, const TrainConfig& config);

/// Mean eval-mode cross-entropy and accuracy over a dataset, in fixed chunks.
struct ClassifierEval {
  double loss = 0.0;
  double accuracy = 0.0;
};
ClassifierEval evaluate_classifier(const ClassifierSpec& spec, const ParamStore& params, const Dataset& data,
                                   std::size_t chunk = 256);

}  // namespace advdef::models
