#pragma once

#include <string>
#include <vector>

#include "advdef/models.hpp"

namespace advdef::attacks {

enum class AttackKind { fgsm, ifgsm };
std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  float epsilon = 0.0f;        // per-pixel budget in [0, 1] units
  std::size_t iterations = 10;  // ifgsm only
  float clip_lo = 0.0f;
  float clip_hi = 1.0f;
};

/// Throws std::invalid_argument for a negative budget, zero ifgsm iterations
/// or an empty clip range. Returns warnings for budgets outside the usual
/// range of the dataset.
std::vector<std::string> validate(const AttackConfig& config, models::DatasetTag dataset);

/// Thrown when some images, or their loss gradients, are not finite.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::vector<std::size_t> items);
  const std::vector<std::size_t>& items() const { return items_; }

 private:
  std::vector<std::size_t> items_;
};

/// Per-image gradient of the softmax cross-entropy against the true labels
/// with respect to the input, in eval mode. Same shape as x.
Tensor input_gradient(const models::ClassifierSpec& spec, const models::ParamStore& params, const Tensor& x,
                      std::span<const int> labels);

/// clip(x + epsilon * sign(grad), lo, hi) from a single gradient evaluation.
Tensor fgsm(const models::ClassifierSpec& spec, const models::ParamStore& params, const Tensor& x,
            std::span<const int> labels, float epsilon, float clip_lo = 0.0f, float clip_hi = 1.0f);

/// `iterations` steps of size epsilon / iterations, clipping after each.
Tensor ifgsm(const models::ClassifierSpec& spec, const models::ParamStore& params, const Tensor& x,
             std::span<const int> labels, float epsilon, std::size_t iterations, float clip_lo = 0.0f,
             float clip_hi = 1.0f);

Tensor run_attack(const AttackConfig& config, const models::ClassifierSpec& spec, const models::ParamStore& params,
                  const Tensor& x, std::span<const int> labels);

struct AttackFailure {
  std::size_t index = 0;  // position in the input slice
  std::string reason;
};

/// Attacked images in input order. Items whose attack failed are left out
/// and listed in `failures`; `source` maps each kept row to its input index.
struct AdversarialBatch {
  Tensor original;
  Tensor perturbed;
  std::vector<int> labels;
  std::vector<std::size_t> source;
  std::vector<double> l2_relative;  // ||x - x_adv|| / ||x|| per image
  std::vector<AttackFailure> failures;

  std::size_t size() const { return labels.size(); }
  /// Largest |x_adv - x| over the batch.
  double linf() const;
  /// FNV-1a hash over the perturbed pixels, for checking that two consumers
  /// saw the same adversarial batch.
  std::uint64_t fingerprint() const;
};

/// Attacks every image independently. Work is split into fixed chunks of
/// `chunk` images, so the output does not depend on `threads`.
AdversarialBatch attack_batch(const AttackConfig& config, const models::ClassifierSpec& spec,
                              const models::ParamStore& params, const Tensor& images, std::span<const int> labels,
                              std::size_t threads = 1, std::size_t chunk = 16);

}  // namespace advdef::attacks
