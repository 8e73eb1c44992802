#include "advdef/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "advdef/parallel.hpp"

namespace advdef::attacks {

using models::ClassifierSpec;
using models::ParamStore;

std::string to_string(AttackKind kind) { return kind == AttackKind::fgsm ? "fgsm" : "ifgsm"; }

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "ifgsm" || s == "i-fgsm") return AttackKind::ifgsm;
  throw std::invalid_argument("unknown attack '" + s + "'");
}

std::vector<std::string> validate(const AttackConfig& config, models::DatasetTag dataset) {
  if (!(config.epsilon >= 0.0f) || !std::isfinite(config.epsilon))
    throw std::invalid_argument("attack: epsilon must be a finite non-negative number");
  if (config.kind == AttackKind::ifgsm && config.iterations < 1)
    throw std::invalid_argument("attack: ifgsm needs at least one iteration");
  if (!(config.clip_lo < config.clip_hi)) throw std::invalid_argument("attack: empty pixel clip range");
  float lo = 0.0f, hi = 0.12f;
  if (dataset == models::DatasetTag::cifar10) hi = 0.1f;
  if (dataset == models::DatasetTag::synthetic_hires) lo = 0.005f, hi = 0.09f;
  std::vector<std::string> warnings;
  if (config.epsilon != 0.0f && (config.epsilon < lo || config.epsilon > hi))
    warnings.push_back("epsilon " + std::to_string(config.epsilon) + " outside the usual range [" +
                       std::to_string(lo) + ", " + std::to_string(hi) + "] for " + models::to_string(dataset));
  return warnings;
}

NonFiniteGradient::NonFiniteGradient(std::vector<std::size_t> items)
    : std::runtime_error("non-finite input or gradient for " + std::to_string(items.size()) + " image(s)"),
      items_(std::move(items)) {}

namespace {

bool has_trainable_leaves(const ParamStore& params) {
  for (const auto& e : params.entries())
    if (e.value.requires_grad()) return true;
  return false;
}

// Parameters that do not record gradients, copying only when needed.
class Frozen {
 public:
  explicit Frozen(const ParamStore& params) : ref_(&params) {
    if (has_trainable_leaves(params)) {
      copy_ = params.frozen();
      ref_ = &copy_;
    }
  }
  const ParamStore& get() const { return *ref_; }

 private:
  ParamStore copy_;
  const ParamStore* ref_;
};

// Gradient of the summed cross-entropy; rows are independent in eval mode,
// so row i is the gradient of image i's own loss. Rows whose input or
// gradient is not finite are reported through `bad`.
std::vector<float> gradient_rows(const ClassifierSpec& spec, const ParamStore& frozen, const Tensor& x,
                                 std::span<const int> labels, std::vector<std::size_t>& bad) {
  if (x.rank() < 1 || labels.size() != x.dim(0))
    throw std::invalid_argument("attack: " + std::to_string(labels.size()) + " labels for input " +
                                shape_str(x.shape()));
  Tensor leaf = x.detach(true);
  auto logits = models::classifier_forward(spec, frozen, leaf);
  auto grads = backward(nn::cross_entropy(logits, labels, nn::Reduction::sum));
  auto g = grads.view(leaf);
  std::vector<float> out(g.begin(), g.end());
  const std::size_t row = x.numel() / x.dim(0);
  auto finite = [](float v) { return std::isfinite(v); };
  auto xd = x.data();
  for (std::size_t i = 0; i < x.dim(0); ++i)
    if (!std::all_of(out.begin() + i * row, out.begin() + (i + 1) * row, finite) ||
        !std::all_of(xd.begin() + i * row, xd.begin() + (i + 1) * row, finite))
      bad.push_back(i);
  return out;
}

// x <- clip(x + step * sign(g), lo, hi)
void signed_step(std::vector<float>& x, const std::vector<float>& g, float step, float lo, float hi) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    float s = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
    x[i] = std::clamp(x[i] + step * s, lo, hi);
  }
}

void check_clip(float lo, float hi) {
  if (!(lo < hi)) throw std::invalid_argument("attack: empty pixel clip range");
}

Tensor ifgsm_frozen(const ClassifierSpec& spec, const ParamStore& frozen, const Tensor& x, std::span<const int> labels,
                    float epsilon, std::size_t iterations, float lo, float hi, std::vector<std::size_t>& bad) {
  std::vector<float> cur(x.data().begin(), x.data().end());
  const float step = epsilon / static_cast<float>(iterations);
  for (std::size_t m = 0; m < iterations; ++m) {
    auto g = gradient_rows(spec, frozen, Tensor(x.shape(), cur), labels, bad);
    if (!bad.empty()) break;
    signed_step(cur, g, step, lo, hi);
  }
  return Tensor(x.shape(), std::move(cur));
}

Tensor attack_frozen(const AttackConfig& config, const ClassifierSpec& spec, const ParamStore& frozen, const Tensor& x,
                     std::span<const int> labels, std::vector<std::size_t>& bad) {
  std::size_t m = config.kind == AttackKind::fgsm ? 1 : config.iterations;
  return ifgsm_frozen(spec, frozen, x, labels, config.epsilon, m, config.clip_lo, config.clip_hi, bad);
}

double relative_l2(std::span<const float> a, std::span<const float> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    num += d * d;
    den += static_cast<double>(a[i]) * a[i];
  }
  return std::sqrt(num) / std::sqrt(den);
}

}  // namespace

Tensor input_gradient(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x,
                      std::span<const int> labels) {
  Frozen frozen(params);
  std::vector<std::size_t> bad;
  auto g = gradient_rows(spec, frozen.get(), x, labels, bad);
  return Tensor(x.shape(), std::move(g));
}

Tensor fgsm(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x, std::span<const int> labels,
            float epsilon, float clip_lo, float clip_hi) {
  return ifgsm(spec, params, x, labels, epsilon, 1, clip_lo, clip_hi);
}

Tensor ifgsm(const ClassifierSpec& spec, const ParamStore& params, const Tensor& x, std::span<const int> labels,
             float epsilon, std::size_t iterations, float clip_lo, float clip_hi) {
  if (iterations < 1) throw std::invalid_argument("ifgsm: iterations must be at least 1");
  if (epsilon < 0.0f) throw std::invalid_argument("attack: epsilon must be non-negative");
  check_clip(clip_lo, clip_hi);
  Frozen frozen(params);
  std::vector<std::size_t> bad;
  auto out = ifgsm_frozen(spec, frozen.get(), x, labels, epsilon, iterations, clip_lo, clip_hi, bad);
  if (!bad.empty()) throw NonFiniteGradient(bad);
  return out;
}

Tensor run_attack(const AttackConfig& config, const ClassifierSpec& spec, const ParamStore& params, const Tensor& x,
                  std::span<const int> labels) {
  return config.kind == AttackKind::fgsm
             ? fgsm(spec, params, x, labels, config.epsilon, config.clip_lo, config.clip_hi)
             : ifgsm(spec, params, x, labels, config.epsilon, config.iterations, config.clip_lo, config.clip_hi);
}

double AdversarialBatch::linf() const {
  double m = 0.0;
  if (size() == 0) return m;
  auto a = original.data(), b = perturbed.data();
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

std::uint64_t AdversarialBatch::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    auto bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  };
  if (size() > 0) mix(perturbed.data().data(), perturbed.numel() * sizeof(float));
  mix(labels.data(), labels.size() * sizeof(int));
  return h;
}

AdversarialBatch attack_batch(const AttackConfig& config, const ClassifierSpec& spec, const ParamStore& params,
                              const Tensor& images, std::span<const int> labels, std::size_t threads,
                              std::size_t chunk) {
  validate(config, spec.dataset);
  AdversarialBatch out;
  if (labels.empty()) return out;
  if (!images.defined() || images.dim(0) != labels.size())
    throw std::invalid_argument("attack_batch: image and label counts differ");
  if (chunk == 0) throw std::invalid_argument("attack_batch: chunk size must be positive");
  Frozen frozen(params);
  const std::size_t n = labels.size(), row = images.numel() / n;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<float> adv(images.numel());
  std::vector<std::string> failure(n);

  auto attack_range = [&](std::size_t begin, std::size_t count) {
    std::vector<std::size_t> bad;
    auto x = take_rows(images, begin, count);
    auto xa = attack_frozen(config, spec, frozen.get(), x, labels.subspan(begin, count), bad);
    if (bad.empty()) {
      std::copy(xa.data().begin(), xa.data().end(), adv.begin() + begin * row);
      return true;
    }
    return false;
  };
  parallel_for(chunks, resolve_threads(threads), [&](std::size_t c) {
    const std::size_t begin = c * chunk, count = std::min(chunk, n - begin);
    if (attack_range(begin, count)) return;
    // isolate the offending images one at a time
    for (std::size_t i = begin; i < begin + count; ++i)
      if (!attack_range(i, 1)) failure[i] = "non-finite input or gradient";
  });

  auto src = images.data();
  std::vector<float> kept_orig, kept_adv;
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const float> a(src.data() + i * row, row), b(adv.data() + i * row, row);
    if (failure[i].empty() && std::all_of(a.begin(), a.end(), [](float v) { return v == 0.0f; }))
      failure[i] = "zero-norm original image";
    if (!failure[i].empty()) {
      out.failures.push_back({i, failure[i]});
      continue;
    }
    kept_orig.insert(kept_orig.end(), a.begin(), a.end());
    kept_adv.insert(kept_adv.end(), b.begin(), b.end());
    out.labels.push_back(labels[i]);
    out.source.push_back(i);
    out.l2_relative.push_back(relative_l2(a, b));
  }
  if (!out.labels.empty()) {
    Shape s = images.shape();
    s[0] = out.labels.size();
    out.original = Tensor(s, std::move(kept_orig));
    out.perturbed = Tensor(s, std::move(kept_adv));
  }
  return out;
}

}  // namespace advdef::attacks
