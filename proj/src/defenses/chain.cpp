#include <algorithm>

#include "advdef/dataset.hpp"
#include "advdef/defenses.hpp"
#include "advdef/parallel.hpp"

namespace advdef::defenses {

namespace {

Shape image_shape_of(const Tensor& t) {
  if (t.rank() == 3) return t.shape();
  if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.dim(3)};
  throw std::invalid_argument("expected one [H, W, C] image, got " + shape_str(t.shape()));
}

Tensor as_batch(const Tensor& image) {
  auto s = image_shape_of(image);
  return reshape(image, {1, s[0], s[1], s[2]});
}

const VaeModel& lookup(const ModelRegistry* models, const std::string& name) {
  if (!models) throw std::invalid_argument("no model registry for VAE step '" + name + "'");
  auto it = models->find(name);
  if (it == models->end()) throw std::invalid_argument("unknown model '" + name + "'");
  return it->second;
}

void check_samples(std::size_t samples) {
  if (samples == 0) throw std::invalid_argument("samples must be at least 1");
}

Tensor run_chain(const DefenseChain& chain, const Tensor& image, const Rng& rng, const DefenseContext& ctx);

// One step on a single image [1, H, W, C].
Tensor run_step(const Transform& t, const Tensor& image, Rng& rng, const DefenseContext& ctx) {
  switch (t.kind) {
    case TransformKind::vae_whole:
      return vae_reconstruct_whole(lookup(ctx.models, t.model), image, rng, t.samples);
    case TransformKind::vae_patch: {
      const auto& vae = lookup(ctx.models, t.model);
      if (t.patch != 0 && t.patch != vae.spec.input[0])
        throw std::invalid_argument("patch size " + std::to_string(t.patch) + " does not match model '" + t.model +
                                    "' input " + shape_str(vae.spec.input));
      return as_batch(vae_reconstruct_patchwise(vae, image, t.stride, rng, false, t.samples));
    }
    case TransformKind::smooth5x5:
      return smooth5x5(image, t.kernel);
    case TransformKind::dct_quant:
      return dct_quant_defense(image, t.quality, t.colour);
    case TransformKind::ensemble: {
      if (t.members.empty()) throw std::invalid_argument("ensemble without members");
      std::vector<Tensor> outs;
      for (std::size_t j = 0; j < t.members.size(); ++j) outs.push_back(run_chain(t.members[j], image, rng.split(j), ctx));
      return ensemble_average(outs);
    }
  }
  throw std::logic_error("unhandled transform kind");
}

Tensor run_chain(const DefenseChain& chain, const Tensor& image, const Rng& rng, const DefenseContext& ctx) {
  Tensor cur = image;
  for (std::size_t s = 0; s < chain.steps.size(); ++s) {
    Rng step_rng = rng.split(s);
    try {
      cur = run_step(chain.steps[s], cur, step_rng, ctx);
    } catch (const DefenseError&) {
      throw;
    } catch (const std::exception& e) {
      throw DefenseError(chain.name, s, e.what());
    }
  }
  return cur;
}

void validate_step(const DefenseChain& chain, std::size_t s, const ModelRegistry& models) {
  const Transform& t = chain.steps[s];
  auto fail = [&](const std::string& what) { throw DefenseError(chain.name, s, what); };
  switch (t.kind) {
    case TransformKind::vae_whole:
    case TransformKind::vae_patch: {
      if (t.samples == 0) fail("samples must be at least 1");
      auto it = models.find(t.model);
      if (it == models.end()) fail("unknown model '" + t.model + "'");
      const auto& in = it->second.spec.input;
      if (t.kind == TransformKind::vae_patch) {
        if (in.size() != 3 || in[0] != in[1]) fail("model '" + t.model + "' does not take square patches");
        if (t.patch != 0 && t.patch != in[0])
          fail("patch size " + std::to_string(t.patch) + " does not match model input " + shape_str(in));
        std::size_t p = t.patch ? t.patch : in[0];
        if (t.stride < 1 || t.stride > p) fail("stride " + std::to_string(t.stride) + " outside [1, patch]");
      }
      break;
    }
    case TransformKind::smooth5x5:
      break;
    case TransformKind::dct_quant:
      if (t.quality < 1 || t.quality > 100) fail("dct quality " + std::to_string(t.quality) + " outside [1, 100]");
      break;
    case TransformKind::ensemble:
      if (t.members.empty()) fail("ensemble without members");
      for (const auto& m : t.members) {
        try {
          validate(m, models);
        } catch (const std::exception& e) {
          fail(std::string("ensemble member: ") + e.what());
        }
      }
      break;
  }
}

}  // namespace

Tensor vae_reconstruct_whole(const VaeModel& vae, const Tensor& images, Rng& rng, std::size_t samples) {
  check_samples(samples);
  if (images.rank() != vae.spec.input.size() + 1 ||
      !std::equal(vae.spec.input.begin(), vae.spec.input.end(), images.shape().begin() + 1))
    throw std::invalid_argument("vae '" + vae.spec.name + "' expects input " + shape_str(vae.spec.input) + ", got " +
                                shape_str(images.shape()));
  NoGradGuard no_grad;
  if (samples == 1) return models::vae_reconstruct(vae.spec, vae.params, images, rng).detach();
  std::vector<Tensor> outs;
  for (std::size_t k = 0; k < samples; ++k) outs.push_back(models::vae_reconstruct(vae.spec, vae.params, images, rng));
  return ensemble_average(outs);
}

Tensor vae_reconstruct_patchwise(const VaeModel& vae, const Tensor& image, std::size_t stride, Rng& rng, bool smooth,
                                 std::size_t samples) {
  const auto& in = vae.spec.input;
  if (in.size() != 3 || in[0] != in[1])
    throw std::invalid_argument("vae '" + vae.spec.name + "' does not take square patches");
  auto dims = image_shape_of(image);
  if (dims[2] != in[2])
    throw std::invalid_argument("image has " + std::to_string(dims[2]) + " channels, vae '" + vae.spec.name +
                                "' expects " + std::to_string(in[2]));
  return reconstruct_patchwise(
      image, in[0], stride, [&](const Tensor& p) { return vae_reconstruct_whole(vae, p, rng, samples); }, smooth);
}

Tensor reconstruct_patchwise(const Tensor& image, std::size_t patch, std::size_t stride, const PatchFn& fn,
                             bool smooth) {
  auto patches = extract_patches(image, patch, stride);
  auto rec = fn(patches.patches);
  if (rec.shape() != patches.patches.shape())
    throw std::invalid_argument("patch reconstruction changed shape " + shape_str(patches.patches.shape()) + " to " +
                                shape_str(rec.shape()));
  auto out = stitch_patches(patches.grid, rec);
  return smooth ? smooth5x5(out) : out;
}

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::vae_whole: return "vae_whole";
    case TransformKind::vae_patch: return "vae_patch";
    case TransformKind::smooth5x5: return "smooth5x5";
    case TransformKind::dct_quant: return "dct_quant";
    case TransformKind::ensemble: return "ensemble";
  }
  return "?";
}

TransformKind transform_kind_from_string(const std::string& s) {
  for (auto k : {TransformKind::vae_whole, TransformKind::vae_patch, TransformKind::smooth5x5, TransformKind::dct_quant,
                 TransformKind::ensemble})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown transform '" + s + "'");
}

Transform Transform::vae_whole(std::string model) {
  Transform t;
  t.kind = TransformKind::vae_whole;
  t.model = std::move(model);
  return t;
}

Transform Transform::vae_patch(std::string model, std::size_t patch, std::size_t stride) {
  Transform t;
  t.kind = TransformKind::vae_patch;
  t.model = std::move(model);
  t.patch = patch;
  t.stride = stride;
  return t;
}

Transform Transform::smooth() { return Transform{}; }

Transform Transform::dct_quant(int quality) {
  Transform t;
  t.kind = TransformKind::dct_quant;
  t.quality = quality;
  return t;
}

Transform Transform::ensemble(std::vector<DefenseChain> members) {
  Transform t;
  t.kind = TransformKind::ensemble;
  t.members = std::move(members);
  return t;
}

bool Transform::operator==(const Transform& o) const {
  return kind == o.kind && model == o.model && patch == o.patch && stride == o.stride && samples == o.samples &&
         quality == o.quality && colour == o.colour && kernel == o.kernel && members == o.members;
}

DefenseError::DefenseError(const std::string& chain, std::size_t step, const std::string& what)
    : std::runtime_error("defense '" + chain + "' step " + std::to_string(step) + ": " + what), step_(step) {}

void validate(const DefenseChain& chain, const ModelRegistry& models) {
  for (std::size_t s = 0; s < chain.steps.size(); ++s) validate_step(chain, s, models);
}

Tensor apply_chain(const DefenseChain& chain, const Tensor& images, const DefenseContext& ctx) {
  if (images.rank() != 4) throw std::invalid_argument("apply_chain: expected [N, H, W, C], got " + shape_str(images.shape()));
  if (ctx.models) validate(chain, *ctx.models);
  const std::size_t n = images.dim(0);
  if (chain.steps.empty() || n == 0) return images.detach();
  const std::size_t row = images.numel() / n;
  std::vector<float> out(images.numel());
  parallel_for(n, resolve_threads(ctx.threads), [&](std::size_t i) {
    auto res = run_chain(chain, take_rows(images, i, 1), Rng(ctx.seed, i), ctx);
    if (res.numel() != row)
      throw DefenseError(chain.name, chain.steps.size() - 1, "output shape " + shape_str(res.shape()) + " differs from input");
    std::copy(res.data().begin(), res.data().end(), out.begin() + i * row);
  });
  return Tensor(images.shape(), std::move(out));
}

}  // namespace advdef::defenses
