#pragma once

#include <array>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdef/models.hpp"

namespace advdef::defenses {

// ---- patches -----------------------------------------------------------------

/// Top-left anchors of p x p patches at stride s over an H x W x C image. The
/// last anchor in each direction is clamped to H - p (W - p) so every pixel
/// is covered. Anchors are ordered row-major.
struct PatchGrid {
  std::size_t patch = 0;
  std::size_t stride = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::pair<std::size_t, std::size_t>> anchors;  // (row, col)

  static PatchGrid make(std::size_t height, std::size_t width, std::size_t channels, std::size_t patch,
                        std::size_t stride);
  /// Number of patches covering each pixel, row-major H x W.
  std::vector<std::size_t> coverage() const;
};

struct Patches {
  PatchGrid grid;
  Tensor patches;  // [anchors, p, p, C]
};

/// `image` is [H, W, C] or [1, H, W, C].
Patches extract_patches(const Tensor& image, std::size_t patch, std::size_t stride);
/// Average of the covering patches at every pixel; returns [H, W, C].
Tensor stitch_patches(const PatchGrid& grid, const Tensor& patches);

// ---- filters -----------------------------------------------------------------

enum class SmoothKernel { uniform, gaussian };

/// Per-channel 5x5 filter with edge replication. Accepts [H, W, C] or a
/// batch [N, H, W, C]. The uniform kernel is the plain 5x5 mean; the
/// gaussian one uses sigma = 1, normalised to unit sum.
Tensor smooth5x5(const Tensor& image, SmoothKernel kernel = SmoothKernel::uniform);

/// Pixelwise mean of equally shaped images.
Tensor ensemble_average(const std::vector<Tensor>& images);

// ---- block dct -----------------------------------------------------------------

using Block = std::array<float, 64>;

/// Orthonormal 2-D type-II DCT of a row-major 8x8 block, and its inverse.
Block dct8x8(const Block& block);
Block idct8x8(const Block& coefficients);
/// Same, checking that the span holds exactly 64 values.
Block dct8x8(std::span<const float> block);
Block idct8x8(std::span<const float> coefficients);

struct QuantTables {
  std::array<int, 64> luminance{};
  std::array<int, 64> chrominance{};
  int quality = 50;

  /// Standard base tables scaled by quality: 5000 / q below 50, 200 - 2q
  /// otherwise, each entry clamped to [1, 255].
  static QuantTables for_quality(int quality);
  static const std::array<int, 64>& base_luminance();
  static const std::array<int, 64>& base_chrominance();
};

enum class ColourMode {
  rgb,    // every channel quantised with the luminance table
  ycbcr,  // luma/chroma tables after a YCbCr conversion, no subsampling
};

/// Quantises 8x8 block DCT coefficients of every channel and transforms back.
/// Pixels are mapped to [-128, 127] first; edge blocks are padded by
/// replication and cropped afterwards. Accepts [H, W, C] or [N, H, W, C].
Tensor dct_quant_defense(const Tensor& image, int quality, ColourMode mode = ColourMode::rgb);

// ---- vae purification -------------------------------------------------------------

struct VaeModel {
  models::VaeSpec spec;
  models::ParamStore params;
};

/// decode(sample(encode(x))) on a batch [N, ...input]. With `samples` > 1 the
/// reconstructions are averaged.
Tensor vae_reconstruct_whole(const VaeModel& vae, const Tensor& images, Rng& rng, std::size_t samples = 1);

/// Maps a batch of patches [K, p, p, C] to reconstructions of the same shape.
using PatchFn = std::function<Tensor(const Tensor& patches)>;

/// extract -> fn -> stitch -> optional smooth5x5 on an [H, W, C] image.
Tensor reconstruct_patchwise(const Tensor& image, std::size_t patch, std::size_t stride, const PatchFn& fn,
                             bool smooth);

/// Reconstructs an [H, W, C] image patch by patch with the VAE's input size,
/// averages overlaps and optionally applies the 5x5 smoothing filter.
Tensor vae_reconstruct_patchwise(const VaeModel& vae, const Tensor& image, std::size_t stride, Rng& rng,
                                 bool smooth, std::size_t samples = 1);

// ---- chains -----------------------------------------------------------------

enum class TransformKind { vae_whole, vae_patch, smooth5x5, dct_quant, ensemble };
std::string to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& s);

struct DefenseChain;

struct Transform {
  TransformKind kind = TransformKind::smooth5x5;
  std::string model;         // vae_whole, vae_patch: key into the model registry
  std::size_t patch = 0;     // vae_patch: must match the model input
  std::size_t stride = 0;    // vae_patch
  std::size_t samples = 1;   // vae_*: reconstructions averaged per image
  int quality = 50;          // dct_quant
  ColourMode colour = ColourMode::rgb;
  SmoothKernel kernel = SmoothKernel::uniform;
  std::vector<DefenseChain> members;  // ensemble

  static Transform vae_whole(std::string model);
  static Transform vae_patch(std::string model, std::size_t patch, std::size_t stride);
  static Transform smooth();
  static Transform dct_quant(int quality);
  static Transform ensemble(std::vector<DefenseChain> members);

  bool operator==(const Transform&) const;
};

/// Named left-to-right composition of transforms. No steps means identity.
struct DefenseChain {
  std::string name;
  std::vector<Transform> steps;

  bool operator==(const DefenseChain&) const = default;
};

using ModelRegistry = std::map<std::string, VaeModel>;

/// Raised when a chain step fails; names the chain and the step index.
class DefenseError : public std::runtime_error {
 public:
  DefenseError(const std::string& chain, std::size_t step, const std::string& what);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct DefenseContext {
  const ModelRegistry* models = nullptr;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Checks model references, patch sizes and parameters against the registry
/// without running anything.
void validate(const DefenseChain& chain, const ModelRegistry& models);

/// Applies the chain to every image of a batch [N, H, W, C]. Image i draws
/// its randomness from stream (seed, i), split per step, so the output does
/// not depend on `threads`.
Tensor apply_chain(const DefenseChain& chain, const Tensor& images, const DefenseContext& ctx);

}  // namespace advdef::defenses
