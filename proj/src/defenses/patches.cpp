#include <algorithm>

#include "advdef/defenses.hpp"

namespace advdef::defenses {

namespace {

std::vector<std::size_t> positions(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t a = 0;; a += stride) {
    out.push_back(std::min(a, extent - patch));
    if (a + patch >= extent) break;
  }
  return out;
}

// View an [H, W, C] or [1, H, W, C] image as (H, W, C).
Shape image_dims(const Tensor& image, const char* who) {
  if (image.rank() == 3) return image.shape();
  if (image.rank() == 4 && image.dim(0) == 1) return {image.dim(1), image.dim(2), image.dim(3)};
  throw std::invalid_argument(std::string(who) + ": expected one [H, W, C] image, got " + shape_str(image.shape()));
}

}  // namespace

PatchGrid PatchGrid::make(std::size_t height, std::size_t width, std::size_t channels, std::size_t patch,
                          std::size_t stride) {
  if (patch == 0 || patch > std::min(height, width))
    throw std::invalid_argument("patch size " + std::to_string(patch) + " does not fit a " + std::to_string(height) +
                                "x" + std::to_string(width) + " image");
  if (stride < 1 || stride > patch)
    throw std::invalid_argument("stride " + std::to_string(stride) + " outside [1, " + std::to_string(patch) + "]");
  PatchGrid g{patch, stride, height, width, channels, {}};
  for (auto r : positions(height, patch, stride))
    for (auto c : positions(width, patch, stride)) g.anchors.emplace_back(r, c);
  return g;
}

std::vector<std::size_t> PatchGrid::coverage() const {
  std::vector<std::size_t> count(height * width, 0);
  for (auto [r0, c0] : anchors)
    for (std::size_t r = r0; r < r0 + patch; ++r)
      for (std::size_t c = c0; c < c0 + patch; ++c) ++count[r * width + c];
  return count;
}

Patches extract_patches(const Tensor& image, std::size_t patch, std::size_t stride) {
  auto dims = image_dims(image, "extract_patches");
  Patches out{PatchGrid::make(dims[0], dims[1], dims[2], patch, stride), Tensor()};
  const auto& g = out.grid;
  const std::size_t row = patch * g.channels;
  std::vector<float> data(g.anchors.size() * patch * row);
  auto src = image.data();
  for (std::size_t k = 0; k < g.anchors.size(); ++k) {
    auto [r0, c0] = g.anchors[k];
    for (std::size_t r = 0; r < patch; ++r)
      std::copy_n(src.begin() + ((r0 + r) * g.width + c0) * g.channels, row, data.begin() + (k * patch + r) * row);
  }
  out.patches = Tensor({g.anchors.size(), patch, patch, g.channels}, std::move(data));
  return out;
}

Tensor stitch_patches(const PatchGrid& grid, const Tensor& patches) {
  const Shape expect{grid.anchors.size(), grid.patch, grid.patch, grid.channels};
  if (patches.shape() != expect)
    throw std::invalid_argument("stitch_patches: got " + shape_str(patches.shape()) + ", grid expects " +
                                shape_str(expect));
  const std::size_t p = grid.patch, c = grid.channels;
  std::vector<double> acc(grid.height * grid.width * c, 0.0);
  auto src = patches.data();
  for (std::size_t k = 0; k < grid.anchors.size(); ++k) {
    auto [r0, c0] = grid.anchors[k];
    for (std::size_t r = 0; r < p; ++r)
      for (std::size_t x = 0; x < p * c; ++x) acc[((r0 + r) * grid.width + c0) * c + x] += src[(k * p + r) * p * c + x];
  }
  auto count = grid.coverage();
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(count[i / c]));
  return Tensor({grid.height, grid.width, c}, std::move(out));
}

}  // namespace advdef::defenses
