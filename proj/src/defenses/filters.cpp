#include <algorithm>
#include <cmath>

#include "advdef/defenses.hpp"

namespace advdef::defenses {

namespace {

std::array<double, 25> kernel_weights(SmoothKernel kernel) {
  std::array<double, 25> w{};
  if (kernel == SmoothKernel::uniform) {
    w.fill(1.0);
  } else {
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) w[(dy + 2) * 5 + dx + 2] = std::exp(-0.5 * (dx * dx + dy * dy));
  }
  return w;
}

}  // namespace

Tensor smooth5x5(const Tensor& image, SmoothKernel kernel) {
  if (image.rank() != 3 && image.rank() != 4)
    throw std::invalid_argument("smooth5x5: expected [H, W, C] or [N, H, W, C], got " + shape_str(image.shape()));
  const bool batched = image.rank() == 4;
  const std::size_t n = batched ? image.dim(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  const std::size_t h = image.dim(off), w = image.dim(off + 1), c = image.dim(off + 2);
  const auto weights = kernel_weights(kernel);
  double total = 0.0;
  for (double v : weights) total += v;

  auto src = image.data();
  std::vector<float> out(image.numel());
  auto clamp_idx = [](long v, std::size_t extent) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(extent) - 1));
  };
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t base = b * h * w * c;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int dy = -2; dy <= 2; ++dy) {
            std::size_t yy = clamp_idx(static_cast<long>(y) + dy, h);
            for (int dx = -2; dx <= 2; ++dx) {
              std::size_t xx = clamp_idx(static_cast<long>(x) + dx, w);
              acc += weights[(dy + 2) * 5 + dx + 2] * src[base + (yy * w + xx) * c + ch];
            }
          }
          out[base + (y * w + x) * c + ch] = static_cast<float>(acc / total);
        }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor ensemble_average(const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("ensemble_average: no images");
  std::vector<double> acc(images[0].numel(), 0.0);
  for (const auto& img : images) {
    if (img.shape() != images[0].shape())
      throw std::invalid_argument("ensemble_average: shape " + shape_str(img.shape()) + " differs from " +
                                  shape_str(images[0].shape()));
    auto d = img.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(images.size()));
  return Tensor(images[0].shape(), std::move(out));
}

}  // namespace advdef::defenses
