#include <algorithm>
#include <cmath>
#include <numbers>

#include "advdef/defenses.hpp"

namespace advdef::defenses {

namespace {

// basis[u][x] = a(u) cos((2x + 1) u pi / 16), orthonormal rows
const std::array<std::array<double, 8>, 8>& basis() {
  static const auto table = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x)
        b[u][x] = (u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0)) *
                  std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    return b;
  }();
  return table;
}

// out = B * in * B^T (forward) or B^T * in * B (inverse)
Block transform(const Block& in, bool inverse) {
  const auto& b = basis();
  std::array<double, 64> tmp{};
  for (int u = 0; u < 8; ++u)
    for (int y = 0; y < 8; ++y) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += (inverse ? b[x][u] : b[u][x]) * in[x * 8 + y];
      tmp[u * 8 + y] = s;
    }
  Block out{};
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += tmp[u * 8 + y] * (inverse ? b[y][v] : b[v][y]);
      out[u * 8 + v] = static_cast<float>(s);
    }
  return out;
}

Block to_block(std::span<const float> values) {
  if (values.size() != 64) throw std::invalid_argument("dct8x8: expected 64 values, got " + std::to_string(values.size()));
  Block b;
  std::copy(values.begin(), values.end(), b.begin());
  return b;
}

std::array<int, 64> scaled(const std::array<int, 64>& base, int quality) {
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> out{};
  for (int i = 0; i < 64; ++i) out[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
  return out;
}

void rgb_to_ycbcr(float r, float g, float b, float& y, float& cb, float& cr) {
  y = 0.299f * r + 0.587f * g + 0.114f * b;
  cb = -0.168736f * r - 0.331264f * g + 0.5f * b + 128.0f;
  cr = 0.5f * r - 0.418688f * g - 0.081312f * b + 128.0f;
}

void ycbcr_to_rgb(float y, float cb, float cr, float& r, float& g, float& b) {
  r = y + 1.402f * (cr - 128.0f);
  g = y - 0.344136f * (cb - 128.0f) - 0.714136f * (cr - 128.0f);
  b = y + 1.772f * (cb - 128.0f);
}

// Quantises one plane (values in 0..255) in place.
void quantise_plane(std::vector<float>& plane, std::size_t h, std::size_t w, const std::array<int, 64>& table) {
  std::vector<float> out(plane.size());
  for (std::size_t by = 0; by < h; by += 8)
    for (std::size_t bx = 0; bx < w; bx += 8) {
      Block blk;
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          std::size_t yy = std::min(by + y, h - 1), xx = std::min(bx + x, w - 1);
          blk[y * 8 + x] = plane[yy * w + xx] - 128.0f;
        }
      Block coef = dct8x8(blk);
      for (int i = 0; i < 64; ++i) coef[i] = std::round(coef[i] / static_cast<float>(table[i])) * table[i];
      Block pix = idct8x8(coef);
      for (std::size_t y = 0; y < 8 && by + y < h; ++y)
        for (std::size_t x = 0; x < 8 && bx + x < w; ++x) out[(by + y) * w + bx + x] = pix[y * 8 + x] + 128.0f;
    }
  plane = std::move(out);
}

}  // namespace

Block dct8x8(const Block& block) { return transform(block, false); }
Block idct8x8(const Block& coefficients) { return transform(coefficients, true); }
Block dct8x8(std::span<const float> block) { return dct8x8(to_block(block)); }
Block idct8x8(std::span<const float> coefficients) { return idct8x8(to_block(coefficients)); }

const std::array<int, 64>& QuantTables::base_luminance() {
  static const std::array<int, 64> t = {
      16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
      69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55,  64,
      81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  return t;
}

const std::array<int, 64>& QuantTables::base_chrominance() {
  static const std::array<int, 64> t = [] {
    std::array<int, 64> c;
    c.fill(99);
    const int top[4][4] = {{17, 18, 24, 47}, {18, 21, 26, 66}, {24, 26, 56, 99}, {47, 66, 99, 99}};
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) c[y * 8 + x] = top[y][x];
    return c;
  }();
  return t;
}

QuantTables QuantTables::for_quality(int quality) {
  if (quality < 1 || quality > 100)
    throw std::invalid_argument("dct quality " + std::to_string(quality) + " outside [1, 100]");
  return {scaled(base_luminance(), quality), scaled(base_chrominance(), quality), quality};
}

Tensor dct_quant_defense(const Tensor& image, int quality, ColourMode mode) {
  const auto tables = QuantTables::for_quality(quality);
  if (image.rank() != 3 && image.rank() != 4)
    throw std::invalid_argument("dct_quant: expected [H, W, C] or [N, H, W, C], got " + shape_str(image.shape()));
  const std::size_t off = image.rank() == 4 ? 1 : 0;
  const std::size_t n = off ? image.dim(0) : 1, h = image.dim(off), w = image.dim(off + 1), c = image.dim(off + 2);
  if (mode == ColourMode::ycbcr && c != 3) throw std::invalid_argument("dct_quant: ycbcr mode needs 3 channels");

  auto src = image.data();
  std::vector<float> out(image.numel());
  std::vector<std::vector<float>> planes(c, std::vector<float>(h * w));
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t base = b * h * w * c;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (mode == ColourMode::ycbcr) {
        const float* p = src.data() + base + i * 3;
        rgb_to_ycbcr(p[0] * 255.0f, p[1] * 255.0f, p[2] * 255.0f, planes[0][i], planes[1][i], planes[2][i]);
      } else {
        for (std::size_t ch = 0; ch < c; ++ch) planes[ch][i] = src[base + i * c + ch] * 255.0f;
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      bool chroma = mode == ColourMode::ycbcr && ch > 0;
      quantise_plane(planes[ch], h, w, chroma ? tables.chrominance : tables.luminance);
    }
    for (std::size_t i = 0; i < h * w; ++i) {
      float px[3];
      if (mode == ColourMode::ycbcr) ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i], px[0], px[1], px[2]);
      for (std::size_t ch = 0; ch < c; ++ch) {
        float v = mode == ColourMode::ycbcr ? px[ch] : planes[ch][i];
        out[base + i * c + ch] = std::clamp(v / 255.0f, 0.0f, 1.0f);
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

}  // namespace advdef::defenses
