#include <algorithm>
#include <cmath>

#include "advdef/evalharness.hpp"

namespace advdef::eval {

namespace {

constexpr std::size_t kShapes = 8;
constexpr int kSuper = 4;  // supersampling per axis for anti-aliased edges

// Membership test in shape-local units (radius 1, v pointing down).
bool inside(std::size_t shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v), r = std::hypot(u, v);
  switch (shape) {
    case 0: return r <= 1.0;                                        // disc
    case 1: return std::max(au, av) <= 0.8;                         // square
    case 2: return v <= 0.5 && v >= -1.0 + std::sqrt(3.0) * au;     // triangle
    case 3: return r >= 0.55 && r <= 1.0;                           // ring
    case 4: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);  // cross
    case 5: return au + av <= 1.0;                                  // diamond
    case 6: return av <= 0.9 && std::abs(au - 0.55) <= 0.22;        // two bars
    default:                                                        // corner
      return (u >= -0.8 && u <= -0.3 && av <= 0.9) || (u >= -0.8 && u <= 0.8 && v >= 0.4 && v <= 0.9);
  }
}

std::vector<double> random_colour(Rng& rng, std::size_t channels) {
  std::vector<double> c(channels);
  for (auto& v : c) v = rng.uniform();
  return c;
}

double mean_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

void render(std::size_t shape, std::size_t h, std::size_t w, std::size_t c, Rng& rng, float* out) {
  // background: linear gradient between two colours plus a faint wave
  auto bg0 = random_colour(rng, c), bg1 = random_colour(rng, c);
  for (std::size_t k = 0; k < c; ++k) bg1[k] = std::clamp(bg0[k] + 0.4 * (bg1[k] - bg0[k]), 0.0, 1.0);
  const double theta = rng.uniform() * 2.0 * M_PI;
  const double wave_f = 0.05 + 0.1 * rng.uniform(), wave_phase = rng.uniform() * 2.0 * M_PI;
  std::vector<double> bg_mid(c);
  for (std::size_t k = 0; k < c; ++k) bg_mid[k] = 0.5 * (bg0[k] + bg1[k]);

  std::vector<double> fg = random_colour(rng, c);
  for (int tries = 0; tries < 32 && mean_abs_diff(fg, bg_mid) < 0.35; ++tries) fg = random_colour(rng, c);

  const double extent = static_cast<double>(std::min(h, w));
  const double radius = extent * (0.2 + 0.12 * rng.uniform());
  const double cy = radius + rng.uniform() * (static_cast<double>(h) - 2 * radius);
  const double cx = radius + rng.uniform() * (static_cast<double>(w) - 2 * radius);
  const double rot = (rng.uniform() - 0.5) * 0.6;
  const double cr = std::cos(rot), sr = std::sin(rot);

  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          double py = static_cast<double>(y) + (sy + 0.5) / kSuper - cy;
          double px = static_cast<double>(x) + (sx + 0.5) / kSuper - cx;
          double u = (cr * px + sr * py) / radius, v = (-sr * px + cr * py) / radius;
          hits += inside(shape, u, v);
        }
      const double alpha = static_cast<double>(hits) / (kSuper * kSuper);
      const double t = 0.5 + 0.5 * (std::cos(theta) * (x / static_cast<double>(w) - 0.5) +
                                    std::sin(theta) * (y / static_cast<double>(h) - 0.5)) * 2.0 / std::sqrt(2.0);
      const double wave = 0.04 * std::sin(wave_f * (static_cast<double>(x) + 0.7 * y) + wave_phase);
      for (std::size_t k = 0; k < c; ++k) {
        double bg = bg0[k] + (bg1[k] - bg0[k]) * t + wave;
        out[(y * w + x) * c + k] = static_cast<float>(std::clamp(bg * (1.0 - alpha) + fg[k] * alpha, 0.0, 1.0));
      }
    }
}

}  // namespace

std::vector<std::string> synth_kinds() { return {"shapes"}; }

Dataset synth_dataset(const std::string& kind, std::size_t n, std::size_t height, std::size_t width,
                      std::size_t channels, std::size_t classes, std::uint64_t seed, Split split) {
  if (kind != "shapes") throw std::invalid_argument("unknown synthetic dataset kind '" + kind + "'");
  if (classes < 2 || classes > kShapes)
    throw std::invalid_argument("synthetic shapes support 2 to " + std::to_string(kShapes) + " classes, got " +
                                std::to_string(classes));
  if (height < 8 || width < 8 || channels == 0)
    throw std::invalid_argument("synthetic images need H, W >= 8 and C >= 1");
  Dataset d;
  d.name = "synthetic-" + kind + (split == Split::train ? "-train" : "-test");
  d.classes = classes;
  d.split = split;
  if (n == 0) return d;
  const std::size_t row = height * width * channels;
  std::vector<float> px(n * row);
  d.labels.resize(n);
  // train and test draw from disjoint streams
  const std::uint64_t salt = split == Split::train ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, 2 * i + salt);
    d.labels[i] = static_cast<int>(i % classes);
    render(static_cast<std::size_t>(d.labels[i]), height, width, channels, rng, px.data() + i * row);
  }
  d.images = Tensor({n, height, width, channels}, std::move(px));
  return d;
}

}  // namespace advdef::eval
