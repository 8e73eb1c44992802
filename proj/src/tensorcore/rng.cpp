#include "advdef/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace advdef {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(mix64(seed + kGolden) ^ mix64(stream * kGolden + 1))) {}

std::uint64_t Rng::next_u64() { return mix64(key_ + kGolden * ++counter_); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  // rejection sampling keeps the result unbiased
  std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do v = next_u64();
  while (v >= limit);
  return v % n;
}

double Rng::normal() {
  if (spare_normal_) {
    double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  // Box-Muller; 1 - u keeps the log argument in (0, 1]
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  return r * std::cos(theta);
}

Rng Rng::split(std::uint64_t child) const { return Rng(seed_, mix64(stream_ * kGolden + child + 0x5851F42D4C957F2DULL)); }

Tensor gaussian(Rng& rng, const Shape& shape, float clip_lo, float clip_hi) {
  if (!(clip_lo <= clip_hi)) throw std::invalid_argument("gaussian: clip_lo must not exceed clip_hi");
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) {
    auto s = static_cast<float>(rng.normal());
    v = s < clip_lo ? clip_lo : (s > clip_hi ? clip_hi : s);
  }
  return Tensor(shape, std::move(data));
}

}  // namespace advdef
