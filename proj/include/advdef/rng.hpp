#pragma once

#include <cstdint>
#include <optional>

#include "advdef/tensor.hpp"

namespace advdef {

/// Counter-based generator. Output i of stream (seed, stream) is a pure
/// function of the three values, so any stream can be reproduced or split
/// without touching the others.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Independent generator keyed by (seed, child id) of this generator's
  /// stream; does not advance this generator.
  Rng split(std::uint64_t child) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
};

inline constexpr float kDefaultNoiseClipLo = -5.0f;
inline constexpr float kDefaultNoiseClipHi = 5.0f;

/// I.i.d. standard normal samples clamped to [clip_lo, clip_hi]. A degenerate
/// range lo == hi is allowed and yields a constant tensor.
Tensor gaussian(Rng& rng, const Shape& shape, float clip_lo = kDefaultNoiseClipLo,
                float clip_hi = kDefaultNoiseClipHi);

/// In-place Fisher-Yates shuffle driven by `rng`.
template <typename Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace advdef
