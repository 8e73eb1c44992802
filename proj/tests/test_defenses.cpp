#include <cmath>
#include <numbers>

#include "advdef/defenses.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace advdef;
using namespace advdef::defenses;
using advdef::testing::random_tensor;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor image(Rng& rng, std::size_t h, std::size_t w, std::size_t c) { return random_tensor(rng, {h, w, c}, 0, 1, false); }

// Brute force: count the anchors whose p x p window contains (r, c).
std::vector<std::size_t> brute_coverage(const PatchGrid& g) {
  std::vector<std::size_t> out(g.height * g.width, 0);
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c)
      for (auto [ar, ac] : g.anchors)
        if (r >= ar && r < ar + g.patch && c >= ac && c < ac + g.patch) ++out[r * g.width + c];
  return out;
}

// Smooth-ish test picture: gradients plus low-frequency waves.
Tensor natural_image(std::size_t h, std::size_t w, std::size_t c) {
  std::vector<float> v(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        v[(y * w + x) * c + ch] = static_cast<float>(
            0.5 + 0.25 * std::sin(0.15 * x + ch) * std::cos(0.1 * y) + 0.2 * (static_cast<double>(x + y) / (h + w) - 0.5));
  return Tensor({h, w, c}, std::move(v));
}

double psnr(const Tensor& a, const Tensor& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) se += std::pow(static_cast<double>(a[i]) - b[i], 2);
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.numel())));
}

models::VaeSpec tiny_vae() {
  models::VaeSpec v;
  v.name = "tiny";
  v.input = {8, 8, 1};
  v.latent = 4;
  v.encoder = {nn::LayerSpec::flatten(), nn::LayerSpec::dense("e_out", 8, nn::Activation::none)};
  v.decoder = {nn::LayerSpec::dense("d_in", 64, nn::Activation::none), nn::LayerSpec::reshape({8, 8, 1})};
  return v;
}

ModelRegistry tiny_registry() {
  ModelRegistry reg;
  auto spec = tiny_vae();
  reg.emplace("tiny", VaeModel{spec, models::init_vae(spec, 3)});
  return reg;
}

}  // namespace

TEST_CASE("patch grid geometry") {
  auto g = PatchGrid::make(5, 5, 1, 3, 1);
  CHECK(g.anchors.size() == 9);
  CHECK(g.coverage()[2 * 5 + 2] == 9);
  CHECK(g.coverage() == brute_coverage(g));

  auto tiles = PatchGrid::make(64, 64, 3, 32, 32);
  REQUIRE(tiles.anchors.size() == 4);
  for (auto n : tiles.coverage()) CHECK(n == 1);

  auto whole = PatchGrid::make(16, 16, 1, 16, 4);
  CHECK(whole.anchors.size() == 1);

  // non-divisible extent: the last anchor is clamped to H - p
  auto clamped = PatchGrid::make(10, 7, 1, 4, 3);
  CHECK(clamped.anchors.back() == std::pair<std::size_t, std::size_t>{6, 3});
  for (auto n : clamped.coverage()) CHECK(n >= 1);

  auto interior = PatchGrid::make(128, 128, 1, 32, 16);
  auto cov = interior.coverage();
  for (std::size_t r = 32; r < 96; ++r)
    for (std::size_t c = 32; c < 96; ++c) CHECK(cov[r * 128 + c] == 4);

  CHECK_THROWS_AS(PatchGrid::make(5, 5, 1, 6, 1), std::invalid_argument);
  CHECK_THROWS_AS(PatchGrid::make(5, 5, 1, 3, 4), std::invalid_argument);
  CHECK_THROWS_AS(PatchGrid::make(5, 5, 1, 3, 0), std::invalid_argument);
}

TEST_CASE("stitch of extracted patches is the identity") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t h = 1 + rng.below(20), w = 1 + rng.below(20), c = 1 + rng.below(3);
    std::size_t p = 1 + rng.below(std::min(h, w));
    std::size_t s = 1 + rng.below(p);
    auto x = image(rng, h, w, c);
    auto parts = extract_patches(x, p, s);
    CHECK(parts.grid.coverage() == brute_coverage(parts.grid));
    CHECK(values(stitch_patches(parts.grid, parts.patches)) == values(x));
  }
}

TEST_CASE("stitch averages overlapping patches") {
  auto g2 = PatchGrid::make(2, 3, 1, 2, 1);  // anchors at columns 0 and 1
  auto res = stitch_patches(g2, Tensor({2, 2, 2, 1}, {0, 0, 0, 0, 1, 1, 1, 1}));
  CHECK(values(res) == std::vector<float>{0, 0.5f, 1, 0, 0.5f, 1});
  CHECK_THROWS_AS(stitch_patches(g2, Tensor::zeros({3, 2, 2, 1})), std::invalid_argument);
  CHECK_THROWS_AS(extract_patches(Tensor::zeros({4, 4}), 2, 1), std::invalid_argument);
}

TEST_CASE("5x5 smoothing") {
  auto constant = Tensor::full({9, 7, 2}, 0.3f);
  auto flat = smooth5x5(constant);
  for (float v : flat.data()) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));

  std::vector<float> px(21 * 21, 0.0f);
  px[10 * 21 + 10] = 1.0f;
  auto impulse = Tensor({21, 21, 1}, px);
  auto out = smooth5x5(impulse);
  for (std::size_t r = 0; r < 21; ++r)
    for (std::size_t c = 0; c < 21; ++c) {
      bool inside = r >= 8 && r <= 12 && c >= 8 && c <= 12;
      CHECK(out[r * 21 + c] == doctest::Approx(inside ? 1.0 / 25.0 : 0.0).epsilon(1e-6));
    }
  // smoothing twice spreads the impulse further
  CHECK(values(smooth5x5(out)) != values(out));

  // shift equivariance away from the borders
  std::vector<float> shifted(21 * 21, 0.0f);
  shifted[11 * 21 + 9] = 1.0f;
  auto out2 = smooth5x5(Tensor({21, 21, 1}, shifted));
  for (std::size_t r = 3; r < 17; ++r)
    for (std::size_t c = 3; c < 17; ++c) CHECK(out2[(r + 1) * 21 + (c - 1)] == out[r * 21 + c]);

  // periodic image: every interior output equals the mean of one period
  const std::size_t n = 40;
  Rng rng(3);
  auto tile = image(rng, 5, 5, 1);
  std::vector<float> big(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) big[r * n + c] = tile[(r % 5) * 5 + c % 5];
  double global = 0.0;
  for (float v : big) global += v;
  global /= static_cast<double>(big.size());
  auto sm = smooth5x5(Tensor({n, n, 1}, big));
  double interior = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 2; r < n - 2; ++r)
    for (std::size_t c = 2; c < n - 2; ++c, ++count) interior += sm[r * n + c];
  CHECK(std::abs(interior / count - global) < 1e-6);

  auto gauss = smooth5x5(impulse, SmoothKernel::gaussian);
  double total = 0.0;
  for (float v : gauss.data()) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(gauss[10 * 21 + 10] > gauss[10 * 21 + 12]);

  auto batch = Tensor::full({2, 6, 6, 3}, 0.5f);
  CHECK(smooth5x5(batch).shape() == batch.shape());
}

TEST_CASE("ensemble average") {
  Rng rng(4);
  auto x = image(rng, 4, 4, 2);
  CHECK(values(ensemble_average({x})) == values(x));
  CHECK(values(ensemble_average({x, x, x, x})) == values(x));
  auto half = ensemble_average({Tensor::zeros({3, 3, 1}), Tensor::full({3, 3, 1}, 1.0f)});
  for (float v : half.data()) CHECK(v == 0.5f);
  CHECK_THROWS_AS(ensemble_average({}), std::invalid_argument);
  CHECK_THROWS_AS(ensemble_average({x, Tensor::zeros({4, 4, 1})}), std::invalid_argument);
}

TEST_CASE("8x8 dct") {
  Block c;
  c.fill(3.0f);
  auto d = dct8x8(c);
  CHECK(d[0] == doctest::Approx(24.0f).epsilon(1e-6));
  for (int i = 1; i < 64; ++i) CHECK(std::abs(d[i]) < 1e-5f);

  Block zero{};
  auto dz = dct8x8(zero);
  for (float v : dz) CHECK(v == 0.0f);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Block b;
    for (auto& v : b) v = static_cast<float>(rng.uniform() * 255.0 - 128.0);
    auto coef = dct8x8(b);
    auto back = idct8x8(coef);
    double n0 = 0, n1 = 0;
    for (int i = 0; i < 64; ++i) {
      CHECK(std::abs(back[i] - b[i]) < 1e-4f * 128.0f);
      n0 += double(b[i]) * b[i];
      n1 += double(coef[i]) * coef[i];
    }
    CHECK(std::sqrt(n1) == doctest::Approx(std::sqrt(n0)).epsilon(1e-4));
  }
  // unit-range blocks meet the absolute tolerance directly
  Block u;
  for (auto& v : u) v = static_cast<float>(rng.uniform() - 0.5);
  auto ub = idct8x8(dct8x8(u));
  for (int i = 0; i < 64; ++i) CHECK(std::abs(ub[i] - u[i]) < 1e-4f);

  std::vector<float> wrong(63);
  CHECK_THROWS_AS(dct8x8(std::span<const float>(wrong)), std::invalid_argument);
}

TEST_CASE("quantisation tables") {
  auto q50 = QuantTables::for_quality(50);
  CHECK(q50.luminance == QuantTables::base_luminance());
  CHECK(q50.chrominance == QuantTables::base_chrominance());
  for (int q : {1, 10, 23, 75, 100}) {
    auto t = QuantTables::for_quality(q);
    for (int v : t.luminance) CHECK((v >= 1 && v <= 255));
    for (int v : t.chrominance) CHECK((v >= 1 && v <= 255));
  }
  for (int v : QuantTables::for_quality(100).luminance) CHECK(v == 1);
  CHECK(QuantTables::for_quality(10).luminance[0] == 80);  // 16 * 500 / 100
  CHECK_THROWS_AS(QuantTables::for_quality(0), std::invalid_argument);
  CHECK_THROWS_AS(QuantTables::for_quality(101), std::invalid_argument);
}

TEST_CASE("dct quantisation defense") {
  auto x = natural_image(37, 45, 3);
  auto hi = dct_quant_defense(x, 100);
  CHECK(hi.shape() == x.shape());
  CHECK(psnr(x, hi) >= 40.0);
  CHECK(psnr(x, dct_quant_defense(x, 100, ColourMode::ycbcr)) >= 40.0);
  auto lo = dct_quant_defense(x, 10);
  CHECK(psnr(x, lo) < psnr(x, hi));
  for (float v : lo.data()) CHECK((v >= 0.0f && v <= 1.0f));

  // at quality 100 every coefficient moves by at most half a step
  auto g = natural_image(16, 16, 1);
  auto q = dct_quant_defense(g, 100);
  Block a, b;
  for (int i = 0; i < 64; ++i) {
    a[i] = g[(i / 8) * 16 + i % 8] * 255.0f - 128.0f;
    b[i] = q[(i / 8) * 16 + i % 8] * 255.0f - 128.0f;
  }
  auto ca = dct8x8(a), cb = dct8x8(b);
  for (int i = 0; i < 64; ++i) CHECK(std::abs(ca[i] - cb[i]) <= 0.5f + 1e-3f);

  CHECK(dct_quant_defense(Tensor::full({2, 8, 8, 1}, 0.5f), 23).shape() == Shape{2, 8, 8, 1});
  CHECK_THROWS_AS(dct_quant_defense(x, 0), std::invalid_argument);
  CHECK_THROWS_AS(dct_quant_defense(g, 50, ColourMode::ycbcr), std::invalid_argument);
}

TEST_CASE("patchwise reconstruction with an identity stub") {
  Rng rng(6);
  auto x = image(rng, 20, 17, 3);
  auto identity = [](const Tensor& p) { return p; };
  for (std::size_t s : {1, 3, 8})
    CHECK(values(reconstruct_patchwise(x, 8, s, identity, false)) == values(x));
  auto smoothed = reconstruct_patchwise(x, 8, 4, identity, true);
  CHECK(values(smoothed) == values(smooth5x5(x)));
  auto bad = [](const Tensor&) { return Tensor::zeros({1, 2, 2, 3}); };
  CHECK_THROWS_AS(reconstruct_patchwise(x, 8, 4, bad, false), std::invalid_argument);
}

TEST_CASE("vae reconstructions") {
  auto reg = tiny_registry();
  auto vae = reg.at("tiny");
  Rng rng(1);
  auto x = random_tensor(rng, {3, 8, 8, 1}, 0, 1, false);
  Rng r1(10), r2(11);
  auto a = vae_reconstruct_whole(vae, x, r1), b = vae_reconstruct_whole(vae, x, r2);
  CHECK(a.shape() == x.shape());
  for (float v : a.data()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(values(a) != values(b));

  auto det = vae;
  det.spec.clip_lo = det.spec.clip_hi = 0.0f;
  CHECK(values(vae_reconstruct_whole(det, x, r1)) == values(vae_reconstruct_whole(det, x, r2)));
  // averaging several deterministic samples changes nothing
  auto avg = vae_reconstruct_whole(det, x, r1, 4);
  auto one = vae_reconstruct_whole(det, x, r1);
  for (std::size_t i = 0; i < avg.numel(); ++i) CHECK(avg[i] == doctest::Approx(one[i]).epsilon(1e-6));

  auto big = random_tensor(rng, {16, 16, 1}, 0, 1, false);
  auto rec = vae_reconstruct_patchwise(vae, big, 4, r1, true);
  CHECK(rec.shape() == Shape{16, 16, 1});
  CHECK_THROWS_AS(vae_reconstruct_whole(vae, Tensor::zeros({1, 4, 4, 1}), r1), std::invalid_argument);
  CHECK_THROWS_AS(vae_reconstruct_patchwise(vae, Tensor::zeros({16, 16, 3}), 4, r1, false), std::invalid_argument);
}

TEST_CASE("defense chains") {
  auto reg = tiny_registry();
  Rng rng(8);
  auto x = random_tensor(rng, {5, 16, 16, 1}, 0, 1, false);
  DefenseContext ctx{&reg, 42, 1};

  CHECK(values(apply_chain({"none", {}}, x, ctx)) == values(x));

  DefenseChain smooth{"smooth", {Transform::smooth()}};
  CHECK(values(apply_chain(smooth, x, ctx)) == values(smooth5x5(x)));

  DefenseChain dct{"dct", {Transform::dct_quant(23)}};
  DefenseChain ens{"ens", {Transform::ensemble({smooth, dct})}};
  auto expected = ensemble_average({smooth5x5(x), dct_quant_defense(x, 23)});
  auto got = apply_chain(ens, x, ctx);
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-6));

  DefenseChain best{"patch", {Transform::vae_patch("tiny", 8, 4), Transform::smooth()}};
  auto one = apply_chain(best, x, ctx);
  CHECK(one.shape() == x.shape());
  for (float v : one.data()) CHECK((v >= 0.0f && v <= 1.0f));
  ctx.threads = 4;
  CHECK(values(apply_chain(best, x, ctx)) == values(one));
  ctx.seed = 43;
  CHECK(values(apply_chain(best, x, ctx)) != values(one));

  // failures name the step
  DefenseChain missing{"missing", {Transform::smooth(), Transform::vae_whole("nope")}};
  try {
    apply_chain(missing, x, ctx);
    FAIL("expected a DefenseError");
  } catch (const DefenseError& e) {
    CHECK(e.step() == 1);
  }
  auto colour = Transform::dct_quant(50);
  colour.colour = ColourMode::ycbcr;
  DefenseChain runtime{"runtime", {Transform::smooth(), Transform::smooth(), colour}};
  try {
    apply_chain(runtime, x, ctx);
    FAIL("expected a DefenseError");
  } catch (const DefenseError& e) {
    CHECK(e.step() == 2);
  }
  CHECK_THROWS_AS(validate({"stride", {Transform::vae_patch("tiny", 8, 9)}}, reg), DefenseError);
  CHECK_THROWS_AS(validate({"size", {Transform::vae_patch("tiny", 16, 8)}}, reg), DefenseError);
  CHECK_THROWS_AS(validate({"q", {Transform::dct_quant(0)}}, reg), DefenseError);
  CHECK_THROWS_AS(validate({"e", {Transform::ensemble({})}}, reg), DefenseError);

  CHECK(transform_kind_from_string(to_string(TransformKind::vae_patch)) == TransformKind::vae_patch);
  CHECK_THROWS_AS(transform_kind_from_string("blur"), std::invalid_argument);
}
