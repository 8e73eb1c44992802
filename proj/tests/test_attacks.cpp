#include <cmath>
#include <limits>

#include "advdef/attacks.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace advdef;
using namespace advdef::attacks;
using advdef::testing::random_tensor;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

models::ClassifierSpec tiny_cnn() {
  models::ClassifierSpec s{"tiny", models::DatasetTag::mnist, {8, 8, 1}, {}, 3};
  s.layers = {nn::LayerSpec::conv("c1", 4), nn::LayerSpec::maxpool(), nn::LayerSpec::flatten(),
              nn::LayerSpec::dense("out", 3, nn::Activation::none)};
  return s;
}

// Two logits [0, w * x]: softmax gives p(positive) = sigmoid(w * x).
models::ClassifierSpec logistic(float w, models::ParamStore& params) {
  models::ClassifierSpec s{"logistic", models::DatasetTag::mnist, {1}, {}, 2};
  s.layers = {nn::LayerSpec::dense("lin", 2, nn::Activation::none)};
  params = models::ParamStore();
  params.add("lin.weight", Tensor({1, 2}, {0.0f, w}));
  params.add("lin.bias", Tensor::zeros({2}));
  return s;
}

}  // namespace

TEST_CASE("fgsm with zero budget is the identity") {
  auto spec = tiny_cnn();
  auto params = models::init_classifier(spec, 1);
  Rng rng(2);
  auto x = random_tensor(rng, {3, 8, 8, 1}, 0, 1, false);
  std::vector<int> y{0, 1, 2};
  CHECK(values(fgsm(spec, params, x, y, 0.0f)) == values(x));
}

TEST_CASE("fgsm on a logistic model moves along the hand-derived sign") {
  models::ParamStore params;
  auto spec = logistic(2.0f, params);
  Tensor x({1, 1}, {0.4f});
  std::vector<int> negative{0};
  // d/dx -log(1 - sigmoid(w x)) = w * sigmoid(w x) > 0
  auto g = input_gradient(spec, params, x, negative);
  double expected = 2.0 / (1.0 + std::exp(-0.8));
  CHECK(g[0] == doctest::Approx(expected).epsilon(1e-5));
  // finite-difference cross-check of the same derivative
  auto loss_at = [&](float v) {
    auto logits = models::classifier_forward(spec, params, Tensor({1, 1}, {v}));
    return static_cast<double>(nn::cross_entropy(logits, negative).item());
  };
  CHECK((loss_at(0.41f) - loss_at(0.39f)) / 0.02 == doctest::Approx(expected).epsilon(1e-3));

  CHECK(fgsm(spec, params, x, negative, 0.1f)[0] == doctest::Approx(0.5f));
  CHECK(fgsm(spec, params, Tensor({1, 1}, {0.95f}), negative, 0.1f)[0] == 1.0f);
}

TEST_CASE("fgsm perturbs each pixel by exactly -eps, 0 or +eps before clipping") {
  auto spec = tiny_cnn();
  auto params = models::init_classifier(spec, 3);
  Rng rng(4);
  auto x = random_tensor(rng, {4, 8, 8, 1}, 0.2f, 0.8f, false);
  std::vector<int> y{0, 1, 2, 0};
  const float eps = 0.1f;
  auto xa = fgsm(spec, params, x, y, eps);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    float d = xa[i] - x[i];
    bool ok = std::abs(d) < 1e-7f || std::abs(std::abs(d) - eps) < 1e-6f;
    CHECK(ok);
    moved += std::abs(d) > 1e-7f;
  }
  CHECK(moved > x.numel() / 2);
}

TEST_CASE("ifgsm") {
  auto spec = tiny_cnn();
  auto params = models::init_classifier(spec, 5);
  Rng rng(6);
  auto x = random_tensor(rng, {5, 8, 8, 1}, 0, 1, false);
  std::vector<int> y{0, 1, 2, 1, 0};

  SUBCASE("one iteration equals fgsm bitwise") {
    CHECK(values(ifgsm(spec, params, x, y, 0.07f, 1)) == values(fgsm(spec, params, x, y, 0.07f)));
  }
  SUBCASE("stays inside the budget and the pixel range") {
    for (std::size_t m : {2u, 5u, 10u}) {
      auto xa = ifgsm(spec, params, x, y, 0.1f, m);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(std::abs(xa[i] - x[i]) <= 0.1f + 1e-6f);
        CHECK((xa[i] >= 0.0f && xa[i] <= 1.0f));
      }
    }
  }
  SUBCASE("constant gradient sign makes every iteration count agree with fgsm") {
    models::ParamStore lp;
    auto lin = logistic(-1.5f, lp);
    Tensor xs({3, 1}, {0.2f, 0.5f, 0.97f});
    std::vector<int> ys{0, 1, 0};
    auto one = fgsm(lin, lp, xs, ys, 0.09f);
    for (std::size_t m : {2u, 7u, 10u}) {
      auto many = ifgsm(lin, lp, xs, ys, 0.09f, m);
      for (std::size_t i = 0; i < 3; ++i) CHECK(many[i] == doctest::Approx(one[i]).epsilon(1e-6));
    }
  }
  CHECK_THROWS_AS(ifgsm(spec, params, x, y, 0.1f, 0), std::invalid_argument);
  CHECK_THROWS_AS(fgsm(spec, params, x, std::vector<int>{0, 1}, 0.1f), std::invalid_argument);
}

TEST_CASE("attack configuration checks") {
  AttackConfig c;
  c.epsilon = 0.05f;
  CHECK(validate(c, models::DatasetTag::mnist).empty());
  c.epsilon = 0.2f;
  CHECK(validate(c, models::DatasetTag::mnist).size() == 1);
  c.epsilon = 0.002f;
  CHECK(validate(c, models::DatasetTag::synthetic_hires).size() == 1);
  c.epsilon = -0.1f;
  CHECK_THROWS_AS(validate(c, models::DatasetTag::mnist), std::invalid_argument);
  c = AttackConfig{AttackKind::ifgsm, 0.05f, 0};
  CHECK_THROWS_AS(validate(c, models::DatasetTag::mnist), std::invalid_argument);
  CHECK(attack_kind_from_string("ifgsm") == AttackKind::ifgsm);
  CHECK_THROWS_AS(attack_kind_from_string("cw"), std::invalid_argument);
}

TEST_CASE("attack_batch") {
  auto spec = tiny_cnn();
  auto params = models::init_classifier(spec, 7);
  Rng rng(8);
  const std::size_t n = 37;
  auto x = random_tensor(rng, {n, 8, 8, 1}, 0, 1, false);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 3);

  SUBCASE("empty slice") {
    auto b = attack_batch({AttackKind::fgsm, 0.1f}, spec, params, Tensor(), {});
    CHECK(b.size() == 0);
    CHECK(b.failures.empty());
  }
  SUBCASE("parallelism does not change the output") {
    for (auto kind : {AttackKind::fgsm, AttackKind::ifgsm}) {
      AttackConfig c{kind, 0.1f, 4};
      auto a = attack_batch(c, spec, params, x, y, 1, 8);
      auto b = attack_batch(c, spec, params, x, y, 8, 8);
      CHECK(values(a.perturbed) == values(b.perturbed));
      CHECK(a.fingerprint() == b.fingerprint());
      CHECK(a.l2_relative == b.l2_relative);
      // chunking is only a scheduling unit: per-image results agree
      auto single = run_attack(c, spec, params, take_rows(x, 5, 1), std::span<const int>(y).subspan(5, 1));
      for (std::size_t i = 0; i < 64; ++i) CHECK(single[i] == doctest::Approx(a.perturbed[5 * 64 + i]).epsilon(1e-6));
    }
  }
  SUBCASE("infinity-norm budget and pixel range hold for every item") {
    Rng r(9);
    for (int trial = 0; trial < 5; ++trial) {
      float eps = static_cast<float>(r.uniform() * 0.12);
      AttackConfig c{trial % 2 ? AttackKind::ifgsm : AttackKind::fgsm, eps, 3};
      auto b = attack_batch(c, spec, params, x, y, 2, 5);
      CHECK(b.size() == n);
      CHECK(b.linf() <= eps + 1e-6);
      for (float p : b.perturbed.data()) CHECK((p >= 0.0f && p <= 1.0f));
      for (std::size_t i = 0; i < n; ++i) {
        double num = 0, den = 0;
        for (std::size_t k = 0; k < 64; ++k) {
          double d = x[i * 64 + k] - b.perturbed[i * 64 + k];
          num += d * d;
          den += static_cast<double>(x[i * 64 + k]) * x[i * 64 + k];
        }
        CHECK(b.l2_relative[i] == doctest::Approx(std::sqrt(num / den)).epsilon(1e-9));
      }
    }
  }
  SUBCASE("items with non-finite gradients are skipped and reported") {
    std::vector<float> px(x.data().begin(), x.data().end());
    px[10 * 64 + 3] = std::numeric_limits<float>::quiet_NaN();
    Tensor bad(x.shape(), px);
    auto b = attack_batch({AttackKind::fgsm, 0.05f}, spec, params, bad, y, 1, 8);
    REQUIRE(b.failures.size() == 1);
    CHECK(b.failures[0].index == 10);
    CHECK(b.size() == n - 1);
    CHECK(b.source[10] == 11);
    CHECK_THROWS_AS(fgsm(spec, params, take_rows(bad, 10, 1), std::vector<int>{1}, 0.05f), NonFiniteGradient);
  }
}
