#include <cmath>

#include "advdef/parallel.hpp"
#include "advdef/rng.hpp"
#include "advdef/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace advdef;
using advdef::testing::gradient_check;
using advdef::testing::random_tensor;

namespace {
std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
}  // namespace

TEST_CASE("tensor construction enforces shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({}, {1}), std::invalid_argument);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
}

TEST_CASE("sign and clip follow their definitions") {
  Tensor x({3}, {-0.3f, 0.0f, 2.1f});
  CHECK(values(sign(x)) == std::vector<float>{-1, 0, 1});
  Tensor y({3}, {-0.5f, 0.5f, 1.5f});
  CHECK(values(clip(y, 0, 1)) == std::vector<float>{0, 0.5f, 1});
  CHECK(values(elementwise(ElementwiseOp::clip, y, nullptr, {0, 1})) == std::vector<float>{0, 0.5f, 1});
}

TEST_CASE("relu subgradient is zero at negatives") {
  Tensor x({2}, {-1.0f, 2.0f}, true);
  auto g = backward(sum(relu(x)));
  CHECK(values(g.grad(x)) == std::vector<float>{0, 1});
}

TEST_CASE("sign has zero gradient and clip passes gradient only inside the range") {
  Tensor x({3}, {-0.5f, 0.5f, 1.5f}, true);
  auto g = backward(sum(add(sign(x), clip(x, 0, 1))));
  CHECK(values(g.grad(x)) == std::vector<float>{0, 1, 0});
}

TEST_CASE("elementwise errors instead of producing NaN") {
  Tensor a({2}, {1, 2});
  Tensor b({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(log(Tensor({2}, {1.0f, 0.0f})), std::domain_error);
  CHECK_THROWS_AS(log(Tensor({1}, {-2.0f})), std::domain_error);
  CHECK_THROWS_AS(div(a, Tensor({2}, {1.0f, 0.0f})), std::domain_error);
  CHECK_THROWS_AS(elementwise(ElementwiseOp::add, a), std::invalid_argument);
  CHECK_THROWS_AS(elementwise(ElementwiseOp::exp, a, &a), std::invalid_argument);
}

TEST_CASE("matmul hand examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(values(matmul(eye, m)) == values(m));
  CHECK(values(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}))) == std::vector<float>{11});
  CHECK_THROWS_AS(matmul(Tensor({2, 3}, std::vector<float>(6)), m), std::invalid_argument);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(7);
  auto a = random_tensor(rng, {4, 3});
  auto b = random_tensor(rng, {3, 2});
  double err = gradient_check([](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }, {a, b});
  CHECK(err < 1e-3);
}

TEST_CASE("backward basics") {
  Tensor x({3}, {1, 2, 3}, true);
  CHECK(values(backward(sum(x)).grad(x)) == std::vector<float>{1, 1, 1});

  Tensor y({3}, {0.5f, -2.0f, 4.0f}, true);
  auto g = backward(mul_scalar(sum(square(y)), 0.5f)).grad(y);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(y[i]));
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
  Tensor x({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(backward(mul_scalar(x, 2.0f)), std::invalid_argument);
  Tensor c({1}, {3.0f});
  CHECK_THROWS_AS(backward(c), std::invalid_argument);

  Tensor other({2}, {1, 2}, true);
  auto g = backward(sum(x));
  CHECK_THROWS_AS(g.grad(other), std::out_of_range);
}

TEST_CASE("backward consumes the tape") {
  Tensor x({2}, {1, 2}, true);
  auto loss = sum(square(x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::invalid_argument);
}

TEST_CASE("tape is topologically ordered with each node once") {
  Tensor x({2}, {1, 2}, true);
  auto a = exp(x);
  auto loss = sum(add(mul(a, a), a));  // `a` reached along three paths
  auto tape = GradTape::record(loss);
  std::unordered_map<std::uint64_t, std::size_t> position;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    CHECK(position.count(tape.nodes()[i]->id) == 0);
    position[tape.nodes()[i]->id] = i;
  }
  for (const auto& node : tape.nodes())
    for (const auto& in : node->inputs)
      if (in->needs_grad) CHECK(position.at(in->id) < position.at(node->id));
  CHECK(tape.nodes().back()->id == loss.id());
}

TEST_CASE("no-grad guard stops recording") {
  Tensor x({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = exp(x);
  CHECK_FALSE(y.needs_grad());
}

TEST_CASE("every differentiable primitive agrees with finite differences") {
  Rng rng(11);
  struct Case {
    const char* name;
    advdef::testing::OutputFn fn;
    float lo, hi;
  };
  std::vector<Case> cases = {
      {"add", [](auto& in) { return add(in[0], in[1]); }, -1, 1},
      {"sub", [](auto& in) { return sub(in[0], in[1]); }, -1, 1},
      {"mul", [](auto& in) { return mul(in[0], in[1]); }, -1, 1},
      {"div", [](auto& in) { return div(in[0], in[1]); }, 0.5f, 2},
      {"neg", [](auto& in) { return neg(in[0]); }, -1, 1},
      {"exp", [](auto& in) { return exp(in[0]); }, -1, 1},
      {"log", [](auto& in) { return log(in[0]); }, 0.5f, 2},
      {"relu", [](auto& in) { return relu(in[0]); }, -1, 1},
      {"sigmoid", [](auto& in) { return sigmoid(in[0]); }, -3, 3},
      {"tanh", [](auto& in) { return tanh(in[0]); }, -2, 2},
      {"clip", [](auto& in) { return clip(in[0], -0.5f, 0.5f); }, -1, 1},
      {"bias_add", [](auto& in) { return bias_add(in[0], reshape(slice_rows(in[1], 0, 1), {3})); }, -1, 1},
      {"slice_cols", [](auto& in) { return slice_cols(in[0], 1, 3); }, -1, 1},
      {"mean", [](auto& in) { return mul(mean(in[0]), mean(in[1])); }, -1, 1},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    auto a = random_tensor(rng, {4, 3}, c.lo, c.hi);
    auto b = random_tensor(rng, {4, 3}, c.lo, c.hi);
    CHECK(gradient_check(c.fn, {a, b}) < 1e-3);
  }
}

TEST_CASE("random composite graphs agree with finite differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 8; ++trial) {
    CAPTURE(trial);
    auto x = random_tensor(rng, {3, 4});
    auto w = random_tensor(rng, {4, 2});
    auto b = random_tensor(rng, {2});
    auto fn = [](const std::vector<Tensor>& in) {
      auto h = tanh(bias_add(matmul(in[0], in[1]), in[2]));
      return add(sigmoid(mul(h, h)), exp(mul_scalar(h, 0.5f)));
    };
    CHECK(gradient_check(fn, {x, w, b}, rng.next_u64()) < 1e-3);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(5);
  auto x = random_tensor(rng, {5});
  auto f1 = [](const Tensor& t) { return sum(exp(t)); };
  auto f2 = [](const Tensor& t) { return sum(mul(t, tanh(t))); };
  auto g1 = backward(f1(x)).grad(x);
  auto g2 = backward(f2(x)).grad(x);
  const float a = 1.5f, b = -0.25f;
  auto g = backward(add(mul_scalar(f1(x), a), mul_scalar(f2(x), b))).grad(x);
  for (std::size_t i = 0; i < 5; ++i) CHECK(g[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-5));
}

TEST_CASE("gaussian sampling") {
  SUBCASE("degenerate clip range gives zeros") {
    Rng rng(1);
    auto t = gaussian(rng, {100}, 0.0f, 0.0f);
    for (float v : t.data()) CHECK(v == 0.0f);
  }
  SUBCASE("moments at 1e5 samples") {
    Rng rng(42);
    auto t = gaussian(rng, {100000});
    double s = 0, s2 = 0;
    for (float v : t.data()) {
      s += v;
      s2 += static_cast<double>(v) * v;
      CHECK((v >= -5.0f && v <= 5.0f));
    }
    double m = s / 1e5, var = s2 / 1e5 - m * m;
    CHECK(std::abs(m) <= 0.02);
    CHECK(var >= 0.97);
    CHECK(var <= 1.03);
  }
  SUBCASE("same seed gives identical tensors") {
    Rng a(9, 3), b(9, 3);
    CHECK(values(gaussian(a, {64})) == values(gaussian(b, {64})));
  }
  SUBCASE("invalid clip range") {
    Rng rng(1);
    CHECK_THROWS_AS(gaussian(rng, {4}, 1.0f, -1.0f), std::invalid_argument);
  }
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(123, 0), b(123, 0), c(123, 1), d(124, 0);
  std::vector<std::uint64_t> va, vb, vc, vd;
  for (int i = 0; i < 16; ++i) {
    va.push_back(a.next_u64());
    vb.push_back(b.next_u64());
    vc.push_back(c.next_u64());
    vd.push_back(d.next_u64());
  }
  CHECK(va == vb);
  CHECK(va != vc);
  CHECK(va != vd);
  Rng parent(5);
  auto s1 = parent.split(7), s2 = parent.split(7), s3 = parent.split(8);
  CHECK(s1.next_u64() == s2.next_u64());
  CHECK(parent.split(7).next_u64() != s3.next_u64());
  for (int i = 0; i < 1000; ++i) {
    double u = a.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(a.below(10) < 10);
  }
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 5) throw std::runtime_error("boom");
                  }),
                  std::runtime_error);
}
