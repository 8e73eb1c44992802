#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "advdef/evalharness.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace advdef;
using namespace advdef::eval;
using advdef::testing::random_tensor;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "advdef_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

std::string idx_bytes(std::uint32_t magic, const std::vector<std::uint32_t>& dims, const std::string& payload) {
  std::string s = be32(magic);
  for (auto d : dims) s += be32(d);
  return s + payload;
}

void write_gz(const fs::path& path, const std::string& bytes) {
  gzFile f = gzopen(path.string().c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
}

models::ClassifierSpec tiny_cnn() {
  models::ClassifierSpec s{"tiny", models::DatasetTag::mnist, {8, 8, 1}, {}, 3};
  s.layers = {nn::LayerSpec::conv("c1", 4), nn::LayerSpec::maxpool(), nn::LayerSpec::flatten(),
              nn::LayerSpec::dense("out", 3, nn::Activation::none)};
  return s;
}

// Classifier whose logits are its m-dimensional input.
Classifier passthrough(std::size_t m) {
  models::ClassifierSpec s{"eye", models::DatasetTag::mnist, {m}, {}, m};
  s.layers = {nn::LayerSpec::dense("lin", m, nn::Activation::none)};
  models::ParamStore p;
  std::vector<float> eye(m * m, 0.0f);
  for (std::size_t i = 0; i < m; ++i) eye[i * m + i] = 1.0f;
  p.add("lin.weight", Tensor({m, m}, eye));
  p.add("lin.bias", Tensor::zeros({m}));
  return {s, p};
}

}  // namespace

TEST_CASE("idx parsing") {
  std::string pixels;
  for (int i = 0; i < 2 * 2 * 3; ++i) pixels.push_back(static_cast<char>(i * 20));
  auto img = scratch("img.idx");
  auto lab = scratch("lab.idx.gz");
  write_text(img, idx_bytes(0x803, {3, 2, 2}, pixels));
  write_gz(lab, idx_bytes(0x801, {3}, std::string("\x01\x00\x02", 3)));

  auto d = load_idx(img, lab, "t", Split::test, 3);
  CHECK(d.size() == 3);
  CHECK(d.images.shape() == Shape{3, 2, 2, 1});
  CHECK(d.labels == std::vector<int>{1, 0, 2});
  CHECK(d.images[5] == doctest::Approx(100.0f / 255.0f));
  for (float v : values(d.images)) CHECK((v >= 0.0f && v <= 1.0f));

  SUBCASE("bad magic") {
    write_text(img, idx_bytes(0x802, {3, 2, 2}, pixels));
    CHECK_THROWS_AS(read_idx(img), ParseError);
  }
  SUBCASE("truncated payload reports the offset") {
    write_text(img, idx_bytes(0x803, {3, 2, 2}, pixels.substr(0, 7)));
    try {
      read_idx(img);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 16 + 7);
      CHECK(std::string(e.what()).find("byte 23") != std::string::npos);
    }
  }
  SUBCASE("truncated header") {
    write_text(img, idx_bytes(0x803, {3}, ""));
    CHECK_THROWS_AS(read_idx(img), ParseError);
  }
  SUBCASE("count mismatch") {
    write_gz(lab, idx_bytes(0x801, {2}, std::string("\x01\x00", 2)));
    CHECK_THROWS_WITH_AS(load_idx(img, lab, "t", Split::test), doctest::Contains("count mismatch"), std::runtime_error);
  }
}

TEST_CASE("bundled mnist files") {
  auto test = load_mnist(ADVDEF_DATA_DIR "/mnist", Split::test);
  CHECK(test.size() == 1000);
  CHECK(test.image_shape() == Shape{28, 28, 1});
  CHECK(test.classes == 10);
  float lo = 1, hi = 0;
  for (float v : test.images.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);
}

TEST_CASE("synthetic shapes") {
  auto a = synth_dataset("shapes", 12, 16, 24, 3, 4, 5);
  auto b = synth_dataset("shapes", 12, 16, 24, 3, 4, 5);
  CHECK(values(a.images) == values(b.images));
  CHECK(a.labels == b.labels);
  CHECK_NOTHROW(a.validate());
  CHECK(a.images.shape() == Shape{12, 16, 24, 3});
  // a prefix does not depend on the total count
  auto head5 = synth_dataset("shapes", 5, 16, 24, 3, 4, 5);
  CHECK(values(head5.images) == values(take_rows(a.images, 0, 5)));
  CHECK(values(synth_dataset("shapes", 12, 16, 24, 3, 4, 6).images) != values(a.images));
  CHECK(values(synth_dataset("shapes", 12, 16, 24, 3, 4, 5, Split::test).images) != values(a.images));

  auto empty = synth_dataset("shapes", 0, 16, 16, 1, 2, 1);
  CHECK(empty.size() == 0);
  CHECK_FALSE(empty.images.defined());

  CHECK_THROWS_AS(synth_dataset("shapes", 4, 16, 16, 3, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset("shapes", 4, 16, 16, 3, 9, 0), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset("shapes", 4, 4, 16, 3, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset("noise", 4, 16, 16, 3, 2, 0), std::invalid_argument);
}

TEST_CASE("a small cnn separates the synthetic classes") {
  auto train = synth_dataset("shapes", 2400, 32, 32, 3, 4, 11, Split::train);
  auto test = synth_dataset("shapes", 300, 32, 32, 3, 4, 11, Split::test);
  auto spec = models::hires_classifier({32, 32, 3}, 4);
  models::TrainConfig cfg;
  cfg.optimizer.lr = 1e-3f;
  cfg.epochs = 12;
  cfg.batch_size = 32;
  cfg.seed = 1;
  auto trained = models::train_classifier(spec, train, cfg);
  double acc = top1_accuracy({spec, trained.params}, test.images, test.labels);
  MESSAGE("held-out synthetic accuracy " << acc);
  CHECK(acc >= 0.9);
}

TEST_CASE("spec and chain json round trips") {
  for (const auto& name : models::classifier_preset_names()) {
    auto spec = models::classifier_preset(name);
    CHECK(classifier_spec_from_json(to_json(spec)) == spec);
  }
  for (const auto& name : models::vae_preset_names()) {
    auto spec = models::vae_preset(name);
    CHECK(vae_spec_from_json(to_json(spec)) == spec);
  }
  CHECK(classifier_spec_from_json(Json{{"preset", "hires-cnn"}, {"input", {32, 32, 3}}, {"classes", 4}}) ==
        models::hires_classifier({32, 32, 3}, 4));
  CHECK(vae_spec_from_json(Json{{"preset", "mnist-vae"}, {"beta", 0.25}}).beta == 0.25f);

  using defenses::Transform;
  auto dct = Transform::dct_quant(23);
  dct.colour = defenses::ColourMode::ycbcr;
  defenses::DefenseChain inner{"inner", {Transform::smooth(), dct}};
  defenses::DefenseChain chain{"mix", {Transform::vae_patch("p32", 32, 16), Transform::ensemble({inner, inner})}};
  CHECK(chain_from_json(to_json(chain)) == chain);

  attacks::AttackConfig atk{attacks::AttackKind::ifgsm, 0.05f, 7, 0.0f, 1.0f};
  auto back = attack_from_json(to_json(atk));
  CHECK(back.kind == atk.kind);
  CHECK(back.epsilon == atk.epsilon);
  CHECK(back.iterations == atk.iterations);

  CHECK_THROWS_AS(chain_from_json(Json{{"name", "x"}, {"stepz", Json::array()}}), std::invalid_argument);
  CHECK_THROWS_AS(chain_from_json(Json::parse(R"({"name":"x","steps":[{"kind":"vae_patch","model":"m"}]})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(attack_from_json(Json{{"kind", "pgd"}}), std::invalid_argument);
}

TEST_CASE("checkpoints") {
  auto spec = models::classifier_preset("mnist-cnn");
  auto params = models::init_classifier(spec, 3);
  auto ckpt = make_checkpoint(spec, params, 3, Json{{"epochs", 5}, {"final_loss", 0.25}});
  auto path = scratch("cnn.ckpt");
  save_checkpoint(path, ckpt);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.params == params);
  CHECK(loaded.classifier_spec() == spec);
  CHECK(loaded.seed == 3);
  CHECK(loaded.metadata["epochs"] == 5);
  CHECK(serialize_checkpoint(loaded) == read_text(path));
  CHECK(loaded.params.names() == std::vector<std::string>{"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                                                          "fc1.weight", "fc1.bias", "logits.weight", "logits.bias"});
  CHECK_THROWS_AS(loaded.vae_spec(), std::invalid_argument);

  SUBCASE("buffers keep their flag") {
    auto cspec = models::classifier_preset("cifar10-cnn");
    auto cp = models::init_classifier(cspec, 1);
    auto back = parse_checkpoint(serialize_checkpoint(make_checkpoint(cspec, cp, 1)));
    CHECK(back.params == cp);
    for (std::size_t i = 0; i < cp.size(); ++i) CHECK(back.params.entries()[i].trainable == cp.entries()[i].trainable);
  }
  SUBCASE("vae checkpoint") {
    auto vspec = models::vae_preset("mnist-vae");
    auto vp = models::init_vae(vspec, 2);
    auto back = parse_checkpoint(serialize_checkpoint(make_checkpoint(vspec, vp, 2)));
    CHECK(back.kind == ModelKind::vae);
    CHECK(back.vae_spec() == vspec);
    CHECK(back.params == vp);
  }
  SUBCASE("corruption") {
    auto bytes = serialize_checkpoint(ckpt);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_WITH_AS(parse_checkpoint(bad), doctest::Contains("bad magic"), ParseError);
    bad = bytes;
    bad[8] = 2;
    CHECK_THROWS_WITH_AS(parse_checkpoint(bad), doctest::Contains("unsupported version"), ParseError);
    CHECK_THROWS_WITH_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), doctest::Contains("logits.bias"),
                         ParseError);
    // inflate the first dim of conv1.weight
    const std::uint32_t header_len = static_cast<unsigned char>(bytes[12]) | static_cast<unsigned char>(bytes[13]) << 8 |
                                     static_cast<unsigned char>(bytes[14]) << 16 |
                                     static_cast<unsigned char>(bytes[15]) << 24;
    const std::size_t first_dim = 16 + header_len + 4 + std::string("conv1.weight").size() + 4;
    bad = bytes;
    bad[first_dim + 3] = 0x40;
    CHECK_THROWS_WITH_AS(parse_checkpoint(bad), doctest::Contains("conv1.weight"), ParseError);
  }
}

TEST_CASE("relative l2 difference") {
  Tensor x({1, 2}, {3, 4});
  CHECK(l2_relative_diff(x, x) == 0.0);
  CHECK(l2_relative_diff(x, Tensor({1, 2}, {3, 4.5f})) == doctest::Approx(0.1).epsilon(1e-12));

  Rng rng(2);
  auto a = random_tensor(rng, {7, 5, 5, 2}, 0, 1, false), b = random_tensor(rng, {7, 5, 5, 2}, 0, 1, false);
  double brute = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    long double num = 0, den = 0;
    for (std::size_t k = 0; k < 50; ++k) {
      long double d = static_cast<long double>(a[i * 50 + k]) - b[i * 50 + k];
      num += d * d;
      den += static_cast<long double>(a[i * 50 + k]) * a[i * 50 + k];
    }
    brute += static_cast<double>(std::sqrt(num) / std::sqrt(den));
  }
  brute /= 7;
  CHECK(std::abs(l2_relative_diff(a, b) - brute) <= 1e-9 * brute);
  // mean of ratios, not ratio of means
  Tensor two({2, 1}, {1, 10}), moved({2, 1}, {2, 11});
  CHECK(l2_relative_diff(two, moved) == doctest::Approx((1.0 + 0.1) / 2));

  CHECK_THROWS_AS(l2_relative_diff(Tensor({1, 2}, {0, 0}), x), std::domain_error);
  CHECK_THROWS_AS(l2_relative_diff(x, Tensor({2, 1}, {3, 4})), std::invalid_argument);
}

TEST_CASE("top-1 accuracy") {
  auto clf = passthrough(10);
  Rng rng(9);
  const std::size_t n = 5000;
  std::vector<float> x(n * 10, 0.0f);
  std::vector<int> y(n), shuffled(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(rng.below(10));
    x[i * 10 + y[i]] = 1.0f;
    shuffled[i] = static_cast<int>(rng.below(10));
  }
  Tensor images({n, 10}, x);
  CHECK(top1_accuracy(clf, images, y) == 1.0);
  // random labels: chance level within 4 binomial standard deviations
  double chance = top1_accuracy(clf, images, shuffled);
  CHECK(std::abs(chance - 0.1) < 4 * std::sqrt(0.09 / n));
  CHECK_THROWS_AS(top1_accuracy(clf, images, std::span<const int>(y).subspan(1)), std::invalid_argument);
}

TEST_CASE("sweeps") {
  auto spec = tiny_cnn();
  Classifier clf{spec, models::init_classifier(spec, 4)};
  Rng rng(12);
  Dataset slice{"slice", random_tensor(rng, {40, 8, 8, 1}, 0.05f, 1, false), {}, 3, Split::test};
  for (std::size_t i = 0; i < 40; ++i) slice.labels.push_back(static_cast<int>(i % 3));

  using defenses::Transform;
  SweepConfig cfg;
  cfg.epsilons = {0.0f, 0.05f, 0.1f};
  cfg.columns = {{"no_defense", {}}, {"smooth", {Transform::smooth()}}, {"broken", {Transform::vae_whole("absent")}}};
  cfg.seed = 5;
  auto r = run_sweep(clf, slice, cfg, {});
  REQUIRE(r.rows.size() == 3);
  CHECK(r.columns == std::vector<std::string>{"no_defense", "smooth", "broken"});

  // epsilon 0 row equals the clean accuracies
  CHECK(r.accuracy(0, "no_defense") == top1_accuracy(clf, slice.images, slice.labels));
  defenses::DefenseContext ctx{nullptr, 0, 1};
  CHECK(r.accuracy(0, "smooth") == top1_accuracy(clf, slice.images, slice.labels, &cfg.columns[1], &ctx));
  CHECK(r.rows[0].l2_diff == 0.0);
  CHECK(r.rows[1].l2_diff <= r.rows[2].l2_diff);
  // a failing column is reported without stopping the others
  for (const auto& row : r.rows) {
    CHECK(std::isnan(row.cells[2].accuracy));
    CHECK(row.cells[2].error.find("absent") != std::string::npos);
    CHECK(row.cells[0].samples == 40);
  }
  // the row fingerprint is that of the shared adversarial batch
  auto atk = cfg.attack;
  atk.epsilon = 0.1f;
  CHECK(attacks::attack_batch(atk, spec, clf.params, slice.images, slice.labels).fingerprint() ==
        r.rows[2].fingerprint);

  cfg.threads = 4;
  CHECK(run_sweep(clf, slice, cfg, {}) == r);
  cfg.seed = 6;
  CHECK(run_sweep(clf, slice, cfg, {}).rows[2].fingerprint == r.rows[2].fingerprint);

  cfg.epsilons.clear();
  CHECK_THROWS_AS(run_sweep(clf, slice, cfg, {}), std::invalid_argument);
}

TEST_CASE("csv and markdown reports") {
  SweepResult r;
  r.columns = {"no_defense", "vae"};
  SweepRow row;
  row.epsilon = 0.1;
  row.l2_diff = 0.2573;
  row.cells = {{0.8453, 100, ""}, {0.5, 100, ""}};
  r.rows.push_back(row);
  auto csv = emit_csv(r);
  CHECK(csv == "epsilon,l2_diff,no_defense,vae\n0.100,0.257,0.845,0.500\n");
  auto md = emit_markdown(r);
  auto header = md.substr(0, md.find('\n'));
  CHECK(std::count(header.begin(), header.end(), '|') - 1 == static_cast<long>(r.columns.size() + 2));

  auto parsed = parse_csv(csv);
  CHECK(parsed.columns == r.columns);
  CHECK(emit_csv(parsed) == csv);
  CHECK(parsed.rows[0].cells[0].accuracy == doctest::Approx(0.845));

  CHECK_THROWS_AS(emit_csv(SweepResult{}), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv("eps,l2\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv("epsilon,l2_diff,a\n0.1,0.2\n"), std::invalid_argument);
}

TEST_CASE("experiment configs") {
  auto j = Json::parse(R"({
    "seed": 4,
    "dataset": {"kind": "shapes", "train_size": 10, "test_size": 5, "height": 16, "width": 16, "classes": 3},
    "model": {"classifier": "hires-cnn", "vae": "patch-vae-16", "beta": 0.2,
              "train": {"epochs": 2, "optimizer": {"kind": "sgd", "lr": 0.1, "momentum": 0.9}}},
    "attack": {"kind": "ifgsm", "epsilon": 0.03, "iterations": 5},
    "defenses": [{"name": "none", "steps": []}, {"name": "dct", "steps": [{"kind": "dct_quant", "quality": 10}]}],
    "sweep": {"epsilons": [0, 0.01], "slice": 5}
  })");
  auto c = config_from_json(j);
  CHECK(c.seed == 4);
  CHECK(c.dataset.seed == 4);
  CHECK(c.model.train.epochs == 2);
  CHECK(c.model.train.optimizer.kind == nn::OptimizerKind::sgd);
  CHECK(c.model.beta == 0.2f);
  CHECK(c.attack.kind == attacks::AttackKind::ifgsm);
  CHECK(c.defenses.size() == 2);
  CHECK(c.epsilons == std::vector<float>{0.0f, 0.01f});
  auto again = config_from_json(to_json(c));
  CHECK(to_json(again) == to_json(c));

  auto [train, test] = load_data(c.dataset);
  CHECK(train.size() == 10);
  CHECK(test.size() == 5);
  CHECK(train.image_shape() == Shape{16, 16, 3});

  j["sweep"]["epsilon"] = 1;
  CHECK_THROWS_WITH_AS(config_from_json(j), doctest::Contains("unknown key 'epsilon'"), std::invalid_argument);
}
