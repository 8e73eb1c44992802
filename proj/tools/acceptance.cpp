#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>

#include "advdef/evalharness.hpp"
#include "advdef/layers.hpp"
#include "advdef/parallel.hpp"
#include "oracles.hpp"

using namespace advdef;
using namespace advdef::eval;
using namespace advdef::nn;
using advdef::testing::gradient_check_detail;
using advdef::testing::OutputFn;
using advdef::testing::random_tensor;
using defenses::Transform;

namespace {

// Bump when a code change should invalidate cached checkpoints.
constexpr int kCacheRevision = 1;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

struct Env {
  fs::path data_dir;
  fs::path cache_dir;
  bool use_cache = true;
  std::size_t threads = 1;
};

// Trains through `train` unless a checkpoint for the same key is cached.
template <class TrainFn>
Checkpoint cached(const Env& env, const std::string& tag, Json key, TrainFn train) {
  key["revision"] = kCacheRevision;
  key["format"] = kCheckpointVersion;
  const auto path = env.cache_dir / fmt("%s-%016llx.ckpt", tag.c_str(), static_cast<unsigned long long>(fnv1a(key.dump())));
  if (env.use_cache && fs::exists(path)) {
    progress("loading cached " + tag + " from " + path.string());
    return load_checkpoint(path);
  }
  progress("training " + tag);
  auto ckpt = train();
  if (env.use_cache) save_checkpoint(path, ckpt);
  return ckpt;
}

Json train_key(const models::TrainConfig& t) {
  return {{"optimizer", {static_cast<int>(t.optimizer.kind), t.optimizer.lr, t.optimizer.momentum}},
          {"epochs", t.epochs},
          {"batch", t.batch_size},
          {"seed", t.seed},
          {"tau", t.early_stop_tau},
          {"window", t.early_stop_window},
          {"patches", t.patches_per_epoch}};
}

void log_epochs(models::TrainConfig& cfg) {
  cfg.on_epoch = [](const models::EpochStats& s) {
    progress(fmt("epoch %zu loss %.4f recon %.3f kl %.3f (%.1f s)", s.epoch, s.loss, s.recon, s.kl, s.seconds));
  };
}

// ---- 1: gradients ---------------------------------------------------------------

struct GradCase {
  std::string name;
  OutputFn fn;
  std::vector<Tensor> inputs;
  double h = 1e-3;
};

models::ClassifierSpec small_cnn(std::size_t size, std::size_t channels, std::size_t classes) {
  models::ClassifierSpec s{"small", models::DatasetTag::mnist, {size, size, channels}, {}, classes};
  s.layers = {nn::LayerSpec::conv("c1", 3), nn::LayerSpec::maxpool(), nn::LayerSpec::flatten(),
              nn::LayerSpec::dense("fc", 6, nn::Activation::tanh), nn::LayerSpec::dense("out", classes, nn::Activation::none)};
  return s;
}

models::VaeSpec small_vae(models::ReconLoss recon) {
  models::VaeSpec v;
  v.name = "small";
  v.input = {8, 8, 1};
  v.latent = 4;
  v.recon = recon;
  v.beta = 0.7f;
  v.clip_lo = v.clip_hi = 0.0f;
  v.encoder = {nn::LayerSpec::conv("e1", 3, nn::Activation::tanh), nn::LayerSpec::maxpool(), nn::LayerSpec::flatten(),
               nn::LayerSpec::dense("e_out", 8, nn::Activation::none)};
  v.decoder = {nn::LayerSpec::dense("d_in", 32, nn::Activation::tanh), nn::LayerSpec::reshape({4, 4, 2}),
               nn::LayerSpec::upsample(), nn::LayerSpec::tconv("d_out", 1, nn::Activation::none)};
  return v;
}

std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  Rng rng(seed);
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  std::vector<GradCase> cases;
  auto binary = [&](std::string name, OutputFn fn, float lo, float hi) {
    Shape s{dim(2, 5), dim(2, 5)};
    cases.push_back({std::move(name), std::move(fn), {random_tensor(rng, s, lo, hi), random_tensor(rng, s, lo, hi)}});
  };
  binary("add", [](auto& in) { return add(in[0], in[1]); }, -1, 1);
  binary("sub", [](auto& in) { return sub(in[0], in[1]); }, -1, 1);
  binary("mul", [](auto& in) { return mul(in[0], in[1]); }, -1, 1);
  binary("div", [](auto& in) { return div(in[0], in[1]); }, 0.5f, 2);
  binary("exp", [](auto& in) { return exp(mul(in[0], in[1])); }, -1, 1);
  binary("log", [](auto& in) { return log(add(in[0], in[1])); }, 0.5f, 2);
  binary("sigmoid", [](auto& in) { return sigmoid(sub(in[0], in[1])); }, -3, 3);
  binary("tanh", [](auto& in) { return tanh(mul(in[0], in[1])); }, -2, 2);
  binary("relu", [](auto& in) { return relu(add(in[0], in[1])); }, -1, 1);
  binary("clip", [](auto& in) { return clip(sub(in[0], in[1]), -0.5f, 0.5f); }, -1, 1);
  {
    std::size_t m = dim(2, 5), k = dim(2, 5), n = dim(2, 5);
    cases.push_back({"matmul", [](auto& in) { return matmul(in[0], in[1]); },
                     {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}});
  }
  {
    std::size_t h = dim(3, 6), w = dim(3, 6), ci = dim(1, 3), co = dim(1, 3);
    cases.push_back({"conv2d", [](auto& in) { return conv2d(in[0], in[1], in[2]); },
                     {random_tensor(rng, {1, h, w, ci}), random_tensor(rng, {3, 3, ci, co}, -0.5f, 0.5f),
                      random_tensor(rng, {co})}});
  }
  {
    std::size_t h = dim(3, 5), w = dim(3, 5), ci = dim(1, 3), co = dim(1, 3);
    cases.push_back({"transpose_conv2d", [](auto& in) { return transpose_conv2d(in[0], in[1], in[2]); },
                     {random_tensor(rng, {1, h, w, ci}), random_tensor(rng, {3, 3, co, ci}, -0.5f, 0.5f),
                      random_tensor(rng, {co})}});
  }
  cases.push_back({"maxpool2x2", [](auto& in) { return maxpool2x2(in[0]); },
                   {random_tensor(rng, {dim(1, 2), 2 * dim(1, 3), 2 * dim(1, 3), dim(1, 2)})}});
  cases.push_back({"upsample2x", [](auto& in) { return upsample2x(in[0]); },
                   {random_tensor(rng, {1, dim(1, 3), dim(1, 3), dim(1, 2)})}});
  {
    std::size_t b = dim(1, 4), i = dim(2, 6), o = dim(2, 5);
    cases.push_back({"dense", [](auto& in) { return dense(in[0], in[1], in[2]); },
                     {random_tensor(rng, {b, i}), random_tensor(rng, {i, o}), random_tensor(rng, {o})}});
  }
  for (auto mode : {nn::Mode::train, nn::Mode::eval}) {
    std::size_t c = dim(1, 3);
    auto rm = random_tensor(rng, {c}, -0.3f, 0.3f, false), rv = random_tensor(rng, {c}, 0.5f, 2.0f, false);
    auto fn = [mode, rm, rv](auto& in) {
      nn::BatchNormParams p{in[1], in[2], rm.detach(), rv.detach()};
      return batchnorm(in[0], p, mode);
    };
    cases.push_back({mode == nn::Mode::train ? "batchnorm(train)" : "batchnorm(eval)", fn,
                     {random_tensor(rng, {dim(3, 4), 2, 2, c}), random_tensor(rng, {c}, 0.5f, 1.5f),
                      random_tensor(rng, {c})}});
  }
  {
    const std::uint64_t mask_seed = rng.next_u64();
    cases.push_back({"dropout", [mask_seed](auto& in) {
                       Rng mask(mask_seed);
                       return dropout(in[0], 0.4f, nn::Mode::train, &mask);
                     },
                     {random_tensor(rng, {dim(2, 4), dim(3, 6)})}});
  }
  {
    std::size_t b = dim(2, 5), m = dim(3, 6);
    std::vector<int> y(b);
    for (auto& v : y) v = static_cast<int>(rng.below(m));
    cases.push_back({"cross_entropy", [y](auto& in) { return nn::cross_entropy(in[0], y); },
                     {random_tensor(rng, {b, m}, -2, 2)}});
  }
  {
    Shape s{dim(3, 8)};
    cases.push_back({"mse", [](auto& in) { return nn::mse(in[0], in[1]); },
                     {random_tensor(rng, s, 0.05f, 0.95f), random_tensor(rng, s, 0.1f, 0.9f)}});
    cases.push_back({"bce", [](auto& in) { return nn::bce(in[0], in[1]); },
                     {random_tensor(rng, s, 0.05f, 0.95f), random_tensor(rng, s, 0.1f, 0.9f)}});
    cases.push_back({"bce_with_logits", [](auto& in) { return nn::bce_with_logits(in[0], in[1]); },
                     {random_tensor(rng, s, 0.05f, 0.95f), random_tensor(rng, s, -3, 3)}});
  }
  {
    std::size_t d = dim(1, 5);
    cases.push_back({"kl_gaussian", [](auto& in) { return models::kl_gaussian(in[0], in[1]); },
                     {random_tensor(rng, {d}, -2, 2), random_tensor(rng, {d}, 0.3f, 2.0f)}});
    cases.push_back({"kl_gaussian_logvar", [](auto& in) { return models::kl_gaussian_logvar(in[0], in[1]); },
                     {random_tensor(rng, {d}, -2, 2), random_tensor(rng, {d}, -1.5f, 1.5f)}});
    const std::uint64_t noise_seed = rng.next_u64();
    cases.push_back({"vae_sample", [noise_seed](auto& in) {
                       Rng noise(noise_seed);
                       return models::vae_sample(in[0], in[1], noise, -5.0f, 5.0f);
                     },
                     {random_tensor(rng, {2, d}, -2, 2), random_tensor(rng, {2, d}, 0.3f, 2.0f)}});
  }
  {
    // composed classifier loss, gradients w.r.t. the input and two weight tensors
    auto spec = small_cnn(2 * dim(2, 3), dim(1, 2), dim(2, 4));
    auto params = models::init_classifier(spec, rng.next_u64()).copy(true);
    std::size_t b = dim(2, 3);
    std::vector<int> y(b);
    for (auto& v : y) v = static_cast<int>(rng.below(spec.classes));
    auto x = random_tensor(rng, {b, spec.input[0], spec.input[1], spec.input[2]}, 0, 1);
    auto fn = [spec, params, y](const std::vector<Tensor>& in) {
      auto p = params;
      p.get("c1.weight") = in[1];
      p.get("out.weight") = in[2];
      return nn::cross_entropy(models::classifier_forward(spec, p, in[0]), y);
    };
    cases.push_back({"classifier loss", fn, {x, params.get("c1.weight"), params.get("out.weight")}, 1e-2});
  }
  for (auto recon : {models::ReconLoss::mse, models::ReconLoss::bce}) {
    auto v = small_vae(recon);
    auto params = models::init_vae(v, rng.next_u64());
    for (float& w : params.get("e_out.weight").mutable_data()) w = static_cast<float>(rng.uniform() - 0.5);
    auto x = random_tensor(rng, {dim(2, 3), 8, 8, 1}, 0, 1, false);
    const std::vector<std::string> names{"e1.weight", "e_out.weight", "e_out.bias", "d_out.weight"};
    std::vector<Tensor> inputs;
    for (const auto& n : names) inputs.push_back(params.get(n));
    auto fn = [v, params, x, names](const std::vector<Tensor>& in) {
      auto p = params;
      for (std::size_t i = 0; i < names.size(); ++i) p.get(names[i]) = in[i];
      Rng r(0);
      return models::vae_loss(v, p, x, r).total;
    };
    // a large float32 scalar loss needs a wider step, but not so wide that
    // maxpool winners switch inside it
    cases.push_back({recon == models::ReconLoss::mse ? "vae loss (mse)" : "vae loss (bce)", fn, inputs, 3e-3});
  }
  return cases;
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  auto cases = gradient_cases(20240601);
  double worst = 0.0;
  std::string worst_name, failures;
  for (const auto& c : cases) {
    auto r = gradient_check_detail(c.fn, c.inputs, 1, c.h);
    const bool kinky = r.kinks * 5 > r.checked;
    if (r.error >= 1e-3 || kinky) failures += " " + c.name + (kinky ? "(kinks)" : fmt("(%.2e)", r.error));
    if (r.error > worst) worst = r.error, worst_name = c.name;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures.empty() && cases.size() >= 20 && secs < 120.0;
  o.detail = fmt("%zu configurations, worst relative error %.2e (%s), %.1f s", cases.size(), worst,
                 worst_name.c_str(), secs);
  if (!failures.empty()) o.detail += "; failing:" + failures;
  return o;
}

// ---- MNIST pipeline ---------------------------------------------------------------

struct MnistRun {
  Dataset train, test;
  Classifier clf;
  double train_seconds = 0.0;
  bool trained_now = false;
  defenses::ModelRegistry vaes;
  SweepResult fgsm;
};

Checkpoint mnist_classifier(const Env& env, const Dataset& train) {
  auto spec = models::classifier_preset("mnist-cnn");
  models::TrainConfig cfg;
  cfg.optimizer = {nn::OptimizerKind::sgd, 0.1f, 0.9f};
  cfg.epochs = 5;
  cfg.batch_size = 64;
  cfg.seed = 1;
  Json key = {{"spec", to_json(spec)}, {"train", train_key(cfg)}, {"n", train.size()}};
  return cached(env, "mnist-cnn", key, [&] {
    log_epochs(cfg);
    auto t = models::train_classifier(spec, train, cfg);
    return make_checkpoint(spec, t.params, cfg.seed,
                           {{"epochs", t.report.loss.size()}, {"wall_seconds", t.report.wall_seconds}});
  });
}

Checkpoint mnist_vae(const Env& env, const Dataset& train) {
  auto spec = models::vae_preset("mnist-vae");
  models::TrainConfig cfg;
  cfg.optimizer.kind = nn::OptimizerKind::adam;
  cfg.optimizer.lr = 1e-3f;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.seed = 2;
  cfg.early_stop_tau = 0.005;
  Json key = {{"spec", to_json(spec)}, {"train", train_key(cfg)}, {"n", train.size()}};
  return cached(env, "mnist-vae", key, [&] {
    log_epochs(cfg);
    auto t = models::train_vae(spec, train.images, cfg);
    return make_checkpoint(spec, t.params, cfg.seed,
                           {{"epochs", t.report.loss.size()}, {"wall_seconds", t.report.wall_seconds}});
  });
}

std::vector<float> mnist_epsilons() { return {0.0f, 0.02f, 0.04f, 0.06f, 0.08f, 0.10f, 0.12f}; }

std::vector<defenses::DefenseChain> mnist_columns() {
  return {{"no_defense", {}}, {"vae", {Transform::vae_whole("mnist-vae")}}, {"dct_q23", {Transform::dct_quant(23)}}};
}

std::vector<double> column(const SweepResult& r, const std::string& name) {
  std::vector<double> out;
  for (std::size_t i = 0; i < r.rows.size(); ++i) out.push_back(r.accuracy(i, name));
  return out;
}

Outcome criterion_mnist_clean(const Env& env, MnistRun& run) {
  const auto t0 = Clock::now();
  auto ckpt = mnist_classifier(env, run.train);
  run.clf = {ckpt.classifier_spec(), ckpt.params};
  run.train_seconds = ckpt.metadata.value("wall_seconds", seconds_since(t0));
  const double acc = top1_accuracy(run.clf, run.test.images, run.test.labels);
  Outcome o;
  o.pass = acc >= 0.95 && run.train_seconds < 3600.0;
  o.detail = fmt("top-1 %.3f on %zu held-out images after %d epochs on %zu training images, training %.0f s", acc,
                 run.test.size(), ckpt.metadata.value("epochs", 0), run.train.size(), run.train_seconds);
  return o;
}

void run_mnist_sweep(const Env& env, MnistRun& run) {
  auto vckpt = mnist_vae(env, run.train);
  run.vaes["mnist-vae"] = {vckpt.vae_spec(), vckpt.params};
  SweepConfig cfg;
  cfg.attack.kind = attacks::AttackKind::fgsm;
  cfg.epsilons = mnist_epsilons();
  cfg.columns = mnist_columns();
  cfg.seed = 1;
  cfg.threads = env.threads;
  progress("fgsm sweep on the mnist test slice");
  run.fgsm = run_sweep(run.clf, run.test, cfg, run.vaes);
  std::cerr << emit_markdown(run.fgsm);
}

Outcome criterion_attack_trend(const MnistRun& run) {
  auto none = column(run.fgsm, "no_defense");
  double worst_rise = -1.0;
  for (std::size_t i = 1; i < none.size(); ++i) worst_rise = std::max(worst_rise, none[i] - none[i - 1]);
  const double drop = none.front() - none.back();
  Outcome o;
  o.pass = worst_rise <= 0.01 && drop >= 0.30;
  o.detail = fmt("undefended %.3f at eps 0 to %.3f at eps %.2f (drop %.1f points), largest step increase %.1f points",
                 none.front(), none.back(), run.fgsm.rows.back().epsilon, 100 * drop, 100 * std::max(0.0, worst_rise));
  return o;
}

Outcome criterion_vae_benefit(const MnistRun& run) {
  auto none = column(run.fgsm, "no_defense"), vae = column(run.fgsm, "vae");
  const std::size_t n = none.size();
  const double gain_a = vae[n - 2] - none[n - 2], gain_b = vae[n - 1] - none[n - 1];
  const double clean_gap = std::abs(vae[0] - none[0]);
  Outcome o;
  o.pass = gain_a >= 0.15 && gain_b >= 0.15 && clean_gap <= 0.03;
  o.detail = fmt("eps %.2f: vae %.3f vs %.3f; eps %.2f: vae %.3f vs %.3f; clean vae %.3f vs %.3f (gap %.1f points)",
                 run.fgsm.rows[n - 2].epsilon, vae[n - 2], none[n - 2], run.fgsm.rows[n - 1].epsilon, vae[n - 1],
                 none[n - 1], vae[0], none[0], 100 * clean_gap);
  return o;
}

struct AttackPoint {
  double epsilon = 0.0, l2 = 0.0, accuracy = 0.0;
};

AttackPoint attack_point(const Env& env, const MnistRun& run, attacks::AttackKind kind, double eps) {
  attacks::AttackConfig cfg{kind, static_cast<float>(eps), 10, 0.0f, 1.0f};
  auto batch = attacks::attack_batch(cfg, run.clf.spec, run.clf.params, run.test.images, run.test.labels, env.threads);
  return {eps, l2_relative_diff(batch.original, batch.perturbed),
          top1_accuracy(run.clf, batch.perturbed, batch.labels)};
}

Outcome criterion_ifgsm(const Env& env, const MnistRun& run) {
  Outcome o{true, ""};
  std::size_t matched = 0;
  const std::size_t n = run.fgsm.rows.size();
  for (std::size_t r = n - 3; r < n; ++r) {
    const auto& row = run.fgsm.rows[r];
    const double target = row.l2_diff, fgsm_acc = row.cells[0].accuracy;
    // secant steps on the budget until the measured L2 lands within 15%
    double eps = row.epsilon;
    AttackPoint p;
    bool ok = false;
    for (int step = 0; step < 6 && !ok; ++step) {
      p = attack_point(env, run, attacks::AttackKind::ifgsm, eps);
      ok = std::abs(p.l2 / target - 1.0) <= 0.15;
      if (!ok) eps *= target / p.l2;
    }
    if (!ok) {
      o.pass = false;
      o.detail += fmt("L2 %.3f unmatched; ", target);
      continue;
    }
    ++matched;
    o.pass = o.pass && p.accuracy <= fgsm_acc;
    o.detail += fmt("L2 %.3f: fgsm %.3f vs ifgsm %.3f (eps %.3f, L2 %.3f); ", target, fgsm_acc, p.accuracy,
                    p.epsilon, p.l2);
  }
  o.pass = o.pass && matched > 0;
  o.detail = fmt("%zu matched pairs, M=10. ", matched) + o.detail.substr(0, o.detail.size() - 2);
  return o;
}

double psnr(const Tensor& a, const Tensor& b) {
  double mse = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) mse += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  mse /= static_cast<double>(a.numel());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

Outcome criterion_dct(const MnistRun& run) {
  auto images = synth_dataset("shapes", 24, 64, 64, 3, 8, 31, Split::test);
  double worst = std::numeric_limits<double>::infinity(), total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto x = take_rows(images.images, i, 1);
    const double p = psnr(x, defenses::dct_quant_defense(x, 100));
    worst = std::min(worst, p);
    total += p;
  }
  // mid-range of the epsilon grid
  const std::size_t mid = run.fgsm.rows.size() / 2;
  const double none = run.fgsm.accuracy(mid, "no_defense"), dct = run.fgsm.accuracy(mid, "dct_q23");
  Outcome o;
  o.pass = worst >= 40.0 && dct - none >= 0.05;
  o.detail = fmt("quality 100 PSNR min %.1f dB, mean %.1f dB over %zu images; eps %.2f: q23 %.3f vs %.3f (+%.1f points)",
                 worst, total / static_cast<double>(images.size()), images.size(), run.fgsm.rows[mid].epsilon, dct,
                 none, 100 * (dct - none));
  return o;
}

// ---- 7: patches ---------------------------------------------------------------------

Outcome criterion_patches() {
  const auto t0 = Clock::now();
  Rng rng(77);
  std::size_t identity_ok = 0, coverage_ok = 0;
  const std::size_t trials = 50;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t h = 1 + rng.below(40), w = 1 + rng.below(40), c = 1 + rng.below(3);
    const std::size_t p = 1 + rng.below(std::min(h, w)), s = 1 + rng.below(p);
    auto image = random_tensor(rng, {h, w, c}, 0, 1, false);
    auto pieces = defenses::extract_patches(image, p, s);
    auto back = defenses::stitch_patches(pieces.grid, pieces.patches);
    bool same = back.shape() == image.shape();
    for (std::size_t i = 0; same && i < image.numel(); ++i) same = back[i] == image[i];
    identity_ok += same;
    // brute force: every anchor on the stride lattice plus the clamped last one
    std::vector<std::size_t> rows, cols;
    for (std::size_t r = 0; r + p <= h; r += s) rows.push_back(r);
    if (rows.back() + p < h) rows.push_back(h - p);
    for (std::size_t q = 0; q + p <= w; q += s) cols.push_back(q);
    if (cols.back() + p < w) cols.push_back(w - p);
    std::vector<std::size_t> brute(h * w, 0);
    for (auto r : rows)
      for (auto q : cols)
        for (std::size_t y = r; y < r + p; ++y)
          for (std::size_t x = q; x < q + p; ++x) ++brute[y * w + x];
    coverage_ok += pieces.grid.coverage() == brute;
  }
  Tensor impulse = Tensor::zeros({9, 9, 1});
  impulse.mutable_data()[4 * 9 + 4] = 1.0f;
  auto response = defenses::smooth5x5(impulse);
  double impulse_err = 0.0;
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x) {
      const bool support = y >= 2 && y <= 6 && x >= 2 && x <= 6;
      impulse_err = std::max(impulse_err, std::abs(response[y * 9 + x] - (support ? 1.0 / 25.0 : 0.0)));
    }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = identity_ok == trials && coverage_ok == trials && impulse_err < 1e-7 && secs < 60.0;
  o.detail = fmt("stitch(extract) exact on %zu/%zu geometries, coverage matches brute force on %zu/%zu, impulse max "
                 "error %.1e, %.2f s",
                 identity_ok, trials, coverage_ok, trials, impulse_err, secs);
  return o;
}

// ---- 8: KL ------------------------------------------------------------------------

Outcome criterion_kl() {
  const double at_standard = models::kl_gaussian(Tensor({3}, {0, 0, 0}), Tensor({3}, {1, 1, 1})).item();
  const double at_unit_mean = models::kl_gaussian(Tensor({1}, {1}), Tensor({1}, {1})).item();
  Rng rng(4242);
  double worst = 0.0;
  const int samples = 1000000;
  for (int pair = 0; pair < 10; ++pair) {
    const std::size_t d = 1 + rng.below(4);
    auto mu = random_tensor(rng, {d}, -2.0f, 2.0f, false);
    auto sigma = random_tensor(rng, {d}, 0.25f, 2.5f, false);
    // E_q[log q(z) - log p(z)] with z drawn from q
    double acc = 0.0;
    for (int s = 0; s < samples; ++s)
      for (std::size_t i = 0; i < d; ++i) {
        const double e = rng.normal(), z = mu[i] + sigma[i] * e;
        acc += -std::log(static_cast<double>(sigma[i])) - 0.5 * e * e + 0.5 * z * z;
      }
    const double mc = acc / samples, closed = models::kl_gaussian(mu, sigma).item();
    worst = std::max(worst, std::abs(mc - closed) / closed);
  }
  Outcome o;
  o.pass = worst <= 0.01 && at_standard == 0.0 && std::abs(at_unit_mean - 0.5) < 1e-7;
  o.detail = fmt("10 pairs, 1e6 samples each, worst relative gap %.3f%%; KL(0,1) = %g, KL(1,1) = %g", 100 * worst,
                 at_standard, at_unit_mean);
  return o;
}

// ---- 9: metrics and formats ---------------------------------------------------------

Outcome criterion_formats(const Env& env, const MnistRun& run) {
  Outcome o{true, ""};
  // l2 against a long double re-summation on a real adversarial batch
  attacks::AttackConfig atk{attacks::AttackKind::fgsm, 0.1f, 10, 0.0f, 1.0f};
  auto batch = attacks::attack_batch(atk, run.clf.spec, run.clf.params, run.test.images, run.test.labels, env.threads);
  const std::size_t n = batch.size(), row = batch.original.numel() / n;
  long double brute = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    long double num = 0.0L, den = 0.0L;
    for (std::size_t k = i * row; k < (i + 1) * row; ++k) {
      const long double a = batch.original[k], b = batch.perturbed[k];
      num += (a - b) * (a - b);
      den += a * a;
    }
    brute += std::sqrt(num) / std::sqrt(den);
  }
  brute /= static_cast<long double>(n);
  const double l2 = l2_relative_diff(batch.original, batch.perturbed);
  const double rel = static_cast<double>(std::abs(l2 - brute) / brute);
  o.pass = rel <= 1e-9;

  // checkpoint round trips on the trained models
  bool ckpt_ok = true;
  auto dir = fs::temp_directory_path() / "advdef_acceptance";
  fs::create_directories(dir);
  auto check_roundtrip = [&](const Checkpoint& c, const std::string& name) {
    save_checkpoint(dir / name, c);
    auto back = load_checkpoint(dir / name);
    ckpt_ok = ckpt_ok && back.params == c.params && serialize_checkpoint(back) == read_text(dir / name);
  };
  check_roundtrip(make_checkpoint(run.clf.spec, run.clf.params, 1), "cnn.ckpt");
  const auto& vae = run.vaes.at("mnist-vae");
  check_roundtrip(make_checkpoint(vae.spec, vae.params, 2), "vae.ckpt");
  fs::remove_all(dir);
  o.pass = o.pass && ckpt_ok;

  // sweeps at several parallelism levels
  SweepConfig cfg;
  cfg.epsilons = {0.0f, 0.06f};
  cfg.columns = mnist_columns();
  cfg.seed = 9;
  auto slice = head(run.test, 200);
  std::optional<SweepResult> reference;
  bool deterministic = true;
  for (std::size_t threads : {1, 2, 4, 3, 1}) {
    cfg.threads = threads;
    auto r = run_sweep(run.clf, slice, cfg, run.vaes);
    if (!reference) reference = r;
    deterministic = deterministic && r == *reference;
  }
  o.pass = o.pass && deterministic;
  o.detail = fmt("l2 relative gap %.1e vs direct summation; checkpoint round trip %s; sweep at 1/2/4/3/1 threads %s",
                 rel, ckpt_ok ? "bit-exact" : "MISMATCH", deterministic ? "bit-identical" : "DIFFERS");
  return o;
}

// ---- 10: patch-wise pipeline --------------------------------------------------------

Outcome criterion_patchwise(const Env& env) {
  auto train = synth_dataset("shapes", 3000, 64, 64, 3, 6, 7, Split::train);
  auto test = synth_dataset("shapes", 1000, 64, 64, 3, 6, 7, Split::test);

  auto spec = models::hires_classifier({64, 64, 3}, 6);
  models::TrainConfig ccfg;
  ccfg.optimizer.kind = nn::OptimizerKind::adam;
  ccfg.optimizer.lr = 1e-3f;
  ccfg.epochs = 10;
  ccfg.batch_size = 32;
  ccfg.seed = 1;
  Json data_key = {{"kind", "shapes"}, {"n", 3000}, {"size", 64}, {"classes", 6}, {"seed", 7}};
  auto cckpt = cached(env, "hires-cnn", {{"spec", to_json(spec)}, {"train", train_key(ccfg)}, {"data", data_key}}, [&] {
    log_epochs(ccfg);
    auto t = models::train_classifier(spec, train, ccfg);
    return make_checkpoint(spec, t.params, ccfg.seed, {{"epochs", t.report.loss.size()}});
  });
  Classifier clf{cckpt.classifier_spec(), cckpt.params};

  auto vspec = models::vae_preset("patch-vae-32");
  models::TrainConfig vcfg;
  vcfg.optimizer.kind = nn::OptimizerKind::adam;
  vcfg.optimizer.lr = 1e-3f;
  vcfg.epochs = 25;
  vcfg.batch_size = 64;
  vcfg.patches_per_epoch = 3000;
  vcfg.early_stop_tau = 0.005;
  vcfg.seed = 2;
  auto vckpt =
      cached(env, "patch-vae-32", {{"spec", to_json(vspec)}, {"train", train_key(vcfg)}, {"data", data_key}}, [&] {
        log_epochs(vcfg);
        auto t = models::train_vae(vspec, train.images, vcfg);
        return make_checkpoint(vspec, t.params, vcfg.seed, {{"epochs", t.report.loss.size()}});
      });
  defenses::ModelRegistry reg;
  reg["patch-vae-32"] = {vckpt.vae_spec(), vckpt.params};

  SweepConfig cfg;
  cfg.epsilons = {0.0f, 0.03f, 0.06f, 0.09f};
  cfg.columns = {{"no_defense", {}},
                 {"patch32", {Transform::vae_patch("patch-vae-32", 32, 32)}},
                 {"patch32_smooth", {Transform::vae_patch("patch-vae-32", 32, 32), Transform::smooth()}}};
  cfg.seed = 1;
  cfg.threads = env.threads;
  progress("fgsm sweep on the synthetic high-resolution test set");
  auto r = run_sweep(clf, test, cfg, reg);
  std::cerr << emit_markdown(r);
  const std::size_t top = r.rows.size() - 1;
  const double none = r.accuracy(top, "no_defense"), patch = r.accuracy(top, "patch32"),
               smooth = r.accuracy(top, "patch32_smooth");
  Outcome o;
  o.pass = smooth - none >= 0.10 && smooth > patch;
  o.detail = fmt("eps %.2f: patch+smooth %.3f vs undefended %.3f (+%.1f points), patch alone %.3f (smoothing %+.1f "
                 "points); clean %.3f / %.3f / %.3f",
                 r.rows[top].epsilon, smooth, none, 100 * (smooth - none), patch, 100 * (smooth - patch),
                 r.accuracy(0, "no_defense"), r.accuracy(0, "patch32"), r.accuracy(0, "patch32_smooth"));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance checks: one PASS/FAIL line per criterion"};
  Env env;
  env.data_dir = ADVDEF_DATA_DIR;
  env.cache_dir = "acceptance_cache";
  bool no_cache = false;
  std::vector<int> only;
  app.add_option("--data-dir", env.data_dir, "Directory holding mnist/")->check(CLI::ExistingDirectory);
  app.add_option("--cache-dir", env.cache_dir, "Where trained checkpoints are cached");
  app.add_flag("--no-cache", no_cache, "Always train from scratch");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  env.use_cache = !no_cache;
  env.threads = resolve_threads(0);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  const char* titles[] = {"",
                          "gradient correctness",
                          "mnist clean accuracy",
                          "fgsm accuracy trend",
                          "vae defense benefit",
                          "i-fgsm strength",
                          "dct quantisation baseline",
                          "patch machinery oracles",
                          "kl closed form",
                          "metric and format oracles",
                          "patch-wise end-to-end"};
  int failed = 0;
  auto run = [&](int c, const std::function<Outcome()>& fn) {
    if (!wanted(c)) return;
    std::cerr << "criterion " << c << ": " << titles[c] << std::endl;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %d %s: %s (%.0f s)\n", o.pass ? "PASS" : "FAIL", c, titles[c], o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  };

  run(1, criterion_gradients);

  const bool need_mnist = wanted(2) || wanted(3) || wanted(4) || wanted(5) || wanted(6) || wanted(9);
  MnistRun mnist;
  std::string mnist_error;
  if (need_mnist) {
    try {
      mnist.train = load_mnist(env.data_dir / "mnist", Split::train);
      mnist.test = load_mnist(env.data_dir / "mnist", Split::test);
    } catch (const std::exception& e) {
      mnist_error = e.what();
    }
  }
  auto with_mnist = [&](auto fn) {
    return [&, fn]() -> Outcome {
      if (!mnist_error.empty()) throw std::runtime_error(mnist_error);
      if (mnist.clf.spec.layers.empty()) {
        auto ckpt = mnist_classifier(env, mnist.train);
        mnist.clf = {ckpt.classifier_spec(), ckpt.params};
      }
      if (mnist.fgsm.rows.empty()) run_mnist_sweep(env, mnist);
      return fn();
    };
  };
  run(2, [&] {
    if (!mnist_error.empty()) throw std::runtime_error(mnist_error);
    return criterion_mnist_clean(env, mnist);
  });
  run(3, with_mnist([&] { return criterion_attack_trend(mnist); }));
  run(4, with_mnist([&] { return criterion_vae_benefit(mnist); }));
  run(5, with_mnist([&] { return criterion_ifgsm(env, mnist); }));
  run(6, with_mnist([&] { return criterion_dct(mnist); }));
  run(7, criterion_patches);
  run(8, criterion_kl);
  run(9, with_mnist([&] { return criterion_formats(env, mnist); }));
  run(10, [&] { return criterion_patchwise(env); });
  return failed == 0 ? 0 : 1;
}
