#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "advdef/models.hpp"

namespace advdef::models {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Crops [count, p, p, C] from images [N, H, W, C] at the given origins.
Tensor crop_batch(const Tensor& images, const std::vector<std::size_t>& idx, const std::vector<std::size_t>& ys,
                  const std::vector<std::size_t>& xs, std::size_t p) {
  const std::size_t h = images.dim(1), w = images.dim(2), c = images.dim(3);
  std::vector<float> out(idx.size() * p * p * c);
  auto d = images.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t r = 0; r < p; ++r) {
      auto src = d.begin() + ((idx[i] * h + ys[i] + r) * w + xs[i]) * c;
      std::copy_n(src, p * c, out.begin() + (i * p + r) * p * c);
    }
  return Tensor({idx.size(), p, p, c}, std::move(out));
}

bool plateaued(const std::vector<double>& series, const TrainConfig& config) {
  if (config.early_stop_tau <= 0.0 || config.early_stop_window == 0 || series.size() <= config.early_stop_window)
    return false;
  double now = series.back(), then = series[series.size() - 1 - config.early_stop_window];
  return std::abs(now - then) / std::max(std::abs(then), 1e-12) < config.early_stop_tau;
}

}  // namespace

ClassifierEval evaluate_classifier(const ClassifierSpec& spec, const ParamStore& params, const Dataset& data,
                                   std::size_t chunk) {
  if (data.size() == 0) throw std::invalid_argument("evaluate_classifier: empty dataset");
  NoGradGuard no_grad;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    std::size_t n = std::min(chunk, data.size() - begin);
    auto logits = classifier_forward(spec, params, take_rows(data.images, begin, n));
    std::span<const int> labels(data.labels.data() + begin, n);
    loss += nn::cross_entropy(logits, labels, nn::Reduction::sum).item();
    auto pred = nn::argmax_rows(logits);
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];
  }
  return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

TrainedClassifier train_classifier(const ClassifierSpec& spec, const Dataset& data, const TrainConfig& config) {
  if (data.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
  if (config.epochs == 0 || config.batch_size == 0)
    throw std::invalid_argument("train_classifier: epochs and batch size must be positive");
  if (data.image_shape() != spec.input)
    throw std::invalid_argument("train_classifier: dataset images " + shape_str(data.image_shape()) +
                                " do not match " + spec.name + " input " + shape_str(spec.input));
  const auto start = Clock::now();
  TrainedClassifier out{init_classifier(spec, config.seed), {}};
  auto& report = out.report;
  report.initial_loss = evaluate_classifier(spec, out.params, data).loss;

  nn::Optimizer opt(config.optimizer);
  Rng order_rng(config.seed, 1), dropout_rng(config.seed, 2);
  auto order = iota(data.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    shuffle(order, order_rng);
    double total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      std::size_t n = std::min(config.batch_size, order.size() - begin);
      std::vector<std::size_t> idx(order.begin() + begin, order.begin() + begin + n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = data.labels[idx[i]];
      auto logits = classifier_forward(spec, out.params, gather_rows(data.images, idx), nn::Mode::train, &dropout_rng);
      auto loss = nn::cross_entropy(logits, labels);
      total += static_cast<double>(loss.item()) * n;
      opt.step(out.params, backward(loss));
    }
    report.loss.push_back(total / static_cast<double>(data.size()));
    if (config.on_epoch) config.on_epoch({epoch, report.loss.back(), 0.0, 0.0, seconds_since(epoch_start)});
  }
  auto final_eval = evaluate_classifier(spec, out.params, data);
  report.final_loss = final_eval.loss;
  report.final_metric = final_eval.accuracy;
  report.wall_seconds = seconds_since(start);
  return out;
}

TrainedVae train_vae(const VaeSpec& spec, const Tensor& images, const TrainConfig& config) {
  if (!images.defined() || images.rank() != 4 || images.dim(0) == 0)
    throw std::invalid_argument("train_vae: images must be a non-empty [N, H, W, C] batch");
  if (config.epochs == 0 || config.batch_size == 0)
    throw std::invalid_argument("train_vae: epochs and batch size must be positive");
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  const std::size_t p = spec.input[0];
  if (spec.input[1] != p || spec.input[2] != c)
    throw std::invalid_argument("train_vae: " + spec.name + " input " + shape_str(spec.input) +
                                " is incompatible with images " + shape_str(images.shape()));
  if (p > h || p > w)
    throw std::invalid_argument("train_vae: patch size " + std::to_string(p) + " exceeds source image " +
                                std::to_string(h) + "x" + std::to_string(w));
  const bool whole = p == h && p == w;
  const auto start = Clock::now();
  TrainedVae out{init_vae(spec, config.seed), {}};
  auto& report = out.report;

  // Fixed evaluation sample for the before/after objective.
  Tensor eval_batch;
  {
    Rng pick(config.seed, 7);
    std::size_t m = std::min<std::size_t>(whole ? n : std::max<std::size_t>(n, 256), 512);
    std::vector<std::size_t> idx(m), ys(m, 0), xs(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      idx[i] = whole ? i % n : static_cast<std::size_t>(pick.below(n));
      if (!whole) {
        ys[i] = static_cast<std::size_t>(pick.below(h - p + 1));
        xs[i] = static_cast<std::size_t>(pick.below(w - p + 1));
      }
    }
    eval_batch = crop_batch(images, idx, ys, xs, p);
  }
  auto evaluate = [&] {
    NoGradGuard no_grad;
    Rng noise(config.seed, 8);
    double recon = 0.0, total = 0.0;
    for (std::size_t b = 0; b < eval_batch.dim(0); b += 128) {
      std::size_t m = std::min<std::size_t>(128, eval_batch.dim(0) - b);
      auto l = vae_loss(spec, out.params, take_rows(eval_batch, b, m), noise);
      recon += l.recon * m;
      total += static_cast<double>(l.total.item()) * m;
    }
    return std::pair{total / eval_batch.dim(0), recon / eval_batch.dim(0)};
  };
  report.initial_loss = evaluate().first;

  nn::Optimizer opt(config.optimizer);
  Rng order_rng(config.seed, 1), noise_rng(config.seed, 2);
  auto order = iota(n);
  const std::size_t per_epoch = whole ? n : (config.patches_per_epoch ? config.patches_per_epoch : n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    if (whole) shuffle(order, order_rng);
    double total = 0.0, recon = 0.0, kl = 0.0;
    for (std::size_t begin = 0; begin < per_epoch; begin += config.batch_size) {
      std::size_t m = std::min(config.batch_size, per_epoch - begin);
      std::vector<std::size_t> idx(m), ys(m, 0), xs(m, 0);
      for (std::size_t i = 0; i < m; ++i) {
        if (whole) {
          idx[i] = order[begin + i];
        } else {
          idx[i] = static_cast<std::size_t>(order_rng.below(n));
          ys[i] = static_cast<std::size_t>(order_rng.below(h - p + 1));
          xs[i] = static_cast<std::size_t>(order_rng.below(w - p + 1));
        }
      }
      auto l = vae_loss(spec, out.params, crop_batch(images, idx, ys, xs, p), noise_rng);
      total += static_cast<double>(l.total.item()) * m;
      recon += l.recon * m;
      kl += l.kl * m;
      opt.step(out.params, backward(l.total));
    }
    const double denom = static_cast<double>(per_epoch);
    report.loss.push_back(total / denom);
    report.recon.push_back(recon / denom);
    report.kl.push_back(kl / denom);
    if (config.on_epoch)
      config.on_epoch({epoch, report.loss.back(), report.recon.back(), report.kl.back(), seconds_since(epoch_start)});
    if (plateaued(report.recon, config)) {
      report.early_stopped = true;
      break;
    }
  }
  auto [final_total, final_recon] = evaluate();
  report.final_loss = final_total;
  report.final_metric = final_recon;
  report.wall_seconds = seconds_since(start);
  return out;
}

}  // namespace advdef::models
