#include <bit>
#include <cmath>

#include "advdef/evalharness.hpp"
#include "advdef/parallel.hpp"

namespace advdef::eval {

double l2_relative_diff(const Tensor& originals, const Tensor& perturbed) {
  if (originals.shape() != perturbed.shape())
    throw std::invalid_argument("l2_relative_diff: shapes " + shape_str(originals.shape()) + " and " +
                                shape_str(perturbed.shape()) + " differ");
  if (originals.rank() < 1 || originals.dim(0) == 0) throw std::invalid_argument("l2_relative_diff: empty batch");
  const std::size_t n = originals.dim(0), row = originals.numel() / n;
  auto a = originals.data(), b = perturbed.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t k = i * row; k < (i + 1) * row; ++k) {
      const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
      num += d * d;
      den += static_cast<double>(a[k]) * static_cast<double>(a[k]);
    }
    if (den == 0.0) throw std::domain_error("l2_relative_diff: image " + std::to_string(i) + " has zero norm");
    total += std::sqrt(num) / std::sqrt(den);
  }
  return total / static_cast<double>(n);
}

std::vector<int> predict_labels(const Classifier& clf, const Tensor& images, std::size_t threads, std::size_t chunk) {
  if (!images.defined() || images.dim(0) == 0) return {};
  if (chunk == 0) throw std::invalid_argument("predict_labels: chunk size must be positive");
  const std::size_t n = images.dim(0), chunks = (n + chunk - 1) / chunk;
  std::vector<int> out(n);
  parallel_for(chunks, resolve_threads(threads), [&](std::size_t c) {
    NoGradGuard no_grad;
    const std::size_t begin = c * chunk, count = std::min(chunk, n - begin);
    auto pred = models::predict(clf.spec, clf.params, take_rows(images, begin, count));
    std::copy(pred.begin(), pred.end(), out.begin() + begin);
  });
  return out;
}

double top1_accuracy(const Classifier& clf, const Tensor& images, std::span<const int> labels,
                     const defenses::DefenseChain* chain, const defenses::DefenseContext* ctx) {
  if (labels.empty()) throw std::invalid_argument("top1_accuracy: no images");
  if (images.dim(0) != labels.size()) throw std::invalid_argument("top1_accuracy: image and label counts differ");
  const std::size_t threads = ctx ? ctx->threads : 1;
  Tensor input = images;
  if (chain) input = defenses::apply_chain(*chain, images, ctx ? *ctx : defenses::DefenseContext{});
  auto pred = predict_labels(clf, input, threads);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double SweepResult::accuracy(std::size_t row, const std::string& column) const {
  for (std::size_t c = 0; c < columns.size(); ++c)
    if (columns[c] == column) return rows.at(row).cells.at(c).accuracy;
  throw std::out_of_range("sweep has no column '" + column + "'");
}

bool SweepResult::operator==(const SweepResult& o) const {
  auto same = [](double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); };
  if (columns != o.columns || rows.size() != o.rows.size()) return false;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto &a = rows[r], &b = o.rows[r];
    if (!same(a.epsilon, b.epsilon) || !same(a.l2_diff, b.l2_diff) || a.fingerprint != b.fingerprint ||
        a.cells.size() != b.cells.size() || a.attack_failures.size() != b.attack_failures.size())
      return false;
    for (std::size_t c = 0; c < a.cells.size(); ++c)
      if (!same(a.cells[c].accuracy, b.cells[c].accuracy) || a.cells[c].samples != b.cells[c].samples ||
          a.cells[c].error != b.cells[c].error)
        return false;
  }
  return true;
}

SweepResult run_sweep(const Classifier& clf, const Dataset& slice, const SweepConfig& config,
                      const defenses::ModelRegistry& models) {
  if (config.epsilons.empty()) throw std::invalid_argument("sweep: empty epsilon grid");
  if (config.columns.empty()) throw std::invalid_argument("sweep: no columns");
  if (slice.size() == 0) throw std::invalid_argument("sweep: empty dataset slice");
  SweepResult result;
  for (const auto& c : config.columns) result.columns.push_back(c.name);

  for (float eps : config.epsilons) {
    SweepRow row;
    row.epsilon = eps;
    auto attack = config.attack;
    attack.epsilon = eps;
    auto batch = attacks::attack_batch(attack, clf.spec, clf.params, slice.images, slice.labels, config.threads);
    row.attack_failures = batch.failures;
    row.fingerprint = batch.fingerprint();
    if (batch.size() > 0) row.l2_diff = l2_relative_diff(batch.original, batch.perturbed);

    for (std::size_t c = 0; c < config.columns.size(); ++c) {
      SweepCell cell;
      cell.samples = batch.size();
      try {
        if (batch.size() == 0) throw std::runtime_error("no images survived the attack");
        // defense randomness depends on the column only, so rows are comparable
        defenses::DefenseContext ctx{&models, Rng(config.seed, 0xdef).split(c).next_u64(), config.threads};
        cell.accuracy = top1_accuracy(clf, batch.perturbed, batch.labels, &config.columns[c], &ctx);
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
      row.cells.push_back(std::move(cell));
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace advdef::eval
