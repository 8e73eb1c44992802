#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "advdef/layers.hpp"

namespace advdef::nn {

namespace {

float reduction_scale(Reduction r, std::size_t count) {
  return r == Reduction::mean ? 1.0f / static_cast<float>(count) : 1.0f;
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace

std::vector<float> softmax(std::span<const float> logits) {
  std::vector<float> p(logits.size());
  float mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v = static_cast<float>(v / total);
  return p;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("argmax_rows: expected rank-2 logits");
  std::size_t b = logits.dim(0), m = logits.dim(1);
  std::vector<int> out(b);
  auto d = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    auto row = d.subspan(i * m, m);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Reduction r) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [batch, classes]");
  const std::size_t b = logits.dim(0), m = logits.dim(1);
  if (labels.size() != b) throw std::invalid_argument("cross_entropy: label count differs from batch size");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= m) throw std::invalid_argument("cross_entropy: label out of range");

  auto probs = std::make_shared<std::vector<float>>(b * m);
  double total = 0.0;
  auto z = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    auto row = z.subspan(i * m, m);
    float mx = *std::max_element(row.begin(), row.end());
    double lse = 0.0;
    for (float v : row) lse += std::exp(static_cast<double>(v - mx));
    double log_norm = mx + std::log(lse);
    total += log_norm - row[labels[i]];
    for (std::size_t j = 0; j < m; ++j) (*probs)[i * m + j] = static_cast<float>(std::exp(row[j] - log_norm));
  }
  const float scale = reduction_scale(r, b);
  std::vector<int> ys(labels.begin(), labels.end());
  return make_op_result({1}, {static_cast<float>(total * scale)}, {logits}, "cross_entropy",
                        [probs, ys, m, scale](std::span<const float> g, detail::GradInputs gi) {
                          // d/dz = softmax(z) - e_y
                          for (std::size_t i = 0; i < ys.size(); ++i)
                            for (std::size_t j = 0; j < m; ++j) {
                              float d = (*probs)[i * m + j] - (static_cast<int>(j) == ys[i] ? 1.0f : 0.0f);
                              (*gi[0])[i * m + j] += g[0] * scale * d;
                            }
                        });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& onehot, Reduction r) {
  require_same(logits, onehot, "cross_entropy");
  const std::size_t b = logits.dim(0), m = logits.dim(1);
  std::vector<int> labels(b, -1);
  auto t = onehot.data();
  for (std::size_t i = 0; i < b; ++i) {
    int ones = 0;
    for (std::size_t j = 0; j < m; ++j) {
      float v = t[i * m + j];
      if (v == 1.0f) {
        ++ones;
        labels[i] = static_cast<int>(j);
      } else if (v != 0.0f) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw std::invalid_argument("cross_entropy: target row " + std::to_string(i) + " is not one-hot");
  }
  return cross_entropy(logits, labels, r);
}

Tensor mse(const Tensor& x, const Tensor& target, Reduction r) {
  require_same(x, target, "mse");
  auto s = sum(square(sub(x, target)));
  return r == Reduction::mean ? mul_scalar(s, 1.0f / static_cast<float>(x.numel())) : s;
}

Tensor bce(const Tensor& target, const Tensor& pred, Reduction r) {
  require_same(target, pred, "bce");
  static constexpr float eps = 1e-7f;
  auto t = target.data(), p = pred.data();
  double total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    double q = std::clamp(p[i], eps, 1.0f - eps);
    total -= t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q);
  }
  const float scale = reduction_scale(r, t.size());
  auto tn = target.node(), pn = pred.node();
  return make_op_result({1}, {static_cast<float>(total * scale)}, {target, pred}, "bce",
                        [tn, pn, scale](std::span<const float> g, detail::GradInputs gi) {
                          for (std::size_t i = 0; i < tn->data.size(); ++i) {
                            float raw = pn->data[i];
                            float q = std::clamp(raw, eps, 1.0f - eps);
                            float ti = tn->data[i];
                            if (gi[0]) (*gi[0])[i] += g[0] * scale * (std::log(1.0f - q) - std::log(q));
                            if (gi[1] && raw > eps && raw < 1.0f - eps)
                              (*gi[1])[i] += g[0] * scale * (q - ti) / (q * (1.0f - q));
                          }
                        });
}

Tensor bce_with_logits(const Tensor& target, const Tensor& logits, Reduction r) {
  require_same(target, logits, "bce_with_logits");
  auto t = target.data(), l = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i)
    total += std::max(l[i], 0.0f) - l[i] * t[i] + std::log1p(std::exp(-std::abs(l[i])));
  const float scale = reduction_scale(r, t.size());
  auto tn = target.node(), ln = logits.node();
  return make_op_result({1}, {static_cast<float>(total * scale)}, {target, logits}, "bce_with_logits",
                        [tn, ln, scale](std::span<const float> g, detail::GradInputs gi) {
                          for (std::size_t i = 0; i < tn->data.size(); ++i) {
                            float li = ln->data[i];
                            float s = li >= 0.0f ? 1.0f / (1.0f + std::exp(-li)) : std::exp(li) / (1.0f + std::exp(li));
                            if (gi[0]) (*gi[0])[i] -= g[0] * scale * li;
                            if (gi[1]) (*gi[1])[i] += g[0] * scale * (s - tn->data[i]);
                          }
                        });
}

}  // namespace advdef::nn
