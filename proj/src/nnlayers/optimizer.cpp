#include <cmath>
#include <stdexcept>

#include "advdef/layers.hpp"

namespace advdef::nn {

void Optimizer::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: params and grads differ in count");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape())
      throw std::invalid_argument("optimizer: shape mismatch at slot " + std::to_string(i) + ": " +
                                  shape_str(params[i].shape()) + " vs " + shape_str(grads[i].shape()));
  if (first_.empty()) {
    first_.resize(params.size());
    second_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      first_[i].assign(params[i].numel(), 0.0f);
      if (config_.kind == OptimizerKind::adam) second_[i].assign(params[i].numel(), 0.0f);
    }
  } else if (first_.size() != params.size()) {
    throw std::invalid_argument("optimizer: parameter set changed between steps");
  }

  ++steps_;
  const float lr = config_.lr;
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].mutable_data();
      auto g = grads[i].data();
      auto& v = first_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = config_.momentum * v[j] + g[j];
        p[j] -= lr * (config_.momentum == 0.0f ? g[j] : v[j]);
      }
    }
    return;
  }

  const double b1 = config_.beta1, b2 = config_.beta2;
  const double t = static_cast<double>(steps_);
  const float c1 = static_cast<float>(1.0 - std::pow(b1, t));
  const float c2 = static_cast<float>(1.0 - std::pow(b2, t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto g = grads[i].data();
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0f - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0f - config_.beta2) * g[j] * g[j];
      float mhat = m[j] / c1;
      float vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void Optimizer::step(ParamStore& params, const Gradients& grads) {
  std::vector<Tensor> ps, gs;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    ps.push_back(e.value);
    gs.push_back(grads.contains(e.value) ? grads.grad(e.value) : Tensor::zeros(e.value.shape()));
  }
  step(ps, gs);
}

}  // namespace advdef::nn
