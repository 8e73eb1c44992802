#include <cmath>
#include <stdexcept>

#include "advdef/layers.hpp"

namespace advdef::nn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dropout: return "dropout";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::upsample: return "upsample";
    case LayerKind::transpose_conv2d: return "transpose_conv2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::reshape: return "reshape";
    case LayerKind::activation: return "activation";
  }
  return "?";
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::conv2d, LayerKind::dense, LayerKind::maxpool, LayerKind::dropout, LayerKind::batchnorm,
                 LayerKind::upsample, LayerKind::transpose_conv2d, LayerKind::flatten, LayerKind::reshape,
                 LayerKind::activation})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
  for (auto a : {Activation::none, Activation::relu, Activation::sigmoid, Activation::tanh})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

LayerSpec LayerSpec::conv(std::string name, std::size_t channels, Activation act, std::size_t kernel) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.name = std::move(name);
  l.units = channels;
  l.activation = act;
  l.kernel = kernel;
  return l;
}

LayerSpec LayerSpec::tconv(std::string name, std::size_t channels, Activation act, std::size_t kernel) {
  LayerSpec l = conv(std::move(name), channels, act, kernel);
  l.kind = LayerKind::transpose_conv2d;
  return l;
}

LayerSpec LayerSpec::dense(std::string name, std::size_t width, Activation act) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.name = std::move(name);
  l.units = width;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::maxpool() {
  LayerSpec l;
  l.kind = LayerKind::maxpool;
  return l;
}

LayerSpec LayerSpec::dropout(float rate) {
  LayerSpec l;
  l.kind = LayerKind::dropout;
  l.rate = rate;
  return l;
}

LayerSpec LayerSpec::batchnorm(std::string name) {
  LayerSpec l;
  l.kind = LayerKind::batchnorm;
  l.name = std::move(name);
  return l;
}

LayerSpec LayerSpec::upsample() {
  LayerSpec l;
  l.kind = LayerKind::upsample;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::reshape(Shape per_sample) {
  LayerSpec l;
  l.kind = LayerKind::reshape;
  l.target = std::move(per_sample);
  return l;
}

LayerSpec LayerSpec::act(Activation a) {
  LayerSpec l;
  l.kind = LayerKind::activation;
  l.activation = a;
  return l;
}

// ---- ParamStore ------------------------------------------------------------

void ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), std::move(value), trainable});
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw std::out_of_range("no parameter named '" + name + "'");
}

Tensor& ParamStore::get(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e.value;
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

ParamStore ParamStore::copy(bool requires_grad) const {
  ParamStore out;
  for (const auto& e : entries_) out.add(e.name, e.value.detach(e.trainable && requires_grad), e.trainable);
  return out;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.trainable != b.trainable || a.value.shape() != b.value.shape()) return false;
    auto x = a.value.data(), y = b.value.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

// ---- simple layers ---------------------------------------------------------

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2) throw std::invalid_argument("dense: expected [batch, features], got " + shape_str(x.shape()));
  return bias_add(matmul(x, weight), bias);
}

Tensor dropout(const Tensor& x, float rate, Mode mode, Rng* rng) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0f) return x;
  if (!rng) throw std::invalid_argument("dropout: train mode needs an rng");
  const float scale = 1.0f / (1.0f - rate);
  auto mask = std::make_shared<std::vector<float>>(x.numel());
  std::vector<float> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng->uniform() < rate ? 0.0f : scale;
    out[i] = in[i] * (*mask)[i];
  }
  return make_op_result(x.shape(), std::move(out), {x}, "dropout",
                        [mask](std::span<const float> g, detail::GradInputs gi) {
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (*mask)[i];
                        });
}

Tensor batchnorm(const Tensor& x, BatchNormParams& p, Mode mode) {
  const std::size_t c = x.shape().back();
  if (p.gamma.numel() != c || p.beta.numel() != c || p.running_mean.numel() != c || p.running_var.numel() != c)
    throw std::invalid_argument("batchnorm: parameters have " + std::to_string(p.gamma.numel()) +
                                " channels, input has " + std::to_string(c));
  const std::size_t m = x.numel() / c;
  auto in = x.data();
  std::vector<float> mean_c(c), inv_std(c);
  if (mode == Mode::train) {
    std::vector<double> s(c, 0.0), s2(c, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) s[i % c] += in[i];
    for (std::size_t j = 0; j < c; ++j) s[j] /= static_cast<double>(m);
    for (std::size_t i = 0; i < in.size(); ++i) {
      double d = in[i] - s[i % c];
      s2[i % c] += d * d;
    }
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    for (std::size_t j = 0; j < c; ++j) {
      double var = s2[j] / static_cast<double>(m);
      mean_c[j] = static_cast<float>(s[j]);
      inv_std[j] = static_cast<float>(1.0 / std::sqrt(var + p.eps));
      double unbiased = m > 1 ? s2[j] / static_cast<double>(m - 1) : var;
      rm[j] = p.momentum * rm[j] + (1.0f - p.momentum) * static_cast<float>(s[j]);
      rv[j] = p.momentum * rv[j] + (1.0f - p.momentum) * static_cast<float>(unbiased);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean_c[j] = p.running_mean.data()[j];
      inv_std[j] = 1.0f / std::sqrt(p.running_var.data()[j] + p.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<float>>(in.size());
  std::vector<float> out(in.size());
  auto gamma = p.gamma.data(), beta = p.beta.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t j = i % c;
    (*xhat)[i] = (in[i] - mean_c[j]) * inv_std[j];
    out[i] = gamma[j] * (*xhat)[i] + beta[j];
  }
  auto gn = p.gamma.node();
  bool batch_stats = mode == Mode::train;
  return make_op_result(x.shape(), std::move(out), {x, p.gamma, p.beta}, "batchnorm",
                        [xhat, inv_std, gn, c, m, batch_stats](std::span<const float> g, detail::GradInputs gi) {
                          std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            sum_g[i % c] += g[i];
                            sum_gx[i % c] += g[i] * (*xhat)[i];
                          }
                          if (gi[1])
                            for (std::size_t j = 0; j < c; ++j) (*gi[1])[j] += static_cast<float>(sum_gx[j]);
                          if (gi[2])
                            for (std::size_t j = 0; j < c; ++j) (*gi[2])[j] += static_cast<float>(sum_g[j]);
                          if (!gi[0]) return;
                          const auto& gamma = gn->data;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            std::size_t j = i % c;
                            float scale = gamma[j] * inv_std[j];
                            if (batch_stats) {
                              double mg = sum_g[j] / static_cast<double>(m);
                              double mgx = sum_gx[j] / static_cast<double>(m);
                              (*gi[0])[i] += scale * static_cast<float>(g[i] - mg - (*xhat)[i] * mgx);
                            } else {
                              (*gi[0])[i] += scale * g[i];
                            }
                          }
                        });
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::none: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
  }
  return x;
}

// ---- sequential ------------------------------------------------------------

namespace {

Shape next_shape(const LayerSpec& l, const Shape& s) {
  auto need_hwc = [&](const char* what) {
    if (s.size() != 3)
      throw std::invalid_argument(std::string(what) + " layer '" + l.name + "' needs HWC input, got " + shape_str(s));
  };
  switch (l.kind) {
    case LayerKind::conv2d:
    case LayerKind::transpose_conv2d:
      need_hwc("conv");
      return {s[0], s[1], l.units};
    case LayerKind::dense:
      if (s.size() != 1) throw std::invalid_argument("dense layer '" + l.name + "' needs flat input, got " + shape_str(s));
      return {l.units};
    case LayerKind::maxpool:
      need_hwc("maxpool");
      if (s[0] % 2 || s[1] % 2) throw std::invalid_argument("maxpool needs even spatial dims, got " + shape_str(s));
      return {s[0] / 2, s[1] / 2, s[2]};
    case LayerKind::upsample:
      need_hwc("upsample");
      return {s[0] * 2, s[1] * 2, s[2]};
    case LayerKind::flatten: return {shape_numel(s)};
    case LayerKind::reshape:
      if (shape_numel(l.target) != shape_numel(s))
        throw std::invalid_argument("reshape to " + shape_str(l.target) + " from " + shape_str(s));
      return l.target;
    case LayerKind::dropout:
    case LayerKind::batchnorm:
    case LayerKind::activation: return s;
  }
  return s;
}

Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

std::vector<Shape> shape_trace(const std::vector<LayerSpec>& layers, const Shape& input) {
  std::vector<Shape> trace{input};
  for (const auto& l : layers) trace.push_back(next_shape(l, trace.back()));
  return trace;
}

void init_params(const std::vector<LayerSpec>& layers, const Shape& input, ParamStore& params, Rng& rng) {
  Shape s = input;
  auto uniform_tensor = [&](Shape shape, float limit, bool zero) {
    std::vector<float> v(shape_numel(shape), 0.0f);
    if (!zero)
      for (auto& x : v) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * limit);
    return Tensor(std::move(shape), std::move(v), true);
  };
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::conv2d: {
        std::size_t fan_in = l.kernel * l.kernel * s[2];
        params.add(l.name + ".weight", uniform_tensor({l.kernel, l.kernel, s[2], l.units},
                                                      std::sqrt(6.0f / static_cast<float>(fan_in)), l.zero_init));
        params.add(l.name + ".bias", Tensor::zeros({l.units}, true));
        break;
      }
      case LayerKind::transpose_conv2d: {
        std::size_t fan_in = l.kernel * l.kernel * s[2];
        params.add(l.name + ".weight", uniform_tensor({l.kernel, l.kernel, l.units, s[2]},
                                                      std::sqrt(6.0f / static_cast<float>(fan_in)), l.zero_init));
        params.add(l.name + ".bias", Tensor::zeros({l.units}, true));
        break;
      }
      case LayerKind::dense: {
        params.add(l.name + ".weight",
                   uniform_tensor({s[0], l.units}, std::sqrt(6.0f / static_cast<float>(s[0])), l.zero_init));
        params.add(l.name + ".bias", Tensor::zeros({l.units}, true));
        break;
      }
      case LayerKind::batchnorm: {
        std::size_t c = s.back();
        params.add(l.name + ".gamma", Tensor::full({c}, 1.0f, true));
        params.add(l.name + ".beta", Tensor::zeros({c}, true));
        params.add(l.name + ".running_mean", Tensor::zeros({c}), false);
        params.add(l.name + ".running_var", Tensor::full({c}, 1.0f), false);
        break;
      }
      default: break;
    }
    s = next_shape(l, s);
  }
}

Tensor forward(const std::vector<LayerSpec>& layers, const ParamStore& params, const Tensor& x,
               const ForwardContext& ctx) {
  Tensor h = x;
  const std::size_t n = x.dim(0);
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::conv2d:
        h = activate(conv2d(h, params.get(l.name + ".weight"), params.get(l.name + ".bias")), l.activation);
        break;
      case LayerKind::transpose_conv2d:
        h = activate(transpose_conv2d(h, params.get(l.name + ".weight"), params.get(l.name + ".bias")), l.activation);
        break;
      case LayerKind::dense:
        h = activate(dense(h, params.get(l.name + ".weight"), params.get(l.name + ".bias")), l.activation);
        break;
      case LayerKind::maxpool: h = maxpool2x2(h); break;
      case LayerKind::upsample: h = upsample2x(h); break;
      case LayerKind::dropout: h = dropout(h, l.rate, ctx.mode, ctx.rng); break;
      case LayerKind::batchnorm: {
        // running statistics share storage with the store's tensors
        BatchNormParams bn{params.get(l.name + ".gamma"), params.get(l.name + ".beta"),
                           params.get(l.name + ".running_mean"), params.get(l.name + ".running_var"),
                           ctx.bn_momentum};
        h = batchnorm(h, bn, ctx.mode);
        break;
      }
      case LayerKind::flatten: h = reshape(h, {n, h.numel() / n}); break;
      case LayerKind::reshape: h = reshape(h, batched(n, l.target)); break;
      case LayerKind::activation: h = activate(h, l.activation); break;
    }
  }
  return h;
}

}  // namespace advdef::nn
