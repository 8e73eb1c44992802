#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "advdef/rng.hpp"
#include "advdef/tensor.hpp"

namespace advdef::nn {

enum class Mode { train, eval };

enum class LayerKind {
  conv2d,
  dense,
  maxpool,
  dropout,
  batchnorm,
  upsample,
  transpose_conv2d,
  flatten,
  reshape,
  activation,
};

enum class Activation { none, relu, sigmoid, tanh };

std::string to_string(LayerKind kind);
std::string to_string(Activation act);
LayerKind layer_kind_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

/// One entry of a sequential network. Conv and dense layers carry a fused
/// activation; parameters are named "<name>.weight", "<name>.bias" etc.
struct LayerSpec {
  LayerKind kind = LayerKind::activation;
  std::string name;
  std::size_t units = 0;  // output channels (conv/tconv) or width (dense)
  std::size_t kernel = 3;
  float rate = 0.0f;      // dropout
  Activation activation = Activation::none;
  Shape target;           // reshape, per sample
  bool zero_init = false;

  static LayerSpec conv(std::string name, std::size_t channels, Activation act = Activation::relu,
                        std::size_t kernel = 3);
  static LayerSpec tconv(std::string name, std::size_t channels, Activation act = Activation::relu,
                         std::size_t kernel = 3);
  static LayerSpec dense(std::string name, std::size_t width, Activation act = Activation::relu);
  static LayerSpec maxpool();
  static LayerSpec dropout(float rate);
  static LayerSpec batchnorm(std::string name);
  static LayerSpec upsample();
  static LayerSpec flatten();
  static LayerSpec reshape(Shape per_sample);
  static LayerSpec act(Activation a);

  bool operator==(const LayerSpec&) const = default;
};

/// Named tensors owned by a model. Trainable entries are updated by the
/// optimizer; the rest are buffers such as batchnorm running statistics.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  void add(std::string name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }

  /// Deep copy. Gradient flags follow `requires_grad` for trainable entries.
  ParamStore copy(bool requires_grad) const;
  /// Copy that never records gradients; used for attacks and inference.
  ParamStore frozen() const { return copy(false); }

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<Entry> entries_;
};

struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // dropout masks; required in train mode when dropout is present
  float bn_momentum = 0.9f;
};

// ---- primitives (NHWC layouts) --------------------------------------------

/// "Same"-padded, stride-1 convolution. weight is [k, k, Cin, Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Adjoint of conv2d for stride 1. weight is [k, k, Cout, Cin].
Tensor transpose_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.
Tensor maxpool2x2(const Tensor& x);
/// Nearest-neighbour 2x upsampling.
Tensor upsample2x(const Tensor& x);
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Inverted dropout; identity in eval mode.
Tensor dropout(const Tensor& x, float rate, Mode mode, Rng* rng);

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // updated in place in train mode
  Tensor running_var;
  float momentum = 0.9f;
  float eps = 1e-5f;
};
/// Per-channel normalisation over N, H, W (or over N for rank-2 input).
Tensor batchnorm(const Tensor& x, BatchNormParams& p, Mode mode);

Tensor activate(const Tensor& x, Activation act);

// ---- sequential networks ---------------------------------------------------

/// Per-sample output shape after each layer, starting with the input shape.
std::vector<Shape> shape_trace(const std::vector<LayerSpec>& layers, const Shape& input);

/// He-uniform weights, zero biases, unit batchnorm scale. Deterministic in rng.
void init_params(const std::vector<LayerSpec>& layers, const Shape& input, ParamStore& params, Rng& rng);

/// x is batched: [N, ...per-sample shape].
Tensor forward(const std::vector<LayerSpec>& layers, const ParamStore& params, const Tensor& x,
               const ForwardContext& ctx);

// ---- losses ----------------------------------------------------------------

enum class Reduction { mean, sum };

/// Softmax cross-entropy of logits [B, m] against integer labels, averaged
/// (or summed) over the batch.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Reduction r = Reduction::mean);
/// Same with a one-hot target [B, m]; rejects targets that are not one-hot.
Tensor cross_entropy(const Tensor& logits, const Tensor& onehot, Reduction r = Reduction::mean);

/// Mean (or sum) of squared differences.
Tensor mse(const Tensor& x, const Tensor& target, Reduction r = Reduction::mean);
/// Binary cross-entropy of probabilities `pred` against `target`, with pred
/// clamped to [1e-7, 1 - 1e-7].
Tensor bce(const Tensor& target, const Tensor& pred, Reduction r = Reduction::mean);
/// Binary cross-entropy computed from logits; stable for saturated outputs.
Tensor bce_with_logits(const Tensor& target, const Tensor& logits, Reduction r = Reduction::mean);

/// Row-wise softmax without gradient tracking.
std::vector<float> softmax(std::span<const float> logits);
std::vector<int> argmax_rows(const Tensor& logits);

// ---- optimizers ------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  float lr = 1e-3f;
  float momentum = 0.0f;  // sgd only
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  /// Updates params[i] in place from grads[i].
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
  /// Updates every trainable entry that has a gradient.
  void step(ParamStore& params, const Gradients& grads);

  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  /// First and second moment (adam) or velocity (sgd, in `first`) of slot i.
  const std::vector<float>& first_moment(std::size_t i) const { return first_.at(i); }
  const std::vector<float>& second_moment(std::size_t i) const { return second_.at(i); }

 private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<float>> first_;
  std::vector<std::vector<float>> second_;
};

}  // namespace advdef::nn
