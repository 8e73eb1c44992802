#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace advdef {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

// Gradient buffers handed to a backward function, one per input. An entry is
// null when that input does not participate in differentiation.
using GradInputs = std::span<std::vector<float>* const>;
using BackwardFn = std::function<void(std::span<const float> grad_out, GradInputs grad_in)>;

struct Node {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;  // leaf flag set by the user
  bool needs_grad = false;     // requires_grad or any input needs_grad
  std::uint64_t id = 0;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major float32 array. Copies share storage; math ops return new
/// tensors and record themselves for reverse-mode differentiation when any
/// input needs a gradient.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Direct write access. Only parameter updates and kernel construction
  /// should use this.
  std::span<float> mutable_data();
  float item() const;
  float operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool needs_grad() const;
  std::uint64_t id() const;
  const std::string& op() const;

  /// New leaf holding a copy of the data, disconnected from any graph.
  Tensor detach(bool requires_grad = false) const;
  Tensor clone() const { return detach(requires_grad()); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op_result(Shape, std::vector<float>, const std::vector<Tensor>&, std::string,
                               detail::BackwardFn);
};

/// Builds the output of a differentiable primitive. `backward` is dropped
/// when no input needs a gradient or when grad recording is disabled.
Tensor make_op_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                      std::string op, detail::BackwardFn backward);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise ----------------------------------------------------------

enum class ElementwiseOp { add, sub, mul, div, neg, exp, log, relu, sigmoid, tanh, sign, clip };

struct ClipRange {
  float lo = 0.0f;
  float hi = 1.0f;
};

/// Dispatches one of the elementwise primitives. `b` is required for the
/// binary kinds and must be absent for the unary ones; `clip` reads `range`.
Tensor elementwise(ElementwiseOp kind, const Tensor& a, const Tensor* b = nullptr,
                   ClipRange range = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sign(const Tensor& a);
Tensor clip(const Tensor& a, float lo, float hi);

// scalar-with-tensor, the only broadcasting allowed
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor square(const Tensor& a);

// ---- linear algebra and shape ----------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., n] + bias[n], bias repeated over all leading positions.
Tensor bias_add(const Tensor& x, const Tensor& bias);
Tensor reshape(const Tensor& a, Shape shape);
/// Columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// Rows [begin, end) along the leading axis.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- reverse mode ----------------------------------------------------------

/// Result of a backward pass: gradients for every requires_grad leaf reached
/// from the loss.
class Gradients {
 public:
  /// Throws std::out_of_range when `t` was not on the tape.
  Tensor grad(const Tensor& t) const;
  std::span<const float> view(const Tensor& t) const;
  bool contains(const Tensor& t) const;
  std::size_t size() const { return by_id_.size(); }

 private:
  friend Gradients backward(const Tensor& loss);
  std::unordered_map<std::uint64_t, std::pair<Shape, std::vector<float>>> by_id_;
};

/// Topologically ordered record of the operations between the leaves and a
/// loss. Each node appears once, inputs before consumers.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Reverse-mode pass from a scalar loss. The recorded graph is released
/// afterwards; calling again on the same loss throws.
Gradients backward(const Tensor& loss);

}  // namespace advdef
