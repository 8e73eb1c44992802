#include "advdef/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "advdef/linalg.hpp"

namespace advdef {

namespace {

std::atomic<std::uint64_t> next_id{1};
thread_local bool grad_mode = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape.empty()) throw std::invalid_argument("tensor rank must be at least 1");
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  n->id = next_id.fetch_add(1, std::memory_order_relaxed);
  n->op = "leaf";
  return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

void accumulate(std::vector<float>* dst, std::span<const float> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// Unary primitive whose derivative can be written from (input, output).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  auto in = a.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  auto an = a.node();
  auto result = make_op_result(a.shape(), std::move(out), {a}, name, nullptr);
  if (!result.needs_grad()) return result;
  // The output node is captured weakly to avoid a reference cycle.
  std::weak_ptr<detail::Node> self = result.node();
  result.node()->backward = [an, self, deriv](std::span<const float> g, detail::GradInputs gi) {
    auto out_node = self.lock();
    auto& x = an->data;
    auto& y = out_node->data;
    auto* dst = gi[0];
    for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i] * deriv(x[i], y[i]);
  };
  return result;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : node_(new_node(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }
std::span<const float> Tensor::data() const { return node_->data; }
std::span<float> Tensor::mutable_data() { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::needs_grad() const { return node_ && node_->needs_grad; }
std::uint64_t Tensor::id() const { return node_ ? node_->id : 0; }
const std::string& Tensor::op() const { return node_->op; }

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

Tensor make_op_result(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                      std::string op, detail::BackwardFn backward) {
  auto node = new_node(std::move(shape), std::move(data), false);
  node->op = std::move(op);
  bool needs = false;
  if (grad_mode)
    for (const auto& t : inputs) needs = needs || t.needs_grad();
  if (needs) {
    node->needs_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }
bool grad_enabled() { return grad_mode; }

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, "add",
                        [](std::span<const float> g, detail::GradInputs gi) {
                          accumulate(gi[0], g);
                          accumulate(gi[1], g);
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, "sub",
                        [](std::span<const float> g, detail::GradInputs gi) {
                          accumulate(gi[0], g);
                          if (gi[1])
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  auto an = a.node(), bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, "mul",
                        [an, bn](std::span<const float> g, detail::GradInputs gi) {
                          if (gi[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * bn->data[i];
                          if (gi[1])
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * an->data[i];
                        });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto x = a.data(), y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] == 0.0f) throw std::domain_error("div: division by zero at element " + std::to_string(i));
    out[i] = x[i] / y[i];
  }
  auto an = a.node(), bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, "div",
                        [an, bn](std::span<const float> g, detail::GradInputs gi) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            float inv = 1.0f / bn->data[i];
                            if (gi[0]) (*gi[0])[i] += g[i] * inv;
                            if (gi[1]) (*gi[1])[i] -= g[i] * an->data[i] * inv * inv;
                          }
                        });
}

Tensor neg(const Tensor& a) {
  return unary(a, "neg", [](float v) { return -v; }, [](float, float) { return -1.0f; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (!(a.data()[i] > 0.0f))
      throw std::domain_error("log: non-positive input at element " + std::to_string(i));
  return unary(a, "log", [](float v) { return std::log(v); }, [](float x, float) { return 1.0f / x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
               [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](float v) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor sign(const Tensor& a) {
  return unary(a, "sign", [](float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); },
               [](float, float) { return 0.0f; });
}

Tensor clip(const Tensor& a, float lo, float hi) {
  if (lo > hi) throw std::invalid_argument("clip: lo > hi");
  return unary(a, "clip", [lo, hi](float v) { return v < lo ? lo : (v > hi ? hi : v); },
               [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; });
}

Tensor elementwise(ElementwiseOp kind, const Tensor& a, const Tensor* b, ClipRange range) {
  bool binary = kind == ElementwiseOp::add || kind == ElementwiseOp::sub || kind == ElementwiseOp::mul ||
                kind == ElementwiseOp::div;
  if (binary != (b != nullptr))
    throw std::invalid_argument(binary ? "elementwise: binary op needs two operands"
                                       : "elementwise: unary op takes one operand");
  switch (kind) {
    case ElementwiseOp::add: return add(a, *b);
    case ElementwiseOp::sub: return sub(a, *b);
    case ElementwiseOp::mul: return mul(a, *b);
    case ElementwiseOp::div: return div(a, *b);
    case ElementwiseOp::neg: return neg(a);
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::log: return log(a);
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::tanh: return tanh(a);
    case ElementwiseOp::sign: return sign(a);
    case ElementwiseOp::clip: return clip(a, range.lo, range.hi);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary(a, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& a, float s) {
  return unary(a, "mul_scalar", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](float v) { return v * v; }, [](float x, float) { return 2.0f * x; });
}

// ---- linear algebra and shape ----------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: operands must be rank 2, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  std::vector<float> out(m * n);
  linalg::gemm(false, false, m, n, k, 1.0f, a.data().data(), b.data().data(), 0.0f, out.data());
  auto an = a.node(), bn = b.node();
  return make_op_result({m, n}, std::move(out), {a, b}, "matmul",
                        [an, bn, m, n, k](std::span<const float> g, detail::GradInputs gi) {
                          // dA = dC * B^T, dB = A^T * dC
                          if (gi[0]) linalg::gemm(false, true, m, k, n, 1.0f, g.data(), bn->data.data(), 1.0f,
                                                  gi[0]->data());
                          if (gi[1]) linalg::gemm(true, false, k, n, m, 1.0f, an->data.data(), g.data(), 1.0f,
                                                  gi[1]->data());
                        });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  std::size_t n = bias.numel();
  if (bias.rank() != 1 || x.shape().back() != n)
    throw std::invalid_argument("bias_add: bias " + shape_str(bias.shape()) + " does not match trailing dim of " +
                                shape_str(x.shape()));
  auto in = x.data(), bv = bias.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + bv[i % n];
  return make_op_result(x.shape(), std::move(out), {x, bias}, "bias_add",
                        [n](std::span<const float> g, detail::GradInputs gi) {
                          accumulate(gi[0], g);
                          if (gi[1])
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i % n] += g[i];
                        });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<float> out(a.data().begin(), a.data().end());
  return make_op_result(std::move(shape), std::move(out), {a}, "reshape",
                        [](std::span<const float> g, detail::GradInputs gi) { accumulate(gi[0], g); });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.dim(1))
    throw std::invalid_argument("slice_cols: bad range on " + shape_str(a.shape()));
  std::size_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
  std::vector<float> out(rows * w);
  auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = in[r * cols + begin + c];
  return make_op_result({rows, w}, std::move(out), {a}, "slice_cols",
                        [rows, cols, w, begin](std::span<const float> g, detail::GradInputs gi) {
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < w; ++c) (*gi[0])[r * cols + begin + c] += g[r * w + c];
                        });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0))
    throw std::invalid_argument("slice_rows: bad range on " + shape_str(a.shape()));
  std::size_t stride = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<float> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
  return make_op_result(std::move(shape), std::move(out), {a}, "slice_rows",
                        [begin, stride](std::span<const float> g, detail::GradInputs gi) {
                          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[begin * stride + i] += g[i];
                        });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return make_op_result({1}, {static_cast<float>(acc)}, {a}, "sum",
                        [](std::span<const float> g, detail::GradInputs gi) {
                          for (auto& v : *gi[0]) v += g[0];
                        });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0f / static_cast<float>(a.numel())); }

// ---- reverse mode ----------------------------------------------------------

GradTape GradTape::record(const Tensor& loss) {
  GradTape tape;
  std::unordered_set<detail::Node*> seen;
  // iterative post-order DFS; a node is emitted after all of its inputs
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  std::unordered_map<detail::Node*, std::shared_ptr<detail::Node>> owner;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  owner[loss.node().get()] = loss.node();
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto& child = node->inputs[next++];
      if (child->needs_grad && seen.insert(child.get()).second) {
        owner[child.get()] = child;
        stack.emplace_back(child.get(), 0);
      }
    } else {
      tape.nodes_.push_back(owner[node]);
      stack.pop_back();
    }
  }
  return tape;
}

Gradients backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.needs_grad())
    throw std::invalid_argument("backward: loss is not connected to any tensor on the tape");

  auto tape = GradTape::record(loss);
  const auto& nodes = tape.nodes();
  std::unordered_map<detail::Node*, std::vector<float>> grads;
  grads.reserve(nodes.size());
  grads[loss.node().get()] = {1.0f};

  std::vector<std::vector<float>*> slots;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* node = it->get();
    if (!node->backward) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    slots.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      auto* in = node->inputs[i].get();
      if (!in->needs_grad) continue;
      auto& buf = grads[in];
      if (buf.empty()) buf.assign(in->data.size(), 0.0f);
      slots[i] = &buf;
    }
    node->backward(found->second, slots);
  }

  Gradients out;
  for (const auto& node : nodes) {
    if (!node->requires_grad) continue;
    auto it = grads.find(node.get());
    std::vector<float> g = it != grads.end() ? std::move(it->second) : std::vector<float>(node->data.size(), 0.0f);
    out.by_id_.emplace(node->id, std::make_pair(node->shape, std::move(g)));
  }
  // consume the tape
  for (const auto& node : nodes) {
    if (node->requires_grad) continue;
    node->inputs.clear();
    node->backward = nullptr;
    node->needs_grad = false;
  }
  return out;
}

Tensor Gradients::grad(const Tensor& t) const {
  auto it = by_id_.find(t.id());
  if (it == by_id_.end()) throw std::out_of_range("gradient requested for a tensor that is not on the tape");
  return Tensor(it->second.first, it->second.second);
}

std::span<const float> Gradients::view(const Tensor& t) const {
  auto it = by_id_.find(t.id());
  if (it == by_id_.end()) throw std::out_of_range("gradient requested for a tensor that is not on the tape");
  return it->second.second;
}

bool Gradients::contains(const Tensor& t) const { return by_id_.count(t.id()) != 0; }

}  // namespace advdef
