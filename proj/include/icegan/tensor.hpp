#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle to a Node holding shape, row-major values and
// (optionally) an accumulated gradient. Operations that touch a tensor with
// requires_grad record their inputs and a backward rule on the result node;
// backward() walks the recorded graph in reverse topological order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace icegan {

// Tensor storage. Eigen's vectorised kernels peel differently depending on
// where a buffer starts, so storage is aligned to the widest packet size;
// otherwise results would vary in the last bits with heap layout.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// Activation-pattern fingerprint of kinked ops (relu, leaky_relu, abs,
/// clamp), collected only while a gradient check is listening.
struct KinkProbe {
  bool active = false;
  std::uint64_t hash = 0;

  void mix(std::uint64_t v) { hash = (hash ^ v) * 0x100000001B3ULL + 0x9E3779B97F4A7C15ULL; }
};

inline KinkProbe& kink_probe() {
  thread_local KinkProbe probe;
  return probe;
}

// Returns the gradient buffer of `n`, allocating zeros on first use.
inline Buffer& grad_buffer(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

}  // namespace detail

/// Disables tape recording for the lifetime of the scope (thread-local).
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradScope() { detail::grad_mode_flag() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  template <class Alloc>
    requires(!std::is_same_v<Alloc, Buffer::allocator_type>)
  Tensor(Shape shape, const std::vector<double, Alloc>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, Buffer values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct mutation is reserved for leaves (initialisation, optimiser updates).
  std::span<double> mutable_data() {
    if (!node_->is_leaf) throw std::logic_error("mutable_data() on non-leaf tensor '" + node_->op + "'");
    return node_->value;
  }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw std::logic_error("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return detail::grad_buffer(*node_); }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no tape history.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  std::uint64_t id() const { return node_->id; }
  const std::string& op() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds the result of an operation. When recording is enabled and any
/// input requires a gradient, the backward rule and inputs are attached.
/// The rule receives the result node (with its grad populated) and must add
/// into the grad buffers of inputs that require gradients.
inline Tensor make_op(Shape shape, Buffer values, std::string op_name,
                      const std::vector<Tensor>& inputs, detail::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values), false);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto& node = *out.node();
  node.op = std::move(op_name);
  if (needs) {
    node.requires_grad = true;
    node.is_leaf = false;
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.node());
    node.backward = std::move(backward);
  }
  return out;
}

namespace detail {
inline bool wants_grad(const Node& self, std::size_t input) {
  return self.inputs[input]->requires_grad;
}
inline Buffer& input_grad(Node& self, std::size_t input) {
  return grad_buffer(*self.inputs[input]);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tape and backward pass

class ComputationTape {
 public:
  struct Entry {
    std::uint64_t output;
    std::vector<std::uint64_t> inputs;
    std::string op;
  };

  /// Records every grad-requiring node reachable from `root` in topological
  /// order (inputs before outputs).
  static ComputationTape record(const Tensor& root) {
    ComputationTape tape;
    tape.root_ = root.node();
    if (!root.requires_grad()) return tape;
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        auto* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        continue;
      }
      tape.order_.push_back(node);
      stack.pop_back();
    }
    for (auto* n : tape.order_) {
      if (n->is_leaf) continue;
      Entry e{n->id, {}, n->op};
      for (const auto& in : n->inputs) e.inputs.push_back(in->id);
      tape.entries_.push_back(std::move(e));
    }
    return tape;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  /// Replays backward rules in reverse order. Leaf gradients accumulate;
  /// intermediate gradients are rebuilt on every replay and released after
  /// their rule has run.
  void backward() const {
    if (!root_ || !root_->requires_grad) return;
    for (auto* n : order_) {
      if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
    }
    detail::grad_buffer(*root_)[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto* n = *it;
      if (n->is_leaf) continue;
      if (n->backward) n->backward(*n);
      Buffer().swap(n->grad);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
  std::vector<Entry> entries_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf requiring a gradient.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  ComputationTape::record(loss).backward();
}

// ---------------------------------------------------------------------------
// Broadcasting

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// For each flat index of `out`, the flat index of `in` it reads from.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const std::size_t extent = in[i - offset];
    stride[i] = extent == 1 ? 0 : s;
    s *= extent;
  }
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      pos += stride[d];
      if (idx[d] < out[d]) break;
      pos -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

enum class ElementwiseOp { add, sub, mul, relu, sigmoid, tanh, square, abs };

inline bool is_binary(ElementwiseOp op) {
  return op == ElementwiseOp::add || op == ElementwiseOp::sub || op == ElementwiseOp::mul;
}

inline const char* op_name(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::add: return "add";
    case ElementwiseOp::sub: return "sub";
    case ElementwiseOp::mul: return "mul";
    case ElementwiseOp::relu: return "relu";
    case ElementwiseOp::sigmoid: return "sigmoid";
    case ElementwiseOp::tanh: return "tanh";
    case ElementwiseOp::square: return "square";
    case ElementwiseOp::abs: return "abs";
  }
  return "?";
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd dfdx) {
  Buffer out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_op(a.shape(), std::move(out), name, {a}, [dfdx](Node& self) {
    const auto& x = self.inputs[0]->value;
    auto& gx = input_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

// `dfa`/`dfb` give partial derivatives given (a, b).
template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da dfa, Db dfb) {
  if (a.shape() == b.shape()) {
    Buffer out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
    return make_op(a.shape(), std::move(out), name, {a, b}, [dfa, dfb](Node& self) {
      const auto& x = self.inputs[0]->value;
      const auto& y = self.inputs[1]->value;
      if (wants_grad(self, 0)) {
        auto& g = input_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfa(x[i], y[i]);
      }
      if (wants_grad(self, 1)) {
        auto& g = input_grad(self, 1);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfb(x[i], y[i]);
      }
    });
  }
  Shape shape = broadcast_shapes(a.shape(), b.shape());
  auto map_a = std::make_shared<std::vector<std::size_t>>(broadcast_map(shape, a.shape()));
  auto map_b = std::make_shared<std::vector<std::size_t>>(broadcast_map(shape, b.shape()));
  Buffer out(shape_numel(shape));
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[(*map_a)[i]], y[(*map_b)[i]]);
  return make_op(std::move(shape), std::move(out), name, {a, b}, [=](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const bool ga = wants_grad(self, 0);
    const bool gb = wants_grad(self, 1);
    Buffer* pa = ga ? &input_grad(self, 0) : nullptr;
    Buffer* pb = gb ? &input_grad(self, 1) : nullptr;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double xv = x[(*map_a)[i]];
      const double yv = y[(*map_b)[i]];
      if (pa) (*pa)[(*map_a)[i]] += self.grad[i] * dfa(xv, yv);
      if (pb) (*pb)[(*map_b)[i]] += self.grad[i] * dfb(xv, yv);
    }
  });
}

inline double sigmoid_value(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
namespace detail {
template <typename Region>
void record_kinks(const Tensor& a, Region region) {
  auto& probe = kink_probe();
  if (!probe.active) return;
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (double x : a.data()) {
    word = word * 3 + static_cast<std::uint64_t>(region(x));
    if (++bits == 40) {
      probe.mix(word);
      word = 0;
      bits = 0;
    }
  }
  probe.mix(word);
}
}  // namespace detail

inline Tensor relu(const Tensor& a) {
  detail::record_kinks(a, [](double x) { return x > 0; });
  return detail::unary_op(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Tensor leaky_relu(const Tensor& a, double slope) {
  detail::record_kinks(a, [](double x) { return x > 0; });
  return detail::unary_op(
      a, "leaky_relu", [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, "sigmoid", detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
// Subgradient 0 at the kink.
inline Tensor abs(const Tensor& a) {
  detail::record_kinks(a, [](double x) { return x > 0 ? 2 : (x < 0 ? 0 : 1); });
  return detail::unary_op(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
// Gradient is zero outside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  detail::record_kinks(a, [lo, hi](double x) { return x < lo ? 0 : (x > hi ? 2 : 1); });
  return detail::unary_op(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}
inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case ElementwiseOp::add: return add(a, b);
    case ElementwiseOp::sub: return sub(a, b);
    case ElementwiseOp::mul: return mul(a, b);
    default: break;
  }
  throw std::invalid_argument(std::string("elementwise op '") + op_name(op) + "' is unary");
}

inline Tensor elementwise(ElementwiseOp op, const Tensor& a) {
  switch (op) {
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::tanh: return tanh(a);
    case ElementwiseOp::square: return square(a);
    case ElementwiseOp::abs: return abs(a);
    default: break;
  }
  throw std::invalid_argument(std::string("elementwise op '") + op_name(op) + "' needs two operands");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_op({1}, {total}, "sum", {a}, [](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sums over `axis`, dropping it. A rank-1 input reduces to shape [1].
inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("sum_axis: axis out of range for " + shape_str(a.shape()));
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Buffer out(outer * inner, 0.0);
  const auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + k) * inner + i];
  return make_op(std::move(out_shape), std::move(out), "sum_axis", {a}, [outer, inner, n](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] += self.grad[o * inner + i];
  });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const double n = static_cast<double>(a.dim(axis));
  return scale(sum_axis(a, axis), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Buffer values(a.data().begin(), a.data().end());
  return make_op(std::move(shape), std::move(values), "reshape", {a}, [](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Swaps the last two axes (rank >= 2).
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  Shape shape = a.shape();
  const std::size_t rows = shape[shape.size() - 2];
  const std::size_t cols = shape[shape.size() - 1];
  const std::size_t batch = a.numel() / (rows * cols);
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Buffer out(a.numel());
  const auto x = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[b * rows * cols + c * rows + r] = x[b * rows * cols + r * cols + c];
  return make_op(std::move(shape), std::move(out), "transpose", {a}, [=](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          g[b * rows * cols + r * cols + c] += self.grad[b * rows * cols + c * rows + r];
  });
}

/// Concatenates along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " does not match " + shape_str(first) + " off axis " + std::to_string(axis));
    shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = shape[axis] * inner;
  Buffer out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    offset += widths[k];
  }
  return make_op(std::move(shape), std::move(out), "concat", parts, [widths, outer, row](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (detail::wants_grad(self, k)) {
        auto& g = detail::input_grad(self, k);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += self.grad[o * row + offset + i];
      }
      offset += widths[k];
    }
  });
}

/// Half-open slice [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape shape = s;
  shape[axis] = end - begin;
  const std::size_t src_row = s[axis] * inner;
  const std::size_t dst_row = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Buffer out(outer * dst_row);
  const auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.begin() + o * src_row + start, dst_row, out.begin() + o * dst_row);
  return make_op(std::move(shape), std::move(out), "slice", {a}, [=](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < dst_row; ++i) g[o * src_row + start + i] += self.grad[o * dst_row + i];
  });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
}  // namespace detail

/// Rank-2 x rank-2, or batched with rank 3 on either side (a rank-2 operand
/// is shared across the batch).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) {
    throw ShapeError("matmul expects rank 2 or 3, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
  if (ba != bb && ba != 1 && bb != 1) {
    throw ShapeError("matmul batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = std::max(ba, bb);
  const bool batched = a.rank() == 3 || b.rank() == 3;
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Buffer out(batch * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const std::size_t sa = ba == 1 ? 0 : m * k;
  const std::size_t sb = bb == 1 ? 0 : k * n;
  for (std::size_t t = 0; t < batch; ++t) {
    detail::MatMap(out.data() + t * m * n, m, n).noalias() =
        detail::ConstMatMap(pa + t * sa, m, k) * detail::ConstMatMap(pb + t * sb, k, n);
  }
  return make_op(std::move(shape), std::move(out), "matmul", {a, b}, [=](detail::Node& self) {
    const double* pa = self.inputs[0]->value.data();
    const double* pb = self.inputs[1]->value.data();
    const bool ga = detail::wants_grad(self, 0);
    const bool gb = detail::wants_grad(self, 1);
    double* gpa = ga ? detail::input_grad(self, 0).data() : nullptr;
    double* gpb = gb ? detail::input_grad(self, 1).data() : nullptr;
    for (std::size_t t = 0; t < batch; ++t) {
      detail::ConstMatMap g(self.grad.data() + t * m * n, m, n);
      if (ga) detail::MatMap(gpa + t * sa, m, k).noalias() += g * detail::ConstMatMap(pb + t * sb, k, n).transpose();
      if (gb) detail::MatMap(gpb + t * sb, k, n).noalias() += detail::ConstMatMap(pa + t * sa, m, k).transpose() * g;
    }
  });
}

/// Fully connected layer: x [B, in] . w[out, in]^T + bias[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  if (bias.numel() != w.dim(0)) throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for weight " + shape_str(w.shape()));
  const std::size_t batch = x.dim(0), in = x.dim(1), outf = w.dim(0);
  Buffer out(batch * outf);
  detail::MatMap y(out.data(), batch, outf);
  y.noalias() = detail::ConstMatMap(x.data().data(), batch, in) * detail::ConstMatMap(w.data().data(), outf, in).transpose();
  Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), outf);
  y.rowwise() += bv;
  return make_op({batch, outf}, std::move(out), "linear", {x, w, bias}, [=](detail::Node& self) {
    detail::ConstMatMap g(self.grad.data(), batch, outf);
    if (detail::wants_grad(self, 0)) {
      detail::MatMap(detail::input_grad(self, 0).data(), batch, in).noalias() +=
          g * detail::ConstMatMap(self.inputs[1]->value.data(), outf, in);
    }
    if (detail::wants_grad(self, 1)) {
      detail::MatMap(detail::input_grad(self, 1).data(), outf, in).noalias() +=
          g.transpose() * detail::ConstMatMap(self.inputs[0]->value.data(), batch, in);
    }
    if (detail::wants_grad(self, 2)) {
      Eigen::Map<Eigen::RowVectorXd>(detail::input_grad(self, 2).data(), outf) += g.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family over the last axis

inline Tensor softmax(const Tensor& a) {
  const std::size_t n = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / n;
  Buffer out(a.numel());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double mx = *std::max_element(x.begin() + r * n, x.begin() + (r + 1) * n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (out[r * n + i] = std::exp(x[r * n + i] - mx));
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] /= z;
  }
  return make_op(a.shape(), std::move(out), "softmax", {a}, [rows, n](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    const auto& y = self.value;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += self.grad[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[r * n + i] * (self.grad[r * n + i] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& a) {
  const std::size_t n = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / n;
  Buffer out(a.numel());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double mx = *std::max_element(x.begin() + r * n, x.begin() + (r + 1) * n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(x[r * n + i] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = x[r * n + i] - lz;
  }
  return make_op(a.shape(), std::move(out), "log_softmax", {a}, [rows, n](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += self.grad[r * n + i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += self.grad[r * n + i] - std::exp(self.value[r * n + i]) * total;
    }
  });
}

/// Euclidean norm over the last axis (that axis is dropped). Gradient is
/// taken as zero at the origin.
inline Tensor vector_norm(const Tensor& a) {
  const std::size_t d = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / d;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  Buffer out(rows);
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += x[r * d + i] * x[r * d + i];
    out[r] = std::sqrt(s);
  }
  return make_op(std::move(shape), std::move(out), "vector_norm", {a}, [rows, d](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    const auto& x = self.inputs[0]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      if (self.value[r] == 0.0) continue;
      const double f = self.grad[r] / self.value[r];
      for (std::size_t i = 0; i < d; ++i) g[r * d + i] += f * x[r * d + i];
    }
  });
}

}  // namespace icegan
