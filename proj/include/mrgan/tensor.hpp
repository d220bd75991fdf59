#pragma once

// Dense channels-first tensor with a reverse-mode differentiation graph.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets a parameter collect gradient from every op that consumed it. Ops whose
// inputs require grad record a node holding a backward closure; backward()
// sweeps those nodes in reverse topological order and then releases them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mrgan/error.hpp"

namespace mrgan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

/// Fingerprint of the branch decisions taken by piecewise ops (activation
/// sign, pooling argmax, clamp). Recording is off unless a BranchTrace is
/// alive on this thread; finite-difference checks use it to spot stencils
/// that straddle a kink.
inline std::uint64_t*& branch_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}

inline void record_branch(std::uint64_t decision) {
  if (auto* h = branch_sink()) *h = (*h ^ decision) * 0x100000001b3ULL;
}

/// False while a NoGradGuard is alive on this thread.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables tape recording on this thread for its lifetime; used for
/// inference and for the frozen network in alternating updates.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class BranchTrace {
 public:
  BranchTrace() : previous_(detail::branch_sink()) { detail::branch_sink() = &hash_; }
  ~BranchTrace() { detail::branch_sink() = previous_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::uint64_t* previous_;
};

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something writes to it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents.
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    require(shape_numel(shape) == values.size(), ErrorCode::shape_mismatch,
            "tensor data length " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  /// A leaf that accumulates gradient.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor parameter(Shape shape, T fill = T(0)) {
    Tensor t(std::move(shape), fill);
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; all zeros when nothing has been accumulated yet.
  std::span<const T> grad() const { return node_->grad_buffer(); }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    require(numel() == 1, ErrorCode::shape_mismatch,
            "item() needs a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return node_->data[(c * dim(1) + y) * dim(2) + x];
  }

  /// Same values, no graph connection.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  Tensor clone() const { return detach(); }

  bool is_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  const NodePtr& node() const { return node_; }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

template <class T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  require(t.is_finite(), ErrorCode::non_finite, what + " contains NaN or Inf");
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& op) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          op + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

namespace detail {

/// Wraps freshly computed values as an op result; records the backward step
/// only when some input participates in differentiation.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any || !grad_mode()) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template <class T>
bool wants_grad(const Node<T>& node, std::size_t parent) {
  return node.parents[parent]->requires_grad;
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Gradients accumulate into every leaf that
/// requires grad; interior nodes are released afterwards, so the graph can be
/// walked only once.
template <class T>
void backward(const Tensor<T>& loss) {
  require(loss.numel() == 1, ErrorCode::shape_mismatch,
          "backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  using NodePtr = typename Tensor<T>::NodePtr;
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (detail::Node<T>* node : order) {
    if (!node->backward) continue;
    node->backward = nullptr;
    std::vector<NodePtr>().swap(node->parents);
    std::vector<T>().swap(node->grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops accept equal shapes, or a single-element
// operand on either side which is broadcast.

namespace detail {

enum class BinaryKind { add, sub, mul, div };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(a, b, name);
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto av = a.data();
  const auto bv = b.data();
  auto ai = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case BinaryKind::add: out[i] = ai(i) + bi(i); break;
      case BinaryKind::sub: out[i] = ai(i) - bi(i); break;
      case BinaryKind::mul: out[i] = ai(i) * bi(i); break;
      case BinaryKind::div: out[i] = ai(i) / bi(i); break;
    }
  }
  return make_result<T>(shape, std::move(out), {a, b}, [=](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    const auto& x = pa.data;
    const auto& y = pb.data;
    auto xa = [&](std::size_t i) { return a_scalar ? x[0] : x[i]; };
    auto yb = [&](std::size_t i) { return b_scalar ? y[0] : y[i]; };
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T d = 0;
        switch (kind) {
          case BinaryKind::add:
          case BinaryKind::sub: d = g[i]; break;
          case BinaryKind::mul: d = g[i] * yb(i); break;
          case BinaryKind::div: d = g[i] / yb(i); break;
        }
        ga[a_scalar ? 0 : i] += d;
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T d = 0;
        switch (kind) {
          case BinaryKind::add: d = g[i]; break;
          case BinaryKind::sub: d = -g[i]; break;
          case BinaryKind::mul: d = g[i] * xa(i); break;
          case BinaryKind::div: d = -g[i] * xa(i) / (yb(i) * yb(i)); break;
        }
        gb[b_scalar ? 0 : i] += d;
      }
    }
  });
}

/// Elementwise map with derivative expressed through input and output value.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [df](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * df(p.data[i], self.data[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::add, "add");
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::sub, "sub");
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::mul, "mul");
}
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::div, "div");
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> operator+(T s, const Tensor<T>& a) { return a + s; }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return a + (-s); }
template <class T>
Tensor<T> operator-(T s, const Tensor<T>& a) {
  return detail::unary(a, [s](T x) { return s - x; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}
template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return a * s; }
template <class T>
Tensor<T> operator-(const Tensor<T>& a) { return a * T(-1); }

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
/// Clamps from below; gradient passes only where the input was above the floor.
template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  if (detail::branch_sink())
    for (T x : a.data()) detail::record_branch(x < floor);
  return detail::unary(
      a, [floor](T x) { return x < floor ? floor : x; },
      [floor](T x, T) { return x < floor ? T(0) : T(1); });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto av = a.data();
  T total = std::accumulate(av.begin(), av.end(), T(0));
  return detail::make_result<T>(Shape{1}, {total}, {a}, [](detail::Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (auto& g : gp) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return sum(a) * (T(1) / static_cast<T>(a.numel()));
}

/// Copies into a new shape with the same element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorCode::shape_mismatch,
          "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  return detail::make_result<T>(std::move(shape), a.values(), {a}, [](detail::Node<T>& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

/// Picks flat elements by index; repeated indices accumulate on the way back.
template <class T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::size_t> indices) {
  const auto av = a.data();
  std::vector<T> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < av.size(), ErrorCode::invalid_argument, "gather index out of range");
    out[i] = av[indices[i]];
  }
  Shape shape{indices.size()};
  return detail::make_result<T>(shape, std::move(out), {a},
                                [idx = std::move(indices)](detail::Node<T>& self) {
                                  auto& gp = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    gp[idx[i]] += self.grad[i];
                                });
}

}  // namespace mrgan
