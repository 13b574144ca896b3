#pragma once

// Reverse-mode differentiation over a dynamically built graph. Each Var owns
// a node holding its forward value; ops record a closure that pushes the
// node's gradient to its parents. Parameter leaves carry a pointer to the
// ParameterStore gradient buffer they accumulate into.

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "msbdn/kernels.hpp"
#include "msbdn/tensor.hpp"

namespace msbdn {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Tensor<T>* sink = nullptr;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;

  /// Constant leaf (no gradient).
  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  /// Leaf whose gradient is added into `sink` by backward().
  static Var leaf(Tensor<T> value, Tensor<T>* sink) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->sink = sink;
    node->requires_grad = true;
    return Var(std::move(node));
  }

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Interior node produced by an op.
  template <class Fn>
  static Var make(Tensor<T> value, std::vector<Var> inputs, Fn&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    for (auto& in : inputs) {
      node->requires_grad = node->requires_grad || in.requires_grad();
      node->parents.push_back(in.node_);
    }
    if (node->requires_grad) node->backward = std::forward<Fn>(backward);
    else node->parents.clear();
    return Var(std::move(node));
  }

 private:
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<Node<T>> node_;
};

/// Back-propagate from a single-element output, seeding d(out)/d(out) = 1.
/// Gradients of parameter leaves are accumulated into their sinks.
template <class T>
void backward(const Var<T>& out) {
  if (out.value().size() != 1)
    throw std::invalid_argument("backward: output must have exactly one element, got " + to_string(out.shape()));
  if (!out.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{out.node().get(), 0}};
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  out.node()->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& node = **it;
    if (node.grad.empty()) continue;
    if (node.backward) node.backward(node);
    if (node.sink) *node.sink += node.grad;
  }
}

namespace ops {

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  auto y = kernels::conv2d_forward(x.value(), w.value(), b.value(), stride, pad);
  return Var<T>::make(std::move(y), {x, w, b}, [stride, pad](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    kernels::conv2d_backward(xn.value, wn.value, self.grad, stride, pad,
                             xn.requires_grad ? &xn.grad_buffer() : nullptr,
                             wn.requires_grad ? &wn.grad_buffer() : nullptr,
                             bn.requires_grad ? &bn.grad_buffer() : nullptr);
  });
}

template <class T>
Var<T> deconv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad,
                std::size_t out_pad) {
  auto y = kernels::deconv2d_forward(x.value(), w.value(), b.value(), stride, pad, out_pad);
  return Var<T>::make(std::move(y), {x, w, b}, [stride, pad](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    kernels::deconv2d_backward(xn.value, wn.value, self.grad, stride, pad,
                               xn.requires_grad ? &xn.grad_buffer() : nullptr,
                               wn.requires_grad ? &wn.grad_buffer() : nullptr,
                               bn.requires_grad ? &bn.grad_buffer() : nullptr);
  });
}

template <class T>
Var<T> lrelu(const Var<T>& x) {
  return Var<T>::make(kernels::lrelu_forward(x.value()), {x}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    kernels::lrelu_backward(xn.value, self.grad, xn.grad_buffer());
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer() += self.grad;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return Var<T>::make(a.value() - b.value(), {a, b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) an.grad_buffer() += self.grad;
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Channel-axis concatenation of two tensors with equal N, H, W.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw std::invalid_argument("concat_channels: shape mismatch " + to_string(sa) + " vs " + to_string(sb));
  Tensor<T> y(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t la = sa.c * sa.h * sa.w, lb = sb.c * sb.h * sb.w;
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().sample(n), la, y.sample(n));
    std::copy_n(b.value().sample(n), lb, y.sample(n) + la);
  }
  return Var<T>::make(std::move(y), {a, b}, [la, lb](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    for (std::size_t n = 0; n < self.value.n(); ++n) {
      const T* g = self.grad.sample(n);
      if (an.requires_grad) {
        T* d = an.grad_buffer().sample(n);
        for (std::size_t i = 0; i < la; ++i) d[i] += g[i];
      }
      if (bn.requires_grad) {
        T* d = bn.grad_buffer().sample(n);
        for (std::size_t i = 0; i < lb; ++i) d[i] += g[la + i];
      }
    }
  });
}

/// Mean squared error; returns a (1,1,1,1) tensor. Accumulates in double.
template <class T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "mse_loss");
  const auto& p = pred.value();
  const auto& t = target.value();
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = double(p[i]) - double(t[i]);
    s += d * d;
  }
  const double count = double(p.size());
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(s / count));
  return Var<T>::make(std::move(y), {pred, target}, [count](Node<T>& self) {
    auto& pn = *self.parents[0];
    auto& tn = *self.parents[1];
    const T scale = static_cast<T>(2.0 * double(self.grad[0]) / count);
    if (pn.requires_grad) {
      auto& g = pn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (pn.value[i] - tn.value[i]);
    }
    if (tn.requires_grad) {
      auto& g = tn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (pn.value[i] - tn.value[i]);
    }
  });
}

/// Sum of elementwise products with a constant tensor. Handy for probing a
/// Jacobian with a fixed cotangent.
template <class T>
Var<T> weighted_sum(const Var<T>& x, Tensor<T> weights) {
  require_same_shape(x.shape(), weights.shape(), "weighted_sum");
  Tensor<T> y(Shape{1, 1, 1, 1}, static_cast<T>(dot(x.value(), weights)));
  return Var<T>::make(std::move(y), {x}, [weights = std::move(weights)](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

}  // namespace ops
}  // namespace msbdn
