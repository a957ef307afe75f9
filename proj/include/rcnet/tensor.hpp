#pragma once

// Dense double-precision tensor with a dynamic reverse-mode gradient graph.
//
// Every differentiable op records a Node holding its parents and a backward
// closure. Nodes carry a monotonically increasing sequence number, so sorting
// the reachable nodes by sequence gives a valid topological order (parents are
// always created before their children). A graph may be walked backwards only
// once; the nodes are released afterwards and a second walk throws.
//
// A graph is confined to the thread that built it. Tensors without a node are
// immutable unless mutated explicitly through mutable_data() on a leaf.

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
#include <unordered_set>
#include <utility>
#include <vector>

namespace rcnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

class Tensor;

namespace detail {

struct TensorImpl;

struct Node {
  using BackwardFn =
      std::function<void(Node& self, std::span<const double> grad_out)>;

  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool released = false;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Grad buffer of a parent, allocated on first use. Empty when the parent does
// not take part in differentiation.
inline std::span<double> grad_buffer(TensorImpl& impl) {
  if (!impl.requires_grad) return {};
  if (impl.grad.empty()) impl.grad.assign(impl.storage->size(), 0.0);
  return impl.grad;
}

inline void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::domain_error(std::string(op) + ": non-finite value produced");
    }
  }
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->storage =
        std::make_shared<std::vector<double>>(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    detail::check_finite(*impl_->storage, "Tensor");
  }

  Tensor(Shape shape, std::vector<double> values)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (values.size() != shape_numel(shape)) {
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " +
                                  shape_string(shape));
    }
    detail::check_finite(values, "Tensor");
    impl_->storage = std::make_shared<std::vector<double>>(std::move(values));
    impl_->shape = std::move(shape);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector{v}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t numel() const { return impl().storage->size(); }

  std::span<const double> data() const { return *impl().storage; }

  double operator[](std::size_t i) const { return (*impl().storage)[i]; }

  /// Element of a (C, H, W) tensor.
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = impl().shape;
    return (*impl().storage)[(c * s[s.size() - 2] + h) * s.back() + w];
  }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item: tensor of shape " +
                                  shape_string(shape()) + " is not a scalar");
    }
    return (*impl().storage)[0];
  }

  /// Writable view of a leaf tensor. Views created by detach() share storage.
  std::span<double> mutable_data() {
    if (impl().node) {
      throw std::logic_error("mutable_data: tensor is an op result, not a leaf");
    }
    return *impl().storage;
  }

  bool is_leaf() const { return impl().node == nullptr; }
  bool requires_grad() const { return impl().requires_grad; }

  Tensor& set_requires_grad(bool flag) {
    if (impl().node) {
      throw std::logic_error("set_requires_grad: only leaves can be toggled");
    }
    impl_->requires_grad = flag;
    if (!flag) impl_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !impl().grad.empty(); }

  /// Accumulated gradient; all zeros when requires_grad but nothing flowed.
  std::span<const double> grad() const {
    auto& g = impl_->grad;
    if (g.empty() && impl_->requires_grad) g.assign(numel(), 0.0);
    return g;
  }

  void zero_grad() {
    if (!impl().grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  /// Shares storage, drops the graph.
  Tensor detach() const {
    Tensor out;
    out.impl_ = std::make_shared<detail::TensorImpl>();
    out.impl_->shape = impl().shape;
    out.impl_->storage = impl().storage;
    return out;
  }

  Tensor clone() const {
    return Tensor(impl().shape, std::vector<double>(impl().storage->begin(),
                                                   impl().storage->end()));
  }

  bool same_storage(const Tensor& other) const {
    return impl().storage == other.impl().storage;
  }

  bool same_tensor(const Tensor& other) const { return impl_ == other.impl_; }

  void backward() const;

  const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

  static Tensor from_handle(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  const detail::TensorImpl& impl() const {
    if (!impl_) throw std::logic_error("Tensor: use of an undefined tensor");
    return *impl_;
  }
  detail::TensorImpl& impl() {
    if (!impl_) throw std::logic_error("Tensor: use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Wraps freshly computed values into a tensor, recording a node when any
/// input participates in differentiation and grad mode is on.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, Node::BackwardFn backward,
                          const char* op) {
  check_finite(values, op);
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    return t.requires_grad();
  });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->seq = next_seq();
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.handle());
  node->backward = std::move(backward);
  const auto& impl = out.handle();
  impl->requires_grad = true;
  impl->node = std::move(node);
  return out;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward: loss of shape " +
                                shape_string(shape()) + " is not a scalar");
  }
  if (!requires_grad()) {
    throw std::logic_error("backward: loss does not depend on any parameter");
  }

  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    auto* cur = stack.back();
    stack.pop_back();
    if (!cur->node || !seen.insert(cur).second) continue;
    if (cur->node->released) {
      throw std::logic_error(
          "backward: graph already consumed by a previous backward pass; "
          "re-run the forward computation");
    }
    order.push_back(cur);
    for (auto& in : cur->node->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) {
    return a->node->seq > b->node->seq;
  });

  for (auto* t : order) t->grad.assign(t->storage->size(), 0.0);
  if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
  impl_->grad[0] += 1.0;

  for (auto* t : order) {
    auto& node = *t->node;
    node.backward(node, t->grad);
    node.backward = nullptr;
    node.released = true;
  }
}

}  // namespace rcnet
