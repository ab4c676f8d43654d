#pragma once

#include "magic/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>

namespace magic {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor4<T>& value() const { return tape_->value(id_); }
  const Shape4& shape() const { return value().shape(); }
  const Tensor4<T>& grad() const { return tape_->grad(id_); }
  bool needs_grad() const { return tape_->needs_grad(id_); }
  T item() const {
    if (value().size() != 1) throw std::logic_error("Var::item on non-scalar");
    return value()[0];
  }

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording of a computation. Nodes are appended in evaluation order,
/// so replaying them backwards is a valid topological order. A backward closure is
/// stored only when at least one parent needs a gradient.
template <typename T>
class Tape {
 public:
  /// Receives the tape, the node's forward value and the gradient flowing into it.
  using Backward = std::function<void(Tape&, const Tensor4<T>& out, const Tensor4<T>& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor4<T> value) { return push(std::move(value), false, {}); }
  Var<T> variable(Tensor4<T> value) { return push(std::move(value), true, {}); }
  Var<T> leaf(Tensor4<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
  }

  /// Records an op output. `backward` is dropped when no parent needs a gradient.
  Var<T> record(Tensor4<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || needs_grad(p.id());
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  template <typename Range>
  Var<T> record_range(Tensor4<T> value, const Range& parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || needs_grad(p.id());
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor4<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient of the last backward() root w.r.t. node `id`; zeros if unreached.
  const Tensor4<T>& grad(std::size_t id) {
    auto& node = nodes_.at(id);
    if (node.grad.empty()) node.grad = Tensor4<T>(node.value.shape());
    return node.grad;
  }

  /// Mutable gradient accumulator for use inside backward closures.
  Tensor4<T>& grad_accumulator(std::size_t id) {
    auto& node = nodes_.at(id);
    if (node.grad.empty()) node.grad = Tensor4<T>(node.value.shape());
    return node.grad;
  }

  bool wants(const Var<T>& v) const { return needs_grad(v.id()); }

  /// Seeds d(root)/d(root) = 1 and propagates to every node that needs a gradient.
  void backward(const Var<T>& root) {
    if (root.tape() != this) throw std::logic_error("Tape::backward: foreign Var");
    if (root.value().size() != 1) throw std::logic_error("Tape::backward: root must be scalar");
    for (auto& node : nodes_) node.grad = Tensor4<T>();
    grad_accumulator(root.id()).fill(T(1));
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      // deque growth never happens during backward, so the reference stays valid
      node.backward(*this, node.value, node.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor4<T> value;
    Tensor4<T> grad;
    Backward backward;
    bool needs_grad = false;
  };

  Var<T> push(Tensor4<T> value, bool needs, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor4<T>(), std::move(backward), needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

}  // namespace magic
