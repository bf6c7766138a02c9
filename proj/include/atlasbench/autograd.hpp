#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "atlasbench/tensor.hpp"

namespace atlasbench {

enum class PrimitiveKind {
  kLeaf,
  kAdd,
  kMul,
  kMatmul,
  kConv2d,
  kMaxpool2d,
  kRelu,
  kReshape,
  kMean,
  kSum,
  kPad2d,
  kAffineTransform2d,
  kSoftmaxCrossEntropy,
};

const char* primitive_name(PrimitiveKind kind);

template <typename T>
struct GraphNode;

/// Backward rule: given the gradient of the node output, accumulate into the
/// gradient buffers of its inputs. A null entry means that input does not
/// need a gradient.
template <typename T>
using BackwardRule = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>*> grad_in)>;

template <typename T>
struct GraphNode {
  PrimitiveKind kind = PrimitiveKind::kLeaf;
  Tensor<T> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<GraphNode>> inputs;
  BackwardRule<T> backward;
};

/// Handle to a value in the computation graph. Cheap to copy; copies share
/// the underlying node.
template <typename T>
class Var {
 public:
  Var() = default;

  /// Trainable (or input) leaf.
  static Var leaf(Tensor<T> value, bool requires_grad = true) {
    auto node = std::make_shared<GraphNode<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  explicit Var(std::shared_ptr<GraphNode<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// In-place access; only optimizers and loaders should use this.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const GraphNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<GraphNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<GraphNode<T>> node_;
};

/// Gradients of a scalar loss with respect to the leaves reachable from it.
template <typename T>
class Gradients {
 public:
  /// Gradient for `leaf`; zeros when the leaf was not reachable.
  Tensor<T> of(const Var<T>& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) return Tensor<T>(leaf.shape());
    return it->second;
  }
  bool reached(const Var<T>& leaf) const { return grads_.count(leaf.node()) != 0; }
  std::size_t size() const { return grads_.size(); }

  std::unordered_map<const GraphNode<T>*, Tensor<T>>& raw() { return grads_; }

 private:
  std::unordered_map<const GraphNode<T>*, Tensor<T>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Visits each node once in reverse
/// topological order, then releases the graph (interior nodes drop their
/// inputs and rules), so a graph can be differentiated only once.
template <typename T>
Gradients<T> backward(const Var<T>& loss);

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

/// Creates the output node for a primitive. The node is attached to the graph
/// only when grad mode is on and at least one input requires a gradient.
template <typename T>
Var<T> make_result(PrimitiveKind kind, Tensor<T> value, std::vector<Var<T>> inputs,
                   BackwardRule<T> rule);

}  // namespace detail

}  // namespace atlasbench
