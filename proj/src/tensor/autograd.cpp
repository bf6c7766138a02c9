#include "atlasbench/autograd.hpp"

#include <unordered_set>

namespace atlasbench {

namespace {
thread_local bool g_grad_enabled = true;
}

const char* primitive_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::kLeaf: return "leaf";
    case PrimitiveKind::kAdd: return "add";
    case PrimitiveKind::kMul: return "mul";
    case PrimitiveKind::kMatmul: return "matmul";
    case PrimitiveKind::kConv2d: return "conv2d";
    case PrimitiveKind::kMaxpool2d: return "maxpool2d";
    case PrimitiveKind::kRelu: return "relu";
    case PrimitiveKind::kReshape: return "reshape";
    case PrimitiveKind::kMean: return "mean";
    case PrimitiveKind::kSum: return "sum";
    case PrimitiveKind::kPad2d: return "pad2d";
    case PrimitiveKind::kAffineTransform2d: return "affine-transform-2d";
    case PrimitiveKind::kSoftmaxCrossEntropy: return "softmax-cross-entropy";
  }
  return "?";
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

namespace detail {

template <typename T>
Var<T> make_result(PrimitiveKind kind, Tensor<T> value, std::vector<Var<T>> inputs,
                   BackwardRule<T> rule) {
  if (!value.all_finite()) {
    throw NumericError(std::string(primitive_name(kind)) + ": non-finite output");
  }
  auto node = std::make_shared<GraphNode<T>>();
  node->kind = kind;
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(rule);
  }
  return Var<T>(std::move(node));
}

template Var<float> make_result(PrimitiveKind, Tensor<float>, std::vector<Var<float>>,
                                BackwardRule<float>);
template Var<double> make_result(PrimitiveKind, Tensor<double>, std::vector<Var<double>>,
                                 BackwardRule<double>);

}  // namespace detail

template <typename T>
Gradients<T> backward(const Var<T>& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  Gradients<T> result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS gives a topological order (inputs before users).
  // Owning handles: releasing a node's inputs must not free nodes still queued.
  std::vector<std::shared_ptr<GraphNode<T>>> order;
  std::unordered_set<GraphNode<T>*> visited;
  std::vector<std::pair<std::shared_ptr<GraphNode<T>>, std::size_t>> stack;
  auto* root = loss.node_ptr().get();
  stack.emplace_back(loss.node_ptr(), 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      std::shared_ptr<GraphNode<T>> child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  std::unordered_map<GraphNode<T>*, Tensor<T>> grads;
  grads.emplace(root, Tensor<T>(loss.shape(), T{1}));
  std::vector<Tensor<T>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    GraphNode<T>* node = it->get();
    auto git = grads.find(node);
    if (git == grads.end()) continue;
    if (node->inputs.empty()) {
      result.raw().emplace(node, std::move(git->second));
      grads.erase(git);
      continue;
    }
    // References survive rehashing; iterators do not.
    const Tensor<T>& grad_out = git->second;
    slots.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      GraphNode<T>* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(in);
      if (inserted) slot->second = Tensor<T>(in->value.shape());
      slots[i] = &slot->second;
    }
    node->backward(grad_out, slots);
    grads.erase(node);
    // Release the interior node; leaves stay intact for reuse.
    node->inputs.clear();
    node->backward = nullptr;
    node->requires_grad = false;
  }
  return result;
}

template Gradients<float> backward(const Var<float>&);
template Gradients<double> backward(const Var<double>&);

}  // namespace atlasbench
