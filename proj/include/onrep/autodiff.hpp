#pragma once

#include "onrep/tensor.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace onrep {

enum class OpKind {
  Leaf,
  Conv2d,
  Linear,
  PixelShuffle,
  Gelu,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddScalar,
  Abs,
  Sum,
  Mean,
  Clamp,
  Reshape,
  Pad,
  Depthwise,
  ScaleChannels,
  Blur,
  PadKernel,
  MixLeft,
  MixRight,
  KernelSum,
  DiagKernel,
  Concat,
};

const char* op_name(OpKind kind);

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const {
    if (!tape_) throw std::logic_error("unbound Var");
    return *tape_;
  }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor<Scalar>& value() const { return tape().value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// slot += e, where an empty slot holds implicit zeros of `shape`.
template <typename Scalar, typename Expr>
void accumulate(Tensor<Scalar>& slot, const Shape& shape, const Expr& e) {
  if (slot.empty())
    slot = Tensor<Scalar>(shape, e);
  else
    slot.data() += e;
}

template <typename Scalar>
Tensor<Scalar>& zeroed(Tensor<Scalar>& slot, const Shape& shape) {
  if (slot.empty()) slot = Tensor<Scalar>::zeros(shape);
  return slot;
}

/// Per-parameter gradients indexed by the id given to Tape::parameter.
template <typename Scalar>
using Gradients = std::vector<Tensor<Scalar>>;

/// Reverse-mode tape. Every op stores a forward closure (so the tape can be
/// replayed) and a backward closure that accumulates into its inputs' grads.
/// An input grad that is still empty stands for zeros; closures go through
/// accumulate() or zeroed() rather than writing into it directly.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using Inputs = std::span<const TensorT* const>;
  using ForwardFn = std::function<TensorT(Inputs)>;
  /// (inputs, output value, output grad, input grads; null where not needed)
  using BackwardFn =
      std::function<void(Inputs, const TensorT&, const TensorT&, std::span<TensorT* const>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(TensorT value) { return push_leaf(std::move(value), false, {}); }
  Var<Scalar> variable(TensorT value) { return push_leaf(std::move(value), true, {}); }
  Var<Scalar> parameter(TensorT value, std::size_t param_id) {
    param_count_ = std::max(param_count_, param_id + 1);
    return push_leaf(std::move(value), true, param_id);
  }

  /// Registers every tensor as a parameter with ids 0..n-1 in order.
  std::vector<Var<Scalar>> parameters(std::span<const TensorT* const> tensors) {
    std::vector<Var<Scalar>> vars;
    vars.reserve(tensors.size());
    for (const TensorT* t : tensors) vars.push_back(parameter(*t, param_count_));
    return vars;
  }

  Var<Scalar> apply(OpKind kind, std::vector<Var<Scalar>> inputs, ForwardFn forward,
                    BackwardFn backward) {
    Node node;
    node.kind = kind;
    for (const Var<Scalar>& v : inputs) {
      if (&v.tape() != this) throw std::invalid_argument("op mixes Vars from different tapes");
      node.inputs.push_back(v.id());
      node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
    }
    node.forward = std::move(forward);
    node.backward = std::move(backward);
    std::vector<const TensorT*> in = input_values(node);
    node.value = node.forward(in);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  const TensorT& value(const Var<Scalar>& v) const { return nodes_.at(v.id()).value; }
  void set_value(const Var<Scalar>& v, TensorT value) {
    Node& node = nodes_.at(v.id());
    if (node.kind != OpKind::Leaf) throw std::logic_error("only leaves can be reassigned");
    node.value = std::move(value);
  }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  std::size_t count(OpKind kind) const {
    std::size_t n = 0;
    for (const Node& node : nodes_) n += node.kind == kind;
    return n;
  }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  std::span<const std::size_t> inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  bool consumed() const { return consumed_; }

  /// Recompute every non-leaf node from current leaf values.
  void replay() {
    for (Node& node : nodes_) {
      if (node.kind == OpKind::Leaf) continue;
      std::vector<const TensorT*> in = input_values(node);
      node.value = node.forward(in);
    }
  }

  /// Reverse sweep from a scalar loss. Returns d loss / d parameter for every
  /// registered parameter id; unused parameters get zero tensors. Gradients of
  /// other variables are available afterwards through grad().
  Gradients<Scalar> backward(const Var<Scalar>& loss) {
    if (&loss.tape() != this) throw std::invalid_argument("loss was recorded on another tape");
    if (consumed_) throw std::logic_error("tape already back-propagated");
    const TensorT& lv = nodes_.at(loss.id()).value;
    if (lv.size() != 1) throw std::invalid_argument("loss must be a scalar, got " + lv.shape().str());
    consumed_ = true;

    for (Node& node : nodes_) node.grad = TensorT();
    nodes_[loss.id()].grad = TensorT::constant(lv.shape(), Scalar(1));
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.kind == OpKind::Leaf || !node.requires_grad || node.grad.empty()) continue;
      std::vector<const TensorT*> in = input_values(node);
      std::vector<TensorT*> in_grads;
      for (std::size_t input : node.inputs) {
        Node& src = nodes_[input];
        if (!src.requires_grad) {
          in_grads.push_back(nullptr);
          continue;
        }
        in_grads.push_back(&src.grad);
      }
      node.backward(in, node.value, node.grad, in_grads);
    }

    Gradients<Scalar> grads(param_count_);
    for (const Node& node : nodes_) {
      if (!node.param) continue;
      TensorT& g = grads[*node.param];
      if (node.grad.empty()) {
        if (g.empty()) g = TensorT::zeros(node.value.shape());
      } else if (g.empty()) {
        g = node.grad;
      } else {
        g.data() += node.grad.data();
      }
    }
    return grads;
  }

  /// Gradient of a node after backward(); zeros when unreached.
  TensorT grad(const Var<Scalar>& v) const {
    const Node& node = nodes_.at(v.id());
    return node.grad.empty() ? TensorT::zeros(node.value.shape()) : node.grad;
  }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    std::optional<std::size_t> param;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var<Scalar> push_leaf(TensorT value, bool requires_grad, std::optional<std::size_t> param) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.param = param;
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<const TensorT*> input_values(const Node& node) const {
    std::vector<const TensorT*> in;
    in.reserve(node.inputs.size());
    for (std::size_t i : node.inputs) in.push_back(&nodes_[i].value);
    return in;
  }

  std::vector<Node> nodes_;
  std::size_t param_count_ = 0;
  bool consumed_ = false;
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Linear: return "linear";
    case OpKind::PixelShuffle: return "pixel_shuffle";
    case OpKind::Gelu: return "gelu";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Abs: return "abs";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Clamp: return "clamp";
    case OpKind::Reshape: return "reshape";
    case OpKind::Pad: return "pad";
    case OpKind::Depthwise: return "depthwise";
    case OpKind::ScaleChannels: return "scale_channels";
    case OpKind::Blur: return "blur";
    case OpKind::PadKernel: return "pad_kernel";
    case OpKind::MixLeft: return "mix_left";
    case OpKind::MixRight: return "mix_right";
    case OpKind::KernelSum: return "kernel_sum";
    case OpKind::DiagKernel: return "diag_kernel";
    case OpKind::Concat: return "concat";
  }
  return "?";
}

}  // namespace onrep
