#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "afa/tensor.hpp"

namespace afa {

/// Gradient store produced by one backward sweep, indexed by node id.
class Gradients {
 public:
  explicit Gradients(std::size_t nodes) : grads_(nodes) {}

  void accumulate(NodeId id, const Tensor& g);
  void accumulate(NodeId id, Tensor&& g);

  const Tensor* find(NodeId id) const;
  /// Gradient w.r.t. a tape-linked tensor; zeros of its shape when untouched.
  Tensor of(const Tensor& t) const;

  void release(NodeId id) { grads_[id].reset(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, Gradients& grads)>;

/// Append-only record of differentiable operations.
class Tape {
 public:
  struct Node {
    std::string kind;
    std::vector<NodeId> inputs;
    Shape shape;
    bool is_param = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  /// Registers a trainable parameter leaf and returns it linked to the tape.
  Tensor param(Tensor value);
  /// Registers a differentiable non-parameter leaf (e.g. an input under test).
  Tensor leaf(Tensor value);

  /// Appends an operation node. `inputs` must already be on this tape.
  /// Non-finite results raise NumericError naming the operation.
  Tensor record(std::string kind, Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar root. Parameters not reached get zeros.
  Gradients backward(const Tensor& root) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }

 private:
  std::vector<Node> nodes_;
};

/// Collects the tape ids of whichever inputs are linked.
std::vector<NodeId> linked_ids(std::initializer_list<const Tensor*> inputs);

inline bool any_linked(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->node()) return true;
  }
  return false;
}

}  // namespace afa
