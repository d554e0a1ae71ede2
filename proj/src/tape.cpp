#include "afa/tape.hpp"

namespace afa {

void Gradients::accumulate(NodeId id, const Tensor& g) {
  auto& slot = grads_.at(id);
  if (!slot) {
    slot = g.detached();
    return;
  }
  if (slot->shape() != g.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match " + shape_str(slot->shape()));
  }
  auto dst = slot->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Gradients::accumulate(NodeId id, Tensor&& g) {
  auto& slot = grads_.at(id);
  if (!slot) {
    g.set_node(std::nullopt);
    slot = std::move(g);
    return;
  }
  accumulate(id, static_cast<const Tensor&>(g));
}

const Tensor* Gradients::find(NodeId id) const {
  if (id >= grads_.size() || !grads_[id]) return nullptr;
  return &*grads_[id];
}

Tensor Gradients::of(const Tensor& t) const {
  if (t.node()) {
    if (const Tensor* g = find(*t.node())) return *g;
  }
  return Tensor::zeros(t.shape());
}

Tensor Tape::param(Tensor value) {
  if (!value.all_finite()) throw NumericError("parameter contains non-finite values");
  Node n;
  n.kind = "param";
  n.shape = value.shape();
  n.is_param = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  value.set_node(nodes_.size() - 1);
  return value;
}

Tensor Tape::leaf(Tensor value) {
  Node n;
  n.kind = "leaf";
  n.shape = value.shape();
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  value.set_node(nodes_.size() - 1);
  return value;
}

Tensor Tape::record(std::string kind, Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite output from " + kind);
  const NodeId id = nodes_.size();
  for (NodeId in : inputs) {
    if (in >= id) throw Error("tape node " + kind + " references a later node");
  }
  Node n;
  n.kind = std::move(kind);
  n.inputs = std::move(inputs);
  n.shape = value.shape();
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  value.set_node(id);
  return value;
}

Gradients Tape::backward(const Tensor& root) const {
  if (!root.is_scalar()) throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
  if (!root.node() || *root.node() >= nodes_.size()) throw Error("backward root is not on this tape");

  Gradients grads(nodes_.size());
  const NodeId start = *root.node();
  grads.accumulate(start, Tensor::ones(root.shape()));
  for (NodeId id = start + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (n.is_leaf) continue;
    const Tensor* g = grads.find(id);
    if (!g) continue;
    if (n.backward) n.backward(*g, grads);
    grads.release(id);
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].is_param && !grads.find(id)) grads.accumulate(id, Tensor::zeros(nodes_[id].shape));
  }
  return grads;
}

std::vector<NodeId> linked_ids(std::initializer_list<const Tensor*> inputs) {
  std::vector<NodeId> ids;
  for (const Tensor* t : inputs) {
    if (t->node()) ids.push_back(*t->node());
  }
  return ids;
}

}  // namespace afa
