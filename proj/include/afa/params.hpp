#pragma once

#include <string>
#include <vector>

#include "afa/tape.hpp"
#include "afa/tensor.hpp"

namespace afa {

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

/// Copy of `params` whose tensors are registered as parameter leaves on `tape`.
/// P must expose `std::vector<ParamRef> refs()`.
template <class P>
P bind(Tape& tape, const P& params) {
  P bound = params;
  for (auto& r : bound.refs()) *r.tensor = tape.param(r.tensor->detached());
  return bound;
}

template <class P>
std::vector<Tensor> gradients_of(const Gradients& grads, P& bound) {
  std::vector<Tensor> out;
  for (auto& r : bound.refs()) out.push_back(grads.of(*r.tensor));
  return out;
}

template <class P>
std::vector<Tensor*> tensor_ptrs(P& params) {
  std::vector<Tensor*> out;
  for (auto& r : params.refs()) out.push_back(r.tensor);
  return out;
}

template <class P>
std::size_t parameter_count(P& params) {
  std::size_t n = 0;
  for (auto& r : params.refs()) n += r.tensor->size();
  return n;
}

}  // namespace afa
