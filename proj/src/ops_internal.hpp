#pragma once

#include <Eigen/Dense>

#include "afa/ops.hpp"

namespace afa::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// Records the op when any input is linked; otherwise validates and returns.
inline Tensor emit(Tape& tape, const char* kind, Tensor out, std::initializer_list<const Tensor*> inputs,
                   BackwardFn backward) {
  if (!any_linked(inputs)) {
    if (!out.all_finite()) throw NumericError(std::string("non-finite output from ") + kind);
    return out;
  }
  return tape.record(kind, std::move(out), linked_ids(inputs), std::move(backward));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

/// Layout of per-channel ops: rank 2 [N x C] or rank 4 [N x C x H x W].
struct ChannelLayout {
  std::size_t n = 0, c = 0, s = 0;
};

inline ChannelLayout channel_layout(const char* op, const Tensor& x) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  throw ShapeError(std::string(op) + ": expected [N x C] or [N x C x H x W], got " + shape_str(x.shape()));
}

}  // namespace afa::detail
