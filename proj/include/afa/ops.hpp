#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "afa/tape.hpp"
#include "afa/tensor.hpp"

// Differentiable operations. Every op takes the tape first; when none of the
// inputs is linked to a tape the op is evaluated eagerly and nothing is
// recorded. There is no general broadcasting: each op accepts exactly the
// shapes listed next to it.
namespace afa {

// ---- elementwise (same shape) ----
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor add_scalar(Tape& tape, const Tensor& x, double offset);
Tensor exp(Tape& tape, const Tensor& x);
/// x^p for strictly positive x.
Tensor pow_scalar(Tape& tape, const Tensor& x, double p);
/// x / s where s is a one-element tensor.
Tensor div_by(Tape& tape, const Tensor& x, const Tensor& s);

enum class Activation { relu, sigmoid };
Tensor activation(Tape& tape, const Tensor& x, Activation kind);
inline Tensor relu(Tape& tape, const Tensor& x) { return activation(tape, x, Activation::relu); }
inline Tensor sigmoid(Tape& tape, const Tensor& x) { return activation(tape, x, Activation::sigmoid); }

// ---- shape manipulation ----
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
/// [M x P] -> [P x M]
Tensor transpose(Tape& tape, const Tensor& x);
/// Concatenates along axis 0; trailing extents must agree.
Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b);
/// Rows [begin, end) along axis 0.
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end);
/// Flat gather: out[i] = x.flat[indices[i]].
Tensor gather(Tape& tape, const Tensor& x, std::span<const std::size_t> indices);

// ---- linear algebra ----
/// [M x K] x [K x P] -> [M x P]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// Solves A X = B for square nonsingular A [M x M], B [M x P].
Tensor solve(Tape& tape, const Tensor& a, const Tensor& b);

// ---- row-wise ops on [M x P] ----
/// x + b with b [P] added to every row.
Tensor add_row_vector(Tape& tape, const Tensor& x, const Tensor& b);
Tensor softmax_rows(Tape& tape, const Tensor& x);
/// [M x P] -> [M]
Tensor row_sum(Tape& tape, const Tensor& x);
/// Divides each row by its sum; rows summing below `tiny` become uniform
/// (with zero gradient).
Tensor row_normalize(Tape& tape, const Tensor& x, double tiny = 1e-300);
/// x_i / max(||x_i||, eps)
Tensor l2_normalize_rows(Tape& tape, const Tensor& x, double eps = 1e-8);
/// [M x C], [P x C] -> [M x P] of squared Euclidean distances.
Tensor pairwise_sq_dist(Tape& tape, const Tensor& a, const Tensor& b);

// ---- reductions ----
enum class Reduce { mean, sum, global_avg_pool };
Tensor reduce(Tape& tape, const Tensor& x, Reduce kind);
inline Tensor sum(Tape& tape, const Tensor& x) { return reduce(tape, x, Reduce::sum); }
inline Tensor mean(Tape& tape, const Tensor& x) { return reduce(tape, x, Reduce::mean); }
/// [N x C x H x W] -> [N x C]
inline Tensor global_avg_pool(Tape& tape, const Tensor& x) { return reduce(tape, x, Reduce::global_avg_pool); }
/// 2x2 spatial mean, stride 2 (odd trailing rows/cols are dropped).
Tensor avg_pool2(Tape& tape, const Tensor& x);
/// Element at rank floor((n-1)/2) of the sorted values; gradient routes to it.
Tensor lower_median(Tape& tape, const Tensor& x);

// ---- convolution ----
/// x [N x Cin x H x W], w [Cout x Cin x 3 x 3]; stride 1, zero padding 1.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w);

// ---- per-channel ops on [N x C x H x W] ----
/// Per-channel batch mean -> [C]
Tensor channel_mean(Tape& tape, const Tensor& x);
/// Per-channel biased batch variance -> [C]
Tensor channel_var(Tape& tape, const Tensor& x);
/// (x - mean_c) / sqrt(var_c + eps)
Tensor channel_normalize(Tape& tape, const Tensor& x, const Tensor& mean, const Tensor& var, double eps);
/// scale_c * x + shift_c
Tensor channel_affine(Tape& tape, const Tensor& x, const Tensor& scale, const Tensor& shift);

struct RunningStats {
  Tensor mean;
  Tensor var;

  RunningStats() = default;
  explicit RunningStats(std::size_t channels)
      : mean(Tensor::zeros({channels})), var(Tensor::ones({channels})) {}
};

enum class Mode { train, eval };

constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

/// Exponential-moving-average update with momentum kBatchNormMomentum; the
/// variance is stored unbiased (count / (count - 1)).
void fold_running_stats(RunningStats& stats, const Tensor& mean, const Tensor& var, std::size_t count);

/// Normalization without affine terms. Train mode uses batch statistics and
/// (when `stats` is non-null) folds them into the running estimates; eval mode
/// normalizes with the running estimates.
Tensor batch_norm(Tape& tape, const Tensor& x, RunningStats* stats, Mode mode);

// ---- gram matrices ----
/// [C x H x W] -> [C x C], or batched [N x C x H x W] -> [N x C x C].
Tensor gram_matrix(Tape& tape, const Tensor& m);

// ---- losses (all return a one-element tensor) ----
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels);
constexpr double kBceClamp = 1e-7;
Tensor binary_cross_entropy(Tape& tape, const Tensor& p, std::span<const double> targets);
/// Mean of -log(max(p[i, label_i], floor)) over rows of a probability matrix.
Tensor nll_probs(Tape& tape, const Tensor& probs, std::span<const std::size_t> labels, double floor = 1e-7);

}  // namespace afa
