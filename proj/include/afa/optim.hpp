#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "afa/rng.hpp"
#include "afa/tape.hpp"
#include "afa/tensor.hpp"

namespace afa {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for one parameter group.
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::span<const Shape> shapes, AdamConfig config);

  static AdamState for_params(std::span<const Tensor* const> params, AdamConfig config);

  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }

 private:
  friend void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t steps_ = 0;
};

/// Bias-corrected Adam update, in place.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

/// Scalar program over a list of parameters, rebuilt on a fresh tape per call.
using TensorProgram = std::function<Tensor(Tape&, std::span<const Tensor>)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
  std::size_t coords_per_param = 12;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t param_index = 0;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Central differences against tape gradients. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult grad_check(const TensorProgram& program, std::span<const Tensor> params, Rng& rng,
                           const GradCheckOptions& options = {});

}  // namespace afa
