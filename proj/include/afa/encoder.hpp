#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "afa/ops.hpp"
#include "afa/params.hpp"
#include "afa/rng.hpp"

namespace afa {

/// Blocks are conv3x3 -> batch norm -> (perturbation site) -> ReLU -> 2x2 mean
/// pool; the pool is skipped once a spatial extent has dropped below 2.
struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::size_t> channels = {8, 16, 32, 32};

  /// Throws ConfigError on an unusable layout.
  void validate() const;
  std::size_t out_channels() const { return channels.back(); }
  std::size_t sites() const { return channels.size(); }
};

struct ConvBlock {
  Tensor weight;    // [Cout x Cin x 3 x 3]
  Tensor bn_scale;  // [Cout]
  Tensor bn_shift;  // [Cout]
};

/// Encoder weights (theta_e).
struct EncoderParams {
  std::vector<ConvBlock> blocks;

  std::vector<ParamRef> refs();
};

/// Encoder weights plus the non-trainable batch-norm running statistics.
struct Encoder {
  EncoderConfig config;
  EncoderParams params;
  std::vector<RunningStats> stats;
};

/// Per-channel perturbation m_a = gamma * m_o + beta at one site.
struct AfaLayer {
  Tensor gamma;
  Tensor beta;
};

enum class AfaKind { linear, nonlinear };

/// Perturbation parameters (theta_a) for every site.
struct AfaParams {
  AfaKind kind = AfaKind::linear;
  std::vector<AfaLayer> layers;   // linear kind
  std::vector<Tensor> kernels;    // nonlinear kind: [C x C x 3 x 3] per site

  std::vector<ParamRef> refs();
  std::size_t sites() const { return kind == AfaKind::linear ? layers.size() : kernels.size(); }
};

/// Standard deviations used to draw the initial gamma and beta.
double softplus(double x);
inline double afa_gamma_std() { return softplus(0.5); }
inline double afa_beta_std() { return softplus(0.3); }

Encoder init_encoder(const EncoderConfig& config, Rng& rng);
AfaParams init_afa(std::span<const std::size_t> channels_per_site, Rng& rng);
/// Kernels centred on a per-channel delta so the map starts near the linear form.
AfaParams init_afa_nonlinear(std::span<const std::size_t> channels_per_site, Rng& rng);
AfaParams identity_afa(std::span<const std::size_t> channels_per_site);

Tensor afa_apply(Tape& tape, const Tensor& m, const AfaLayer& layer);
Tensor afa_apply_nonlinear(Tape& tape, const Tensor& m, const Tensor& kernel);

struct DualFeatures {
  /// (m_o, m_a) captured right after each perturbation site.
  std::vector<std::pair<Tensor, Tensor>> sites;
  Tensor f_o;
  std::optional<Tensor> f_a;
};

struct ForwardOptions {
  Mode mode = Mode::train;
  /// Normalize the augmented stream with the original stream's batch statistics.
  bool shared_bn_stats = false;
  /// Fold train-mode batch statistics into the running estimates.
  bool update_running_stats = true;
};

/// Runs the original and augmented streams with shared encoder weights.
/// In eval mode (or when `afa` is null) only the original stream is produced.
DualFeatures forward_dual(Tape& tape, const Tensor& x, const EncoderParams& params,
                          std::vector<RunningStats>& stats, const AfaParams* afa, const ForwardOptions& options);

/// Original stream only: [N x Cin x H x W] -> [N x C_out].
Tensor forward_original(Tape& tape, const Tensor& x, const EncoderParams& params, std::vector<RunningStats>& stats,
                        const ForwardOptions& options);

/// Linear classifier used during base-class pretraining.
struct LinearHead {
  Tensor weight;  // [C_out x classes]
  Tensor bias;    // [classes]

  std::vector<ParamRef> refs();
};

LinearHead init_linear_head(std::size_t in_features, std::size_t classes, Rng& rng);

/// Pooled original-stream features through the linear head: [N x classes].
Tensor pretrain_forward(Tape& tape, const Tensor& x, const EncoderParams& params, std::vector<RunningStats>& stats,
                        const LinearHead& head, const ForwardOptions& options);

}  // namespace afa
