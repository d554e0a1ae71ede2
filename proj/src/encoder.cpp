#include "afa/encoder.hpp"

#include <cmath>

namespace afa {

void EncoderConfig::validate() const {
  if (channels.empty()) throw ConfigError("encoder needs at least one block");
  if (in_channels == 0 || height == 0 || width == 0) throw ConfigError("encoder input extents must be positive");
  for (auto c : channels) {
    if (c == 0) throw ConfigError("encoder block with zero channels");
  }
}

std::vector<ParamRef> EncoderParams::refs() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "encoder.block" + std::to_string(i);
    out.push_back({prefix + ".conv", &blocks[i].weight});
    out.push_back({prefix + ".bn_scale", &blocks[i].bn_scale});
    out.push_back({prefix + ".bn_shift", &blocks[i].bn_shift});
  }
  return out;
}

std::vector<ParamRef> AfaParams::refs() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({"afa.site" + std::to_string(i) + ".gamma", &layers[i].gamma});
    out.push_back({"afa.site" + std::to_string(i) + ".beta", &layers[i].beta});
  }
  for (std::size_t i = 0; i < kernels.size(); ++i) out.push_back({"afa.site" + std::to_string(i) + ".kernel", &kernels[i]});
  return out;
}

std::vector<ParamRef> LinearHead::refs() { return {{"head.weight", &weight}, {"head.bias", &bias}}; }

double softplus(double x) { return std::log1p(std::exp(x)); }

Encoder init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  Encoder enc;
  enc.config = config;
  std::size_t cin = config.in_channels;
  for (std::size_t cout : config.channels) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * 9));
    ConvBlock b{Tensor({cout, cin, 3, 3}), Tensor::ones({cout}), Tensor::zeros({cout})};
    for (auto& v : b.weight.values()) v = rng.normal(0.0, stddev);
    enc.params.blocks.push_back(std::move(b));
    enc.stats.emplace_back(cout);
    cin = cout;
  }
  return enc;
}

AfaParams init_afa(std::span<const std::size_t> channels_per_site, Rng& rng) {
  AfaParams p;
  p.kind = AfaKind::linear;
  const double gs = afa_gamma_std(), bs = afa_beta_std();
  for (std::size_t c : channels_per_site) {
    AfaLayer l{Tensor({c}), Tensor({c})};
    for (auto& v : l.gamma.values()) v = rng.normal(1.0, gs);
    for (auto& v : l.beta.values()) v = rng.normal(0.0, bs);
    p.layers.push_back(std::move(l));
  }
  return p;
}

AfaParams init_afa_nonlinear(std::span<const std::size_t> channels_per_site, Rng& rng) {
  AfaParams p;
  p.kind = AfaKind::nonlinear;
  const double gs = afa_gamma_std(), bs = afa_beta_std();
  for (std::size_t c : channels_per_site) {
    Tensor k({c, c, 3, 3});
    const double off_std = bs / std::sqrt(static_cast<double>(9 * c));
    for (std::size_t o = 0; o < c; ++o)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t t = 0; t < 9; ++t) {
          const bool centre = (o == i && t == 4);
          k[((o * c + i) * 9) + t] = centre ? rng.normal(1.0, gs) : rng.normal(0.0, off_std);
        }
    p.kernels.push_back(std::move(k));
  }
  return p;
}

AfaParams identity_afa(std::span<const std::size_t> channels_per_site) {
  AfaParams p;
  p.kind = AfaKind::linear;
  for (std::size_t c : channels_per_site) p.layers.push_back({Tensor::ones({c}), Tensor::zeros({c})});
  return p;
}

Tensor afa_apply(Tape& tape, const Tensor& m, const AfaLayer& layer) {
  return channel_affine(tape, m, layer.gamma, layer.beta);
}

Tensor afa_apply_nonlinear(Tape& tape, const Tensor& m, const Tensor& kernel) {
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) {
    throw ShapeError("afa_apply_nonlinear: kernel must be depth-preserving [C x C x 3 x 3], got " +
                     shape_str(kernel.shape()));
  }
  return conv2d(tape, m, kernel);
}

namespace {

struct Normalized {
  Tensor out;
  Tensor mean;
  Tensor var;
};

Normalized normalize_stream(Tape& tape, const Tensor& h, RunningStats& stats, const ForwardOptions& options,
                            bool update) {
  if (options.mode == Mode::eval) {
    return {channel_normalize(tape, h, stats.mean, stats.var, kBatchNormEps), {}, {}};
  }
  const std::size_t count = h.dim(0) * h.dim(2) * h.dim(3);
  if (count < 2) {
    throw NumericError("batch_norm: degenerate batch, " + std::to_string(count) + " values per channel");
  }
  Tensor mu = channel_mean(tape, h);
  Tensor var = channel_var(tape, h);
  if (update && options.update_running_stats) fold_running_stats(stats, mu, var, count);
  Tensor out = channel_normalize(tape, h, mu, var, kBatchNormEps);
  return {std::move(out), std::move(mu), std::move(var)};
}

Tensor perturb(Tape& tape, const Tensor& m, const AfaParams& afa, std::size_t site) {
  if (afa.kind == AfaKind::linear) return afa_apply(tape, m, afa.layers.at(site));
  return afa_apply_nonlinear(tape, m, afa.kernels.at(site));
}

Tensor next_input(Tape& tape, const Tensor& m, bool pool) {
  Tensor a = relu(tape, m);
  return pool ? avg_pool2(tape, a) : a;
}

}  // namespace

DualFeatures forward_dual(Tape& tape, const Tensor& x, const EncoderParams& params, std::vector<RunningStats>& stats,
                          const AfaParams* afa, const ForwardOptions& options) {
  if (x.rank() != 4) throw ShapeError("encoder input must be [N x C x H x W], got " + shape_str(x.shape()));
  if (stats.size() != params.blocks.size()) throw ShapeError("encoder running statistics do not match blocks");
  const bool dual = afa != nullptr && options.mode == Mode::train;
  if (dual && afa->sites() != params.blocks.size()) {
    throw ShapeError("perturbation sites (" + std::to_string(afa->sites()) + ") do not match encoder blocks (" +
                     std::to_string(params.blocks.size()) + ")");
  }
  DualFeatures out;
  Tensor xo = x, xa = x;
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const ConvBlock& blk = params.blocks[b];
    const bool pool_here = xo.dim(2) >= 2 && xo.dim(3) >= 2;
    Tensor ho = conv2d(tape, xo, blk.weight);
    Normalized no = normalize_stream(tape, ho, stats[b], options, true);
    Tensor bno = channel_affine(tape, no.out, blk.bn_scale, blk.bn_shift);
    if (dual) {
      Tensor bna;
      if (b == 0) {
        bna = bno;  // both streams see the same input at the first block
      } else {
        Tensor ha = conv2d(tape, xa, blk.weight);
        Tensor na = options.shared_bn_stats ? channel_normalize(tape, ha, no.mean, no.var, kBatchNormEps)
                                            : normalize_stream(tape, ha, stats[b], options, false).out;
        bna = channel_affine(tape, na, blk.bn_scale, blk.bn_shift);
      }
      Tensor ma = perturb(tape, bna, *afa, b);
      xa = next_input(tape, ma, pool_here);
      out.sites.emplace_back(bno, std::move(ma));
    }
    xo = next_input(tape, bno, pool_here);
  }
  out.f_o = global_avg_pool(tape, xo);
  if (dual) out.f_a = global_avg_pool(tape, xa);
  return out;
}

Tensor forward_original(Tape& tape, const Tensor& x, const EncoderParams& params, std::vector<RunningStats>& stats,
                        const ForwardOptions& options) {
  return forward_dual(tape, x, params, stats, nullptr, options).f_o;
}

LinearHead init_linear_head(std::size_t in_features, std::size_t classes, Rng& rng) {
  LinearHead h{Tensor({in_features, classes}), Tensor::zeros({classes})};
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in_features));
  for (auto& v : h.weight.values()) v = rng.normal(0.0, stddev);
  return h;
}

Tensor pretrain_forward(Tape& tape, const Tensor& x, const EncoderParams& params, std::vector<RunningStats>& stats,
                        const LinearHead& head, const ForwardOptions& options) {
  Tensor f = forward_original(tape, x, params, stats, options);
  return add_row_vector(tape, matmul(tape, f, head.weight), head.bias);
}

}  // namespace afa
