#include <algorithm>
#include <cmath>
#include <memory>

#include "ops_internal.hpp"

namespace afa {

using detail::as_mat;
using detail::channel_layout;
using detail::emit;
using detail::require_rank;
using detail::RowMat;

namespace {

// Column matrix [Cin*9 x N*H*W] for a 3x3, pad-1, stride-1 correlation.
RowMat im2col(const Tensor& x) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(cin * 9), static_cast<Eigen::Index>(n * hw));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + (ci * 9 + ky * 3 + kx) * n * hw;
        for (std::size_t b = 0; b < n; ++b) {
          const double* src = x.data().data() + (b * cin + ci) * hw;
          double* dst = row + b * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[y * w + xx] = src[sy * static_cast<std::ptrdiff_t>(w) + sx];
            }
          }
        }
      }
  return cols;
}

void col2im(const RowMat& cols, Tensor& gx) {
  const std::size_t n = gx.dim(0), cin = gx.dim(1), h = gx.dim(2), w = gx.dim(3), hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols.data() + (ci * 9 + ky * 3 + kx) * n * hw;
        for (std::size_t b = 0; b < n; ++b) {
          double* dst = gx.data().data() + (b * cin + ci) * hw;
          const double* src = row + b * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[sy * static_cast<std::ptrdiff_t>(w) + sx] += src[y * w + xx];
            }
          }
        }
      }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (w.dim(2) != 3 || w.dim(3) != 3) throw ShapeError("conv2d: kernel must be 3x3, got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) + " do not match kernel " +
                     shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), hw = h * wd, cout = w.dim(0);
  const std::size_t k = cin * 9, cols_n = n * hw;
  auto cols = std::make_shared<const RowMat>(im2col(x));
  RowMat res = as_mat(w, cout, k) * *cols;
  Tensor out({n, cout, h, wd});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      std::copy_n(res.data() + co * cols_n + b * hw, hw, out.data().data() + (b * cout + co) * hw);

  auto ix = x.node(), iw = w.node();
  return emit(tape, "conv2d", std::move(out), {&x, &w},
              [ix, iw, cols, n, cin, h, wd, hw, cout, k, cols_n, wv = ix ? w.detached() : Tensor()](
                  const Tensor& g, Gradients& grads) {
                RowMat gm(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cols_n));
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t co = 0; co < cout; ++co)
                    std::copy_n(g.data().data() + (b * cout + co) * hw, hw, gm.data() + co * cols_n + b * hw);
                if (iw) {
                  Tensor gw({cout, cin, 3, 3});
                  as_mat(gw, cout, k).noalias() = gm * cols->transpose();
                  grads.accumulate(*iw, std::move(gw));
                }
                if (ix) {
                  RowMat gcols = as_mat(wv, cout, k).transpose() * gm;
                  Tensor gx({n, cin, h, wd});
                  col2im(gcols, gx);
                  grads.accumulate(*ix, std::move(gx));
                }
              });
}

Tensor channel_mean(Tape& tape, const Tensor& x) {
  const auto [n, c, s] = channel_layout("channel_mean", x);
  const double count = static_cast<double>(n * s);
  Tensor out({c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data().data() + (b * c + ch) * s;
      double acc = 0.0;
      for (std::size_t i = 0; i < s; ++i) acc += p[i];
      out[ch] += acc;
    }
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] /= count;
  auto ix = x.node();
  return emit(tape, "channel_mean", std::move(out), {&x},
              [ix, n, c, s, count, full = x.shape()](const Tensor& g, Gradients& grads) {
                Tensor gx(full);
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    double* p = gx.data().data() + (b * c + ch) * s;
                    std::fill_n(p, s, g[ch] / count);
                  }
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor channel_var(Tape& tape, const Tensor& x) {
  const auto [n, c, s] = channel_layout("channel_var", x);
  const double count = static_cast<double>(n * s);
  const Tensor mu = channel_mean(tape, x.detached());
  Tensor out({c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data().data() + (b * c + ch) * s;
      double acc = 0.0;
      for (std::size_t i = 0; i < s; ++i) acc += (p[i] - mu[ch]) * (p[i] - mu[ch]);
      out[ch] += acc;
    }
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] /= count;
  auto ix = x.node();
  return emit(tape, "channel_var", std::move(out), {&x},
              [ix, n, c, s, count, mu, xv = ix ? x.detached() : Tensor()](const Tensor& g, Gradients& grads) {
                // The mean's own dependence on x cancels: sum_i (x_i - mu) = 0.
                Tensor gx(xv.shape());
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const double* p = xv.data().data() + (b * c + ch) * s;
                    double* q = gx.data().data() + (b * c + ch) * s;
                    const double f = 2.0 * g[ch] / count;
                    for (std::size_t i = 0; i < s; ++i) q[i] = f * (p[i] - mu[ch]);
                  }
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor channel_normalize(Tape& tape, const Tensor& x, const Tensor& mean, const Tensor& var, double eps) {
  const auto [n, c, s] = channel_layout("channel_normalize", x);
  if (mean.size() != c || var.size() != c) {
    throw ShapeError("channel_normalize: statistics of size " + std::to_string(mean.size()) + "/" +
                     std::to_string(var.size()) + " for " + std::to_string(c) + " channels");
  }
  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(var[ch] + eps > 0.0)) throw NumericError("channel_normalize: negative variance");
    inv[ch] = 1.0 / std::sqrt(var[ch] + eps);
  }
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data().data() + (b * c + ch) * s;
      double* q = out.data().data() + (b * c + ch) * s;
      for (std::size_t i = 0; i < s; ++i) q[i] = (p[i] - mean[ch]) * inv[ch];
    }
  auto ix = x.node(), im = mean.node(), iv = var.node();
  return emit(tape, "channel_normalize", out, {&x, &mean, &var},
              [ix, im, iv, n, c, s, inv, y = out, mshape = mean.shape(), vshape = var.shape()](const Tensor& g,
                                                                                             Gradients& grads) {
                Tensor gx(y.shape());
                Tensor gm(mshape), gv(vshape);
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t off = (b * c + ch) * s;
                    double sg = 0.0, sgy = 0.0;
                    for (std::size_t i = 0; i < s; ++i) {
                      const double gi = g[off + i];
                      gx[off + i] = gi * inv[ch];
                      sg += gi;
                      sgy += gi * y[off + i];
                    }
                    gm[ch] -= sg * inv[ch];
                    gv[ch] -= 0.5 * sgy * inv[ch] * inv[ch];
                  }
                if (ix) grads.accumulate(*ix, std::move(gx));
                if (im) grads.accumulate(*im, std::move(gm));
                if (iv) grads.accumulate(*iv, std::move(gv));
              });
}

Tensor channel_affine(Tape& tape, const Tensor& x, const Tensor& scale, const Tensor& shift) {
  const auto [n, c, s] = channel_layout("channel_affine", x);
  if (scale.size() != c || shift.size() != c) {
    throw ShapeError("channel_affine: parameters " + shape_str(scale.shape()) + "/" + shape_str(shift.shape()) +
                     " do not match " + std::to_string(c) + " channels of " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data().data() + (b * c + ch) * s;
      double* q = out.data().data() + (b * c + ch) * s;
      const double gmul = scale[ch], badd = shift[ch];
      for (std::size_t i = 0; i < s; ++i) q[i] = gmul * p[i] + badd;
    }
  auto ix = x.node(), is = scale.node(), it = shift.node();
  return emit(tape, "channel_affine", std::move(out), {&x, &scale, &shift},
              [ix, is, it, n, c, s, sv = scale.detached(), xv = is ? x.detached() : Tensor(),
               tshape = shift.shape()](const Tensor& g, Gradients& grads) {
                Tensor gx(g.shape());
                Tensor gs(sv.shape()), gt(tshape);
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t off = (b * c + ch) * s;
                    double sg = 0.0, sgx = 0.0;
                    for (std::size_t i = 0; i < s; ++i) {
                      const double gi = g[off + i];
                      gx[off + i] = gi * sv[ch];
                      sg += gi;
                      if (is) sgx += gi * xv[off + i];
                    }
                    gs[ch] += sgx;
                    gt[ch] += sg;
                  }
                if (ix) grads.accumulate(*ix, std::move(gx));
                if (is) grads.accumulate(*is, std::move(gs));
                if (it) grads.accumulate(*it, std::move(gt));
              });
}

void fold_running_stats(RunningStats& stats, const Tensor& mean, const Tensor& var, std::size_t count) {
  const std::size_t c = mean.size();
  if (stats.mean.size() != c || stats.var.size() != c || var.size() != c) {
    throw ShapeError("fold_running_stats: running statistics have wrong channel count");
  }
  const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    stats.mean[ch] = (1.0 - kBatchNormMomentum) * stats.mean[ch] + kBatchNormMomentum * mean[ch];
    stats.var[ch] = (1.0 - kBatchNormMomentum) * stats.var[ch] + kBatchNormMomentum * var[ch] * unbias;
  }
}

Tensor batch_norm(Tape& tape, const Tensor& x, RunningStats* stats, Mode mode) {
  const auto [n, c, s] = channel_layout("batch_norm", x);
  if (mode == Mode::eval) {
    if (!stats) throw Error("batch_norm: eval mode needs running statistics");
    return channel_normalize(tape, x, stats->mean, stats->var, kBatchNormEps);
  }
  const std::size_t count = n * s;
  if (count < 2) {
    throw NumericError("batch_norm: degenerate batch, " + std::to_string(count) +
                       " values per channel in train mode (need >= 2)");
  }
  Tensor mu = channel_mean(tape, x);
  Tensor var = channel_var(tape, x);
  if (stats) fold_running_stats(*stats, mu, var, count);
  return channel_normalize(tape, x, mu, var, kBatchNormEps);
}

Tensor gram_matrix(Tape& tape, const Tensor& m) {
  std::size_t n = 1, c = 0, s = 0;
  Shape out_shape;
  if (m.rank() == 3) {
    c = m.dim(0);
    s = m.dim(1) * m.dim(2);
    out_shape = {c, c};
  } else if (m.rank() == 4) {
    n = m.dim(0);
    c = m.dim(1);
    s = m.dim(2) * m.dim(3);
    out_shape = {n, c, c};
  } else {
    throw ShapeError("gram_matrix: expected [C x H x W] or [N x C x H x W], got " + shape_str(m.shape()));
  }
  Tensor out(out_shape);
  for (std::size_t b = 0; b < n; ++b) {
    detail::ConstMatMap mb(m.data().data() + b * c * s, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(s));
    detail::MatMap gb(out.data().data() + b * c * c, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
    // Explicit symmetric fill keeps G == G^T bit for bit.
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = i; j < c; ++j) {
        const double v = mb.row(static_cast<Eigen::Index>(i)).dot(mb.row(static_cast<Eigen::Index>(j)));
        gb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        gb(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
      }
  }
  auto im = m.node();
  return emit(tape, "gram_matrix", std::move(out), {&m},
              [im, n, c, s, mv = im ? m.detached() : Tensor()](const Tensor& g, Gradients& grads) {
                Tensor gx(mv.shape());
                for (std::size_t b = 0; b < n; ++b) {
                  detail::ConstMatMap mb(mv.data().data() + b * c * s, static_cast<Eigen::Index>(c),
                                         static_cast<Eigen::Index>(s));
                  detail::ConstMatMap gg(g.data().data() + b * c * c, static_cast<Eigen::Index>(c),
                                         static_cast<Eigen::Index>(c));
                  detail::MatMap out(gx.data().data() + b * c * s, static_cast<Eigen::Index>(c),
                                     static_cast<Eigen::Index>(s));
                  out.noalias() = (gg + gg.transpose()) * mb;
                }
                grads.accumulate(*im, std::move(gx));
              });
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch");
  Tensor probs({n, k});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                       std::to_string(k) + ")");
    }
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (probs.at(i, j) = std::exp(logits.at(i, j) - mx));
    for (std::size_t j = 0; j < k; ++j) probs.at(i, j) /= z;
    loss += std::log(z) + mx - logits.at(i, labels[i]);
  }
  loss /= static_cast<double>(n);
  auto il = logits.node();
  return emit(tape, "softmax_cross_entropy", Tensor::scalar(loss), {&logits},
              [il, n, k, probs, lab = std::vector<std::size_t>(labels.begin(), labels.end())](const Tensor& g,
                                                                                             Gradients& grads) {
                Tensor gx = probs;
                for (std::size_t i = 0; i < n; ++i) gx.at(i, lab[i]) -= 1.0;
                const double f = g[0] / static_cast<double>(n);
                for (auto& v : gx.values()) v *= f;
                grads.accumulate(*il, std::move(gx));
              });
}

Tensor binary_cross_entropy(Tape& tape, const Tensor& p, std::span<const double> targets) {
  if (targets.size() != p.size()) throw ShapeError("binary_cross_entropy: target count does not match predictions");
  const std::size_t m = p.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double pc = std::clamp(p[i], kBceClamp, 1.0 - kBceClamp);
    loss += -targets[i] * std::log(pc) - (1.0 - targets[i]) * std::log(1.0 - pc);
  }
  loss /= static_cast<double>(m);
  auto ip = p.node();
  return emit(tape, "binary_cross_entropy", Tensor::scalar(loss), {&p},
              [ip, m, pv = ip ? p.detached() : Tensor(), y = std::vector<double>(targets.begin(), targets.end())](
                  const Tensor& g, Gradients& grads) {
                Tensor gx(pv.shape());
                const double f = g[0] / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i) {
                  const double v = pv[i];
                  if (v < kBceClamp || v > 1.0 - kBceClamp) continue;
                  gx[i] = f * (-y[i] / v + (1.0 - y[i]) / (1.0 - v));
                }
                grads.accumulate(*ip, std::move(gx));
              });
}

Tensor nll_probs(Tape& tape, const Tensor& probs, std::span<const std::size_t> labels, double floor) {
  require_rank("nll_probs", probs, 2);
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (labels.size() != n) throw ShapeError("nll_probs: label count does not match rows");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw ShapeError("nll_probs: label out of range");
    loss -= std::log(std::max(probs.at(i, labels[i]), floor));
  }
  loss /= static_cast<double>(n);
  auto ip = probs.node();
  return emit(tape, "nll_probs", Tensor::scalar(loss), {&probs},
              [ip, n, k, floor, pv = ip ? probs.detached() : Tensor(),
               lab = std::vector<std::size_t>(labels.begin(), labels.end())](const Tensor& g, Gradients& grads) {
                Tensor gx({n, k});
                const double f = g[0] / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                  const double v = pv.at(i, lab[i]);
                  if (v > floor) gx.at(i, lab[i]) = -f / v;
                }
                grads.accumulate(*ip, std::move(gx));
              });
}

}  // namespace afa
