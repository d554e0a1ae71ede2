#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "ops_internal.hpp"

namespace afa {

using detail::as_mat;
using detail::emit;
using detail::require_rank;
using detail::require_same_shape;
using detail::RowMat;

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ia = a.node(), ib = b.node();
  return emit(tape, "add", std::move(out), {&a, &b}, [ia, ib](const Tensor& g, Gradients& grads) {
    if (ia) grads.accumulate(*ia, g);
    if (ib) grads.accumulate(*ib, g);
  });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto ia = a.node(), ib = b.node();
  return emit(tape, "sub", std::move(out), {&a, &b}, [ia, ib](const Tensor& g, Gradients& grads) {
    if (ia) grads.accumulate(*ia, g);
    if (ib) {
      Tensor neg(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      grads.accumulate(*ib, std::move(neg));
    }
  });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ia = a.node(), ib = b.node();
  return emit(tape, "mul", std::move(out), {&a, &b},
              [ia, ib, av = ia || ib ? a.detached() : Tensor(), bv = ia || ib ? b.detached() : Tensor()](
                  const Tensor& g, Gradients& grads) {
                if (ia) {
                  Tensor ga(g.shape());
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
                  grads.accumulate(*ia, std::move(ga));
                }
                if (ib) {
                  Tensor gb(g.shape());
                  for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
                  grads.accumulate(*ib, std::move(gb));
                }
              });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto ix = x.node();
  return emit(tape, "scale", std::move(out), {&x}, [ix, factor](const Tensor& g, Gradients& grads) {
    Tensor gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
    grads.accumulate(*ix, std::move(gx));
  });
}

Tensor add_scalar(Tape& tape, const Tensor& x, double offset) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  auto ix = x.node();
  return emit(tape, "add_scalar", std::move(out), {&x},
              [ix](const Tensor& g, Gradients& grads) { grads.accumulate(*ix, g); });
}

Tensor exp(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  auto ix = x.node();
  return emit(tape, "exp", out, {&x}, [ix, y = x.node() ? out : Tensor()](const Tensor& g, Gradients& grads) {
    Tensor gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i];
    grads.accumulate(*ix, std::move(gx));
  });
}

Tensor pow_scalar(Tape& tape, const Tensor& x, double p) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) throw NumericError("pow_scalar requires strictly positive input");
    out[i] = std::pow(x[i], p);
  }
  auto ix = x.node();
  return emit(tape, "pow_scalar", std::move(out), {&x},
              [ix, p, xv = x.node() ? x.detached() : Tensor()](const Tensor& g, Gradients& grads) {
                Tensor gx(g.shape());
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * p * std::pow(xv[i], p - 1.0);
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor div_by(Tape& tape, const Tensor& x, const Tensor& s) {
  if (!s.is_scalar()) throw ShapeError("div_by: divisor must have one element, got " + shape_str(s.shape()));
  const double d = s[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / d;
  auto ix = x.node(), is = s.node();
  return emit(tape, "div_by", std::move(out), {&x, &s},
              [ix, is, d, xv = is ? x.detached() : Tensor()](const Tensor& g, Gradients& grads) {
                if (ix) {
                  Tensor gx(g.shape());
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / d;
                  grads.accumulate(*ix, std::move(gx));
                }
                if (is) {
                  double acc = 0.0;
                  for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
                  grads.accumulate(*is, Tensor::scalar(-acc / (d * d)));
                }
              });
}

namespace {

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor activation(Tape& tape, const Tensor& x, Activation kind) {
  Tensor out(x.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    auto ix = x.node();
    return emit(tape, "relu", out, {&x}, [ix, y = ix ? out : Tensor()](const Tensor& g, Gradients& grads) {
      Tensor gx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = y[i] > 0.0 ? g[i] : 0.0;
      grads.accumulate(*ix, std::move(gx));
    });
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  auto ix = x.node();
  return emit(tape, "sigmoid", out, {&x}, [ix, y = ix ? out : Tensor()](const Tensor& g, Gradients& grads) {
    Tensor gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i] * (1.0 - y[i]);
    grads.accumulate(*ix, std::move(gx));
  });
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  Tensor out = x.detached().reshaped(std::move(shape));
  auto ix = x.node();
  return emit(tape, "reshape", std::move(out), {&x}, [ix, orig = x.shape()](const Tensor& g, Gradients& grads) {
    grads.accumulate(*ix, g.reshaped(orig));
  });
}

Tensor transpose(Tape& tape, const Tensor& x) {
  require_rank("transpose", x, 2);
  const std::size_t m = x.dim(0), p = x.dim(1);
  Tensor out({p, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) out.at(j, i) = x.at(i, j);
  auto ix = x.node();
  return emit(tape, "transpose", std::move(out), {&x}, [ix, m, p](const Tensor& g, Gradients& grads) {
    Tensor gx({m, p});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) gx.at(i, j) = g.at(j, i);
    grads.accumulate(*ix, std::move(gx));
  });
}

Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  auto ia = a.node(), ib = b.node();
  const std::size_t split = a.size();
  return emit(tape, "concat_rows", Tensor(std::move(shape), std::move(data)), {&a, &b},
              [ia, ib, split, sa = a.shape(), sb = b.shape()](const Tensor& g, Gradients& grads) {
                if (ia) {
                  grads.accumulate(*ia, Tensor(sa, std::vector<double>(g.values().begin(), g.values().begin() + split)));
                }
                if (ib) {
                  grads.accumulate(*ib, Tensor(sb, std::vector<double>(g.values().begin() + split, g.values().end())));
                }
              });
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t row = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  Tensor out(shape, std::vector<double>(x.values().begin() + begin * row, x.values().begin() + end * row));
  auto ix = x.node();
  return emit(tape, "slice_rows", std::move(out), {&x},
              [ix, row, begin, full = x.shape()](const Tensor& g, Gradients& grads) {
                Tensor gx(full);
                std::copy(g.values().begin(), g.values().end(), gx.values().begin() + begin * row);
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor gather(Tape& tape, const Tensor& x, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("gather: empty index list");
  Tensor out({indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) throw ShapeError("gather: index out of range for " + shape_str(x.shape()));
    out[i] = x[indices[i]];
  }
  auto ix = x.node();
  return emit(tape, "gather", std::move(out), {&x},
              [ix, idx = std::vector<std::size_t>(indices.begin(), indices.end()), full = x.shape()](
                  const Tensor& g, Gradients& grads) {
                Tensor gx(full);
                for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor out({m, p});
  as_mat(out, m, p).noalias() = as_mat(a, m, k) * as_mat(b, k, p);
  auto ia = a.node(), ib = b.node();
  return emit(tape, "matmul", std::move(out), {&a, &b},
              [ia, ib, m, k, p, av = ib ? a.detached() : Tensor(), bv = ia ? b.detached() : Tensor()](
                  const Tensor& g, Gradients& grads) {
                if (ia) {
                  Tensor ga({m, k});
                  as_mat(ga, m, k).noalias() = as_mat(g, m, p) * as_mat(bv, k, p).transpose();
                  grads.accumulate(*ia, std::move(ga));
                }
                if (ib) {
                  Tensor gb({k, p});
                  as_mat(gb, k, p).noalias() = as_mat(av, m, k).transpose() * as_mat(g, m, p);
                  grads.accumulate(*ib, std::move(gb));
                }
              });
}

Tensor solve(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1) || b.rank() != 2 || b.dim(0) != a.dim(0)) {
    throw ShapeError("solve: need square A and matching B, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), p = b.dim(1);
  auto lu = std::make_shared<Eigen::PartialPivLU<RowMat>>(RowMat(as_mat(a, m, m)));
  if (!(lu->rcond() > 1e-14)) throw NumericError("solve: matrix is singular to working precision");
  Tensor out({m, p});
  as_mat(out, m, p) = lu->solve(RowMat(as_mat(b, m, p)));
  auto ia = a.node(), ib = b.node();
  return emit(tape, "solve", out, {&a, &b},
              [ia, ib, m, p, lu, x = ia ? out : Tensor()](const Tensor& g, Gradients& grads) {
                // gB = A^-T g, gA = -gB X^T
                RowMat gb = lu->transpose().solve(RowMat(as_mat(g, m, p)));
                if (ia) {
                  Tensor ga({m, m});
                  as_mat(ga, m, m).noalias() = -gb * as_mat(x, m, p).transpose();
                  grads.accumulate(*ia, std::move(ga));
                }
                if (ib) {
                  Tensor gbt({m, p});
                  as_mat(gbt, m, p) = gb;
                  grads.accumulate(*ib, std::move(gbt));
                }
              });
}

Tensor add_row_vector(Tape& tape, const Tensor& x, const Tensor& b) {
  require_rank("add_row_vector", x, 2);
  if (b.size() != x.dim(1)) {
    throw ShapeError("add_row_vector: bias " + shape_str(b.shape()) + " does not fit rows of " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), p = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) = x.at(i, j) + b[j];
  auto ix = x.node(), ib = b.node();
  return emit(tape, "add_row_vector", std::move(out), {&x, &b},
              [ix, ib, m, p, bshape = b.shape()](const Tensor& g, Gradients& grads) {
                if (ix) grads.accumulate(*ix, g);
                if (ib) {
                  Tensor gb(bshape);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p; ++j) gb[j] += g.at(i, j);
                  grads.accumulate(*ib, std::move(gb));
                }
              });
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  require_rank("softmax_rows", x, 2);
  const std::size_t m = x.dim(0), p = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < p; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < p; ++j) z += (out.at(i, j) = std::exp(x.at(i, j) - mx));
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) /= z;
  }
  auto ix = x.node();
  return emit(tape, "softmax_rows", out, {&x}, [ix, m, p, y = ix ? out : Tensor()](const Tensor& g, Gradients& grads) {
    Tensor gx({m, p});
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < p; ++j) gx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
    }
    grads.accumulate(*ix, std::move(gx));
  });
}

Tensor row_sum(Tape& tape, const Tensor& x) {
  require_rank("row_sum", x, 2);
  const std::size_t m = x.dim(0), p = x.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) out[i] += x.at(i, j);
  auto ix = x.node();
  return emit(tape, "row_sum", std::move(out), {&x}, [ix, m, p](const Tensor& g, Gradients& grads) {
    Tensor gx({m, p});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) gx.at(i, j) = g[i];
    grads.accumulate(*ix, std::move(gx));
  });
}

Tensor row_normalize(Tape& tape, const Tensor& x, double tiny) {
  require_rank("row_normalize", x, 2);
  const std::size_t m = x.dim(0), p = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> sums(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) sums[i] += x.at(i, j);
    const bool degenerate = std::abs(sums[i]) < tiny;
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) = degenerate ? 1.0 / static_cast<double>(p) : x.at(i, j) / sums[i];
  }
  auto ix = x.node();
  return emit(tape, "row_normalize", out, {&x},
              [ix, m, p, tiny, sums, xv = ix ? x.detached() : Tensor()](const Tensor& g, Gradients& grads) {
                Tensor gx({m, p});
                for (std::size_t i = 0; i < m; ++i) {
                  if (std::abs(sums[i]) < tiny) continue;
                  double dot = 0.0;
                  for (std::size_t j = 0; j < p; ++j) dot += g.at(i, j) * xv.at(i, j);
                  const double s = sums[i];
                  for (std::size_t j = 0; j < p; ++j) gx.at(i, j) = g.at(i, j) / s - dot / (s * s);
                }
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor l2_normalize_rows(Tape& tape, const Tensor& x, double eps) {
  require_rank("l2_normalize_rows", x, 2);
  const std::size_t m = x.dim(0), p = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < p; ++j) ss += x.at(i, j) * x.at(i, j);
    norms[i] = std::sqrt(ss);
    const double d = std::max(norms[i], eps);
    for (std::size_t j = 0; j < p; ++j) out.at(i, j) = x.at(i, j) / d;
  }
  auto ix = x.node();
  return emit(tape, "l2_normalize_rows", out, {&x},
              [ix, m, p, eps, norms, y = ix ? out : Tensor()](const Tensor& g, Gradients& grads) {
                Tensor gx({m, p});
                for (std::size_t i = 0; i < m; ++i) {
                  if (norms[i] <= eps) {
                    for (std::size_t j = 0; j < p; ++j) gx.at(i, j) = g.at(i, j) / eps;
                    continue;
                  }
                  double dot = 0.0;
                  for (std::size_t j = 0; j < p; ++j) dot += g.at(i, j) * y.at(i, j);
                  for (std::size_t j = 0; j < p; ++j) gx.at(i, j) = (g.at(i, j) - y.at(i, j) * dot) / norms[i];
                }
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor pairwise_sq_dist(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("pairwise_sq_dist: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), p = b.dim(0), c = a.dim(1);
  Tensor out({m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = a.at(i, k) - b.at(j, k);
        acc += d * d;
      }
      out.at(i, j) = acc;
    }
  auto ia = a.node(), ib = b.node();
  return emit(tape, "pairwise_sq_dist", std::move(out), {&a, &b},
              [ia, ib, m, p, c, av = a.detached(), bv = b.detached()](const Tensor& g, Gradients& grads) {
                Tensor ga({m, c}), gb({p, c});
                for (std::size_t i = 0; i < m; ++i)
                  for (std::size_t j = 0; j < p; ++j) {
                    const double w = 2.0 * g.at(i, j);
                    if (w == 0.0) continue;
                    for (std::size_t k = 0; k < c; ++k) {
                      const double d = w * (av.at(i, k) - bv.at(j, k));
                      ga.at(i, k) += d;
                      gb.at(j, k) -= d;
                    }
                  }
                if (ia) grads.accumulate(*ia, std::move(ga));
                if (ib) grads.accumulate(*ib, std::move(gb));
              });
}

Tensor reduce(Tape& tape, const Tensor& x, Reduce kind) {
  auto ix = x.node();
  if (kind == Reduce::global_avg_pool) {
    require_rank("global_avg_pool", x, 4);
    const std::size_t nc = x.dim(0) * x.dim(1), s = x.dim(2) * x.dim(3);
    Tensor out({x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < nc; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < s; ++k) acc += x[i * s + k];
      out[i] = acc / static_cast<double>(s);
    }
    return emit(tape, "global_avg_pool", std::move(out), {&x},
                [ix, nc, s, full = x.shape()](const Tensor& g, Gradients& grads) {
                  Tensor gx(full);
                  const double inv = 1.0 / static_cast<double>(s);
                  for (std::size_t i = 0; i < nc; ++i)
                    for (std::size_t k = 0; k < s; ++k) gx[i * s + k] = g[i] * inv;
                  grads.accumulate(*ix, std::move(gx));
                });
  }
  const double total = std::accumulate(x.values().begin(), x.values().end(), 0.0);
  const double factor = kind == Reduce::mean ? 1.0 / static_cast<double>(x.size()) : 1.0;
  return emit(tape, kind == Reduce::mean ? "mean" : "sum", Tensor::scalar(total * factor), {&x},
              [ix, factor, full = x.shape()](const Tensor& g, Gradients& grads) {
                grads.accumulate(*ix, Tensor(full, g[0] * factor));
              });
}

Tensor avg_pool2(Tape& tape, const Tensor& x) {
  require_rank("avg_pool2", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("avg_pool2: spatial extent below 2 in " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data().data() + p * h * w;
    double* dst = out.data().data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const double* r0 = src + 2 * i * w + 2 * j;
        dst[i * wo + j] = 0.25 * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
  }
  auto ix = x.node();
  return emit(tape, "avg_pool2", std::move(out), {&x},
              [ix, n, c, h, w, ho, wo](const Tensor& g, Gradients& grads) {
                Tensor gx({n, c, h, w});
                for (std::size_t p = 0; p < n * c; ++p) {
                  const double* src = g.data().data() + p * ho * wo;
                  double* dst = gx.data().data() + p * h * w;
                  for (std::size_t i = 0; i < ho; ++i)
                    for (std::size_t j = 0; j < wo; ++j) {
                      const double v = 0.25 * src[i * wo + j];
                      double* r0 = dst + 2 * i * w + 2 * j;
                      r0[0] = v;
                      r0[1] = v;
                      r0[w] = v;
                      r0[w + 1] = v;
                    }
                }
                grads.accumulate(*ix, std::move(gx));
              });
}

Tensor lower_median(Tape& tape, const Tensor& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = (x.size() - 1) / 2;
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                   [&](std::size_t i, std::size_t j) { return x[i] < x[j] || (x[i] == x[j] && i < j); });
  const std::size_t pick = order[k];
  auto ix = x.node();
  return emit(tape, "lower_median", Tensor::scalar(x[pick]), {&x},
              [ix, pick, full = x.shape()](const Tensor& g, Gradients& grads) {
                Tensor gx(full);
                gx[pick] = g[0];
                grads.accumulate(*ix, std::move(gx));
              });
}

}  // namespace afa
