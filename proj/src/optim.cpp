#include "afa/optim.hpp"

#include <algorithm>
#include <cmath>

namespace afa {

AdamState::AdamState(std::span<const Shape> shapes, AdamConfig config) : config_(config) {
  for (const auto& s : shapes) {
    m_.emplace_back(s);
    v_.emplace_back(s);
  }
}

AdamState AdamState::for_params(std::span<const Tensor* const> params, AdamConfig config) {
  std::vector<Shape> shapes;
  shapes.reserve(params.size());
  for (const Tensor* p : params) shapes.push_back(p->shape());
  return AdamState(shapes, config);
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m_.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.m_.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.m_[i].shape()) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape " + shape_str(params[i]->shape()) +
                       " vs gradient " + shape_str(grads[i].shape()));
    }
  }
  const auto& c = state.config_;
  state.steps_ += 1;
  const double t = static_cast<double>(state.steps_);
  const double corr1 = 1.0 - std::pow(c.beta1, t);
  const double corr2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m_[i].data();
    auto v = state.v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / corr1;
      const double vhat = v[j] / corr2;
      p[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

namespace {

double evaluate(const TensorProgram& program, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Tensor> linked;
  linked.reserve(params.size());
  for (const auto& p : params) linked.push_back(tape.leaf(p.detached()));
  const Tensor out = program(tape, linked);
  if (!out.is_scalar()) throw ShapeError("grad_check: program must return a scalar");
  if (!std::isfinite(out[0])) throw NumericError("grad_check: non-finite loss");
  return out[0];
}

}  // namespace

GradCheckResult grad_check(const TensorProgram& program, std::span<const Tensor> params, Rng& rng,
                           const GradCheckOptions& options) {
  Tape tape;
  std::vector<Tensor> linked;
  linked.reserve(params.size());
  for (const auto& p : params) linked.push_back(tape.param(p.detached()));
  const Tensor root = program(tape, linked);
  if (!root.is_scalar()) throw ShapeError("grad_check: program must return a scalar");
  if (!std::isfinite(root[0])) throw NumericError("grad_check: non-finite loss");
  if (!root.node()) throw Error("grad_check: program output does not depend on the parameters");
  const Gradients grads = tape.backward(root);

  GradCheckResult result;
  std::vector<Tensor> work(params.begin(), params.end());
  for (auto& w : work) w.set_node(std::nullopt);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor analytic = grads.of(linked[pi]);
    std::vector<std::size_t> coords;
    if (params[pi].size() <= options.coords_per_param) {
      for (std::size_t j = 0; j < params[pi].size(); ++j) coords.push_back(j);
    } else {
      coords = rng.choose(params[pi].size(), options.coords_per_param);
    }
    for (std::size_t j : coords) {
      const double orig = work[pi][j];
      work[pi][j] = orig + options.step;
      const double up = evaluate(program, work);
      work[pi][j] = orig - options.step;
      const double down = evaluate(program, work);
      work[pi][j] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[j];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      result.coordinates_checked += 1;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.param_index = pi;
        result.coordinate = j;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace afa
