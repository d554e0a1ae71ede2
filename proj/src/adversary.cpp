#include "afa/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace afa {

std::vector<ParamRef> DomainDiscriminator::refs() {
  return {{"discriminator.weight", &weight}, {"discriminator.bias", &bias}};
}

DomainDiscriminator init_discriminator(std::size_t features) {
  return {Tensor::zeros({features}), Tensor::zeros({1})};
}

Tensor discriminate(Tape& tape, const Tensor& features, const DomainDiscriminator& d) {
  if (features.rank() != 2 || features.dim(1) != d.weight.size()) {
    throw ShapeError("discriminate: features " + shape_str(features.shape()) + " vs weight " +
                     shape_str(d.weight.shape()));
  }
  const std::size_t m = features.dim(0), c = features.dim(1);
  Tensor score = matmul(tape, features, reshape(tape, d.weight, {c, 1}));
  Tensor biased = add_row_vector(tape, score, d.bias);
  return reshape(tape, sigmoid(tape, biased), {m});
}

namespace {

std::vector<double> domain_targets(std::size_t n) {
  std::vector<double> y(2 * n, 0.0);
  for (std::size_t i = n; i < 2 * n; ++i) y[i] = 1.0;
  return y;
}

}  // namespace

Tensor domain_loss(Tape& tape, const Tensor& f_o, const Tensor& f_a, const DomainDiscriminator& d) {
  if (f_o.shape() != f_a.shape()) {
    throw ShapeError("domain_loss: batch mismatch " + shape_str(f_o.shape()) + " vs " + shape_str(f_a.shape()));
  }
  Tensor p = discriminate(tape, concat_rows(tape, f_o, f_a), d);
  const auto y = domain_targets(f_o.dim(0));
  return binary_cross_entropy(tape, p, y);
}

double domain_accuracy(const Tensor& f_o, const Tensor& f_a, const DomainDiscriminator& d) {
  Tape scratch;
  const DomainDiscriminator frozen{d.weight.detached(), d.bias.detached()};
  Tensor p = discriminate(scratch, concat_rows(scratch, f_o.detached(), f_a.detached()), frozen);
  const auto y = domain_targets(f_o.dim(0));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += ((p[i] > 0.5) == (y[i] > 0.5)) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

Tensor gram_loss(Tape& tape, const Tensor& m_o, const Tensor& m_a) {
  if (m_o.shape() != m_a.shape()) {
    throw ShapeError("gram_loss: shape mismatch " + shape_str(m_o.shape()) + " vs " + shape_str(m_a.shape()));
  }
  std::size_t n = 1, c = 0, s = 0;
  if (m_o.rank() == 4) {
    n = m_o.dim(0);
    c = m_o.dim(1);
    s = m_o.dim(2) * m_o.dim(3);
  } else if (m_o.rank() == 3) {
    c = m_o.dim(0);
    s = m_o.dim(1) * m_o.dim(2);
  } else {
    throw ShapeError("gram_loss: expected rank 3 or 4, got " + shape_str(m_o.shape()));
  }
  Tensor diff = sub(tape, gram_matrix(tape, m_a), gram_matrix(tape, m_o));
  const double sd = static_cast<double>(s), cd = static_cast<double>(c);
  const double factor = 1.0 / (4.0 * sd * sd * cd * cd * static_cast<double>(n));
  return scale(tape, sum(tape, mul(tape, diff, diff)), factor);
}

Tensor total_gram_loss(Tape& tape, const DualFeatures& dual, std::vector<double>* per_site) {
  if (dual.sites.empty()) throw ShapeError("total_gram_loss: no perturbation sites");
  std::optional<Tensor> acc;
  for (const auto& [mo, ma] : dual.sites) {
    Tensor l = gram_loss(tape, mo, ma);
    if (per_site) per_site->push_back(l[0]);
    acc = acc ? add(tape, *acc, l) : l;
  }
  return scale(tape, *acc, 1.0 / static_cast<double>(dual.sites.size()));
}

LambdaSchedule LambdaSchedule::parse(const std::string& text) {
  if (text == "dann") return dann();
  const std::string prefix = "const:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      std::size_t used = 0;
      const std::string rest = text.substr(prefix.size());
      const double v = std::stod(rest, &used);
      if (used == rest.size() && std::isfinite(v)) return constant(v);
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("lambda must be 'dann' or 'const:VALUE', got '" + text + "'");
}

std::string LambdaSchedule::str() const {
  if (kind == Kind::dann) return "dann";
  std::ostringstream os;
  os.precision(17);
  os << "const:" << value;
  return os.str();
}

double lambda_schedule(double progress, const LambdaSchedule& schedule) {
  if (schedule.kind == LambdaSchedule::Kind::constant) return schedule.value;
  const double p = std::clamp(progress, 0.0, 1.0);
  return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

void combine_adversarial(Tape& tape, EpisodeLosses& losses) {
  if (losses.l_d && losses.l_g) {
    losses.l_D = sub(tape, *losses.l_d, *losses.l_g);
  } else if (losses.l_d) {
    losses.l_D = losses.l_d;
  } else if (losses.l_g) {
    losses.l_D = scale(tape, *losses.l_g, -1.0);
  } else {
    losses.l_D.reset();
  }
}

namespace {

std::vector<Tensor> group_grads(const Gradients& grads, const ParamGroup& g) {
  std::vector<Tensor> out;
  out.reserve(g.bound.size());
  for (const auto& t : g.bound) out.push_back(grads.of(t));
  return out;
}

void axpy(std::vector<Tensor>& dst, const std::vector<Tensor>& src, double factor) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].data();
    auto s = src[i].data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += factor * s[j];
  }
}

std::vector<Tensor> scaled(const std::vector<Tensor>& src, double factor) {
  std::vector<Tensor> out = src;
  for (auto& t : out)
    for (auto& v : t.values()) v *= factor;
  return out;
}

bool has_node(const std::optional<Tensor>& t) { return t && t->node().has_value(); }

}  // namespace

RoutedGradients route_gradients(const Tape& tape, const EpisodeLosses& losses, const ParamGroups& groups,
                                double lambda, const StepOptions& options) {
  RoutedGradients out;
  std::optional<Gradients> gc, gd;
  if (has_node(losses.l_c)) gc = tape.backward(*losses.l_c);
  const bool adversarial = has_node(losses.l_D) && lambda != 0.0;
  if (adversarial) gd = tape.backward(*losses.l_D);

  if (gc && !groups.classifier.empty()) out.classifier = group_grads(*gc, groups.classifier);

  if (!groups.encoder.empty() && (gc || gd)) {
    out.encoder = gc ? group_grads(*gc, groups.encoder) : scaled(group_grads(*gd, groups.encoder), 0.0);
    if (gd) axpy(out.encoder, group_grads(*gd, groups.encoder), -lambda);
  }
  if (!groups.afa.empty()) {
    if (gd) out.afa = scaled(group_grads(*gd, groups.afa), lambda);
    if (gc && options.afa_learns_from_classification) {
      if (out.afa.empty()) {
        out.afa = group_grads(*gc, groups.afa);
      } else {
        axpy(out.afa, group_grads(*gc, groups.afa), 1.0);
      }
    }
  }
  if (gd && !groups.discriminator.empty()) out.discriminator = scaled(group_grads(*gd, groups.discriminator), lambda);
  return out;
}

namespace {

void apply_update(ParamGroup& group, const std::vector<Tensor>& grads) {
  if (group.frozen || grads.empty() || group.empty()) return;
  if (!group.optimizer) throw Error("parameter group has no optimizer state");
  adam_step(group.values, grads, *group.optimizer);
}

double value_or_zero(const std::optional<Tensor>& t) { return t ? (*t)[0] : 0.0; }

}  // namespace

LossReport adversarial_step(const Tape& tape, const EpisodeLosses& losses, ParamGroups& groups, double lambda,
                            const StepOptions& options) {
  LossReport report;
  report.iteration = options.iteration;
  report.lambda = lambda;
  report.l_c = value_or_zero(losses.l_c);
  report.l_d = value_or_zero(losses.l_d);
  report.l_g = value_or_zero(losses.l_g);
  report.l_D = value_or_zero(losses.l_D);
  for (double v : {report.l_c, report.l_d, report.l_g, report.l_D, lambda}) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(options.iteration));
    }
  }
  RoutedGradients routed = route_gradients(tape, losses, groups, lambda, options);
  apply_update(groups.classifier, routed.classifier);
  apply_update(groups.encoder, routed.encoder);
  apply_update(groups.afa, routed.afa);
  apply_update(groups.discriminator, routed.discriminator);
  return report;
}

}  // namespace afa
