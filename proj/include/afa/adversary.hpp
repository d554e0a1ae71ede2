#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "afa/encoder.hpp"
#include "afa/optim.hpp"
#include "afa/params.hpp"

namespace afa {

/// Logistic regressor over pooled features (theta_d): p = sigmoid(F mu + b).
struct DomainDiscriminator {
  Tensor weight;  // [C]
  Tensor bias;    // [1]

  std::vector<ParamRef> refs();
};

DomainDiscriminator init_discriminator(std::size_t features);

/// Probability that each row of F [M x C] comes from the augmented domain.
Tensor discriminate(Tape& tape, const Tensor& features, const DomainDiscriminator& d);

/// Mean BCE over the 2N rows [F_o; F_a] with domain labels 0 (original) and 1 (augmented).
Tensor domain_loss(Tape& tape, const Tensor& f_o, const Tensor& f_a, const DomainDiscriminator& d);

/// Fraction of the 2N rows the discriminator labels correctly at threshold 0.5.
double domain_accuracy(const Tensor& f_o, const Tensor& f_a, const DomainDiscriminator& d);

/// Squared Frobenius distance of per-sample gram matrices scaled by 1/(4 S^2 C^2),
/// averaged over the batch. Inputs are [N x C x H x W] (or a single [C x H x W]).
Tensor gram_loss(Tape& tape, const Tensor& m_o, const Tensor& m_a);

/// Mean of gram_loss over all perturbation sites. `per_site` receives each value.
Tensor total_gram_loss(Tape& tape, const DualFeatures& dual, std::vector<double>* per_site = nullptr);

struct LambdaSchedule {
  enum class Kind { dann, constant };
  Kind kind = Kind::dann;
  double value = 0.0;

  static LambdaSchedule dann() { return {Kind::dann, 0.0}; }
  static LambdaSchedule constant(double c) { return {Kind::constant, c}; }
  /// "dann" or "const:VALUE".
  static LambdaSchedule parse(const std::string& text);
  std::string str() const;
};

/// 2 / (1 + exp(-10 p)) - 1 for dann, the constant otherwise; p is clamped to [0, 1].
double lambda_schedule(double progress, const LambdaSchedule& schedule);

struct LossReport {
  std::size_t iteration = 0;
  double l_c = 0.0;
  double l_d = 0.0;
  double l_g = 0.0;
  double l_D = 0.0;
  double lambda = 0.0;
  double acc_domain = 0.0;
  std::vector<double> site_gram;
};

/// One parameter group handed to the optimizer. `bound` holds the tape-linked
/// copies used in the forward pass, `values` the tensors that get updated.
struct ParamGroup {
  std::vector<Tensor*> values;
  std::vector<Tensor> bound;
  AdamState* optimizer = nullptr;
  bool frozen = false;

  bool empty() const { return values.empty(); }
};

template <class P>
ParamGroup make_group(P& params, const P& bound_params, AdamState* optimizer) {
  ParamGroup g;
  g.values = tensor_ptrs(params);
  P copy = bound_params;
  for (auto* t : tensor_ptrs(copy)) g.bound.push_back(*t);
  g.optimizer = optimizer;
  return g;
}

/// Scalars recorded on the tape for one episode. `l_d`/`l_g` are absent when the
/// corresponding term is ablated; `l_c` may be absent for adversary-only steps.
struct EpisodeLosses {
  std::optional<Tensor> l_c;
  std::optional<Tensor> l_d;
  std::optional<Tensor> l_g;
  /// l_d - l_g (or whichever terms are present); built by combine_adversarial.
  std::optional<Tensor> l_D;
};

/// Builds l_D = l_d - l_g from whichever terms are present.
void combine_adversarial(Tape& tape, EpisodeLosses& losses);

struct StepOptions {
  std::size_t iteration = 0;
  /// Route dL_c/dtheta_a into the perturbation group as well (the "lc" variant
  /// of the discriminator-free ablation).
  bool afa_learns_from_classification = false;
};

struct ParamGroups {
  ParamGroup encoder;        // theta_e
  ParamGroup afa;            // theta_a
  ParamGroup discriminator;  // theta_d
  ParamGroup classifier;     // theta_c
};

/// Effective gradients actually applied, exposed for sign-routing checks.
struct RoutedGradients {
  std::vector<Tensor> encoder, afa, discriminator, classifier;
};

/// Computes the signed gradients of the min-max objective:
///   theta_c: dL_c        theta_e: dL_c - lambda dL_D
///   theta_a: lambda dL_D theta_d: lambda dL_D
/// Groups whose effective gradient is identically gated (lambda == 0, absent
/// term) are left empty.
RoutedGradients route_gradients(const Tape& tape, const EpisodeLosses& losses, const ParamGroups& groups,
                                double lambda, const StepOptions& options);

/// Routes gradients and applies one Adam step per non-frozen, non-gated group.
LossReport adversarial_step(const Tape& tape, const EpisodeLosses& losses, ParamGroups& groups, double lambda,
                            const StepOptions& options);

}  // namespace afa
