#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "afa/adversary.hpp"
#include "afa/heads.hpp"
#include "oracles.hpp"

using namespace afa;

namespace {

const double kLn2 = std::log(2.0);

/// Tiny two-block encoder, random perturbation and discriminator, one 2-way episode.
struct Toy {
  Encoder encoder;
  AfaParams afa;
  DomainDiscriminator disc;
  Tensor x;
  std::vector<std::size_t> support_labels{0, 0, 1, 1};
  std::vector<std::size_t> query_labels{0, 0, 1, 1};

  static Toy make(Rng& rng, bool identity = false) {
    EncoderConfig cfg;
    cfg.in_channels = 2;
    cfg.height = 4;
    cfg.width = 4;
    cfg.channels = {3, 4};
    Toy t;
    t.encoder = init_encoder(cfg, rng);
    for (auto& b : t.encoder.params.blocks) {
      for (auto& v : b.bn_scale.values()) v = rng.normal(1.0, 0.3);
      for (auto& v : b.bn_shift.values()) v = rng.normal(0.0, 0.3);
    }
    t.afa = identity ? identity_afa(cfg.channels) : init_afa(cfg.channels, rng);
    t.disc = init_discriminator(4);
    for (auto& v : t.disc.weight.values()) v = rng.normal(0.0, 1.0);
    t.disc.bias[0] = rng.normal(0.0, 0.5);
    t.x = oracle::random_tensor(rng, {8, 2, 4, 4});
    return t;
  }
};

/// One forward pass on `tape` with the toy's parameters bound to it.
struct Pass {
  EncoderParams enc;
  AfaParams afa;
  DomainDiscriminator disc;
  EpisodeLosses losses;
  DualFeatures dual;
};

Pass forward(Tape& tape, Toy& toy, bool with_lc = true, bool with_ld = true, bool with_lg = true) {
  Pass p;
  p.enc = bind(tape, toy.encoder.params);
  p.afa = bind(tape, toy.afa);
  p.disc = bind(tape, toy.disc);
  p.dual = forward_dual(tape, toy.x, p.enc, toy.encoder.stats, &p.afa, {.update_running_stats = false});
  if (with_lc) {
    const Tensor& f = *p.dual.f_a;
    Tensor probs = classify(tape, HeadKind::proto(), slice_rows(tape, f, 0, 4), slice_rows(tape, f, 4, 8),
                            toy.support_labels, 2);
    p.losses.l_c = episode_loss(tape, probs, toy.query_labels);
  }
  if (with_ld) p.losses.l_d = domain_loss(tape, p.dual.f_o, *p.dual.f_a, p.disc);
  if (with_lg) p.losses.l_g = total_gram_loss(tape, p.dual);
  combine_adversarial(tape, p.losses);
  return p;
}

double l_D_of(Toy& toy) {
  Tape tape;
  return forward(tape, toy, false).losses.l_D->item();
}

struct Optimizers {
  AdamState enc, afa, disc;
  Optimizers(Toy& t, double lr) {
    const AdamConfig c{.lr = lr};
    enc = AdamState::for_params(tensor_ptrs(t.encoder.params), c);
    afa = AdamState::for_params(tensor_ptrs(t.afa), c);
    disc = AdamState::for_params(tensor_ptrs(t.disc), c);
  }
};

ParamGroups groups_for(Toy& t, Pass& p, Optimizers& o) {
  ParamGroups g;
  g.encoder = make_group(t.encoder.params, p.enc, &o.enc);
  g.afa = make_group(t.afa, p.afa, &o.afa);
  g.discriminator = make_group(t.disc, p.disc, &o.disc);
  return g;
}

std::vector<Tensor> snapshot(std::vector<Tensor*> ptrs) {
  std::vector<Tensor> out;
  for (auto* p : ptrs) out.push_back(*p);
  return out;
}

bool same(const std::vector<Tensor>& a, std::vector<Tensor*> b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      if (a[i][j] != (*b[i])[j]) return false;
  return true;
}

double dot(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) acc += a[i][j] * b[i][j];
  return acc;
}

}  // namespace

// ---------------------------------------------------------------- discriminator

TEST(Discriminate, ZeroParametersGiveOneHalf) {
  Rng rng(1);
  Tape tape;
  const Tensor f = oracle::random_tensor(rng, {6, 4}, 3.0);
  const Tensor p = discriminate(tape, f, init_discriminator(4));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p[i], 0.5);
}

TEST(Discriminate, SigmoidClosedForm) {
  Tape tape;
  const DomainDiscriminator d{Tensor::vector({1.0, 0.0}), Tensor::vector({0.0})};
  const Tensor p = discriminate(tape, Tensor::matrix(1, 2, {std::log(3.0), 7.0}), d);
  EXPECT_NEAR(p[0], 0.75, 1e-15);
}

TEST(Discriminate, ProbabilitiesStrictlyInsideUnitInterval) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    const DomainDiscriminator d{oracle::random_tensor(rng, {5}), oracle::random_tensor(rng, {1})};
    const Tensor p = discriminate(tape, oracle::random_tensor(rng, {7, 5}, 2.0), d);
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_GT(p[i], 0.0);
      EXPECT_LT(p[i], 1.0);
    }
  }
}

TEST(Discriminate, DimensionMismatchRejected) {
  Tape tape;
  EXPECT_THROW(discriminate(tape, Tensor({3, 5}), init_discriminator(4)), ShapeError);
}

TEST(Discriminate, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  const oracle::Program program = [](Tape& t, const std::vector<Tensor>& in) {
    return sum(t, discriminate(t, in[0], DomainDiscriminator{in[1], in[2]}));
  };
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<Tensor> in = {oracle::random_tensor(rng, {5, 3}), oracle::random_tensor(rng, {3}),
                                    oracle::random_tensor(rng, {1})};
    EXPECT_LT(oracle::max_gradient_error(program, in), 1e-7);
  }
}

// ---------------------------------------------------------------- domain loss

TEST(DomainLoss, ZeroDiscriminatorGivesLn2) {
  Rng rng(4);
  Tape tape;
  const Tensor fo = oracle::random_tensor(rng, {5, 4}), fa = oracle::random_tensor(rng, {5, 4});
  EXPECT_NEAR(domain_loss(tape, fo, fa, init_discriminator(4)).item(), kLn2, 1e-15);
}

TEST(DomainLoss, IdenticalStreamsNeverBeatChance) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    const Tensor f = oracle::random_tensor(rng, {6, 4}, 2.0);
    const DomainDiscriminator d{oracle::random_tensor(rng, {4}, 3.0), oracle::random_tensor(rng, {1}, 2.0)};
    EXPECT_GE(domain_loss(tape, f, f, d).item(), kLn2 - 1e-15);
  }
}

TEST(DomainLoss, MatchesHandWrittenBinaryCrossEntropy) {
  Rng rng(6);
  Tape tape;
  const Tensor fo = oracle::random_tensor(rng, {3, 2}), fa = oracle::random_tensor(rng, {3, 2});
  const DomainDiscriminator d{oracle::random_tensor(rng, {2}), oracle::random_tensor(rng, {1})};
  double expected = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double so = fo.at(i, 0) * d.weight[0] + fo.at(i, 1) * d.weight[1] + d.bias[0];
    const double sa = fa.at(i, 0) * d.weight[0] + fa.at(i, 1) * d.weight[1] + d.bias[0];
    expected += -std::log(1.0 - 1.0 / (1.0 + std::exp(-so))) - std::log(1.0 / (1.0 + std::exp(-sa)));
  }
  EXPECT_NEAR(domain_loss(tape, fo, fa, d).item(), expected / 6.0, 1e-12);
}

TEST(DomainLoss, FittedDiscriminatorSeparatesOpposedClusters) {
  Rng rng(7);
  const Tensor mu = Tensor::vector({0.6, -0.8, 0.0});
  Tensor fo({8, 3}), fa({8, 3});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      fo.at(i, j) = -10.0 * mu[j] + rng.normal(0.0, 0.5);
      fa.at(i, j) = 10.0 * mu[j] + rng.normal(0.0, 0.5);
    }
  DomainDiscriminator d = init_discriminator(3);
  AdamState opt = AdamState::for_params(tensor_ptrs(d), {.lr = 0.05});
  double loss = 1.0;
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    DomainDiscriminator b = bind(tape, d);
    const Tensor l = domain_loss(tape, fo, fa, b);
    loss = l.item();
    adam_step(tensor_ptrs(d), gradients_of(tape.backward(l), b), opt);
  }
  EXPECT_LE(loss, 0.01);
}

TEST(DomainLoss, BatchMismatchRejected) {
  Tape tape;
  EXPECT_THROW(domain_loss(tape, Tensor({3, 4}), Tensor({2, 4}), init_discriminator(4)), ShapeError);
}

TEST(DomainAccuracy, CountsBothStreams) {
  const DomainDiscriminator d{Tensor::vector({1.0}), Tensor::vector({0.0})};
  const Tensor fo = Tensor::matrix(2, 1, {-1.0, 2.0});
  const Tensor fa = Tensor::matrix(2, 1, {3.0, 4.0});
  EXPECT_DOUBLE_EQ(domain_accuracy(fo, fa, d), 0.75);
}

// ---------------------------------------------------------------- gram loss

TEST(GramLoss, IdenticalInputsGiveZero) {
  Rng rng(8);
  Tape tape;
  const Tensor m = oracle::random_tensor(rng, {3, 4, 2, 3});
  EXPECT_EQ(gram_loss(tape, m, m).item(), 0.0);
}

TEST(GramLoss, HandCaseIdentityGram) {
  Tape tape;
  const Tensor mo({2, 1, 2});
  const Tensor ma({2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  EXPECT_DOUBLE_EQ(gram_loss(tape, mo, ma).item(), 0.03125);
}

TEST(GramLoss, MatchesBruteForceReference) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(8), h = 1 + rng.below(3), w = 1 + rng.below(3);
    const Tensor mo = oracle::random_tensor(rng, {n, c, h, w}), ma = oracle::random_tensor(rng, {n, c, h, w});
    Tape tape;
    EXPECT_NEAR(gram_loss(tape, mo, ma).item(), oracle::gram_loss(mo, ma), 1e-10);
  }
}

TEST(GramLoss, SymmetricInItsArguments) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = oracle::random_tensor(rng, {2, 3, 2, 2}), b = oracle::random_tensor(rng, {2, 3, 2, 2});
    Tape tape;
    EXPECT_NEAR(gram_loss(tape, a, b).item(), gram_loss(tape, b, a).item(), 1e-14);
  }
}

TEST(GramLoss, InvariantToSpatialPermutation) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2, c = 3, h = 2, w = 3, s = h * w;
    const Tensor mo = oracle::random_tensor(rng, {n, c, h, w}), ma = oracle::random_tensor(rng, {n, c, h, w});
    std::vector<std::size_t> perm(s);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = s - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Tensor po = mo, pa = ma;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < s; ++i) {
          po[(b * c + ch) * s + i] = mo[(b * c + ch) * s + perm[i]];
          pa[(b * c + ch) * s + i] = ma[(b * c + ch) * s + perm[i]];
        }
    Tape tape;
    EXPECT_NEAR(gram_loss(tape, mo, ma).item(), gram_loss(tape, po, pa).item(), 1e-12);
  }
}

TEST(GramLoss, ShapeMismatchRejected) {
  Tape tape;
  EXPECT_THROW(gram_loss(tape, Tensor({1, 2, 2, 2}), Tensor({1, 2, 2, 3})), ShapeError);
}

TEST(GramLoss, NonNegative) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    Tape tape;
    EXPECT_GE(gram_loss(tape, oracle::random_tensor(rng, {2, 2, 2, 2}), oracle::random_tensor(rng, {2, 2, 2, 2}))
                  .item(),
              0.0);
  }
}

TEST(TotalGramLoss, IdentityPerturbationGivesZero) {
  Rng rng(13);
  Toy toy = Toy::make(rng, true);
  Tape tape;
  Pass p = forward(tape, toy, false, false, true);
  EXPECT_EQ(p.losses.l_g->item(), 0.0);
}

TEST(TotalGramLoss, SingleSiteEqualsSiteLoss) {
  Rng rng(14);
  DualFeatures d;
  d.sites.emplace_back(oracle::random_tensor(rng, {2, 3, 2, 2}), oracle::random_tensor(rng, {2, 3, 2, 2}));
  Tape tape;
  EXPECT_EQ(total_gram_loss(tape, d).item(), gram_loss(tape, d.sites[0].first, d.sites[0].second).item());
}

TEST(TotalGramLoss, MeanOverSites) {
  // one channel, one position: loss = a^4 / 4
  DualFeatures d;
  d.sites.emplace_back(Tensor({1, 1, 1}), Tensor({1, 1, 1}, {std::pow(0.08, 0.25)}));
  d.sites.emplace_back(Tensor({1, 1, 1}), Tensor({1, 1, 1}, {std::pow(0.16, 0.25)}));
  Tape tape;
  std::vector<double> per_site;
  EXPECT_NEAR(total_gram_loss(tape, d, &per_site).item(), 0.03, 1e-15);
  ASSERT_EQ(per_site.size(), 2u);
  EXPECT_NEAR(per_site[0], 0.02, 1e-15);
  EXPECT_NEAR(per_site[1], 0.04, 1e-15);
}

TEST(TotalGramLoss, NoSitesRejected) {
  Tape tape;
  EXPECT_THROW(total_gram_loss(tape, DualFeatures{}), ShapeError);
}

// ---------------------------------------------------------------- lambda schedule

TEST(LambdaSchedule, DannCurve) {
  const auto dann = LambdaSchedule::dann();
  EXPECT_EQ(lambda_schedule(0.0, dann), 0.0);
  EXPECT_NEAR(lambda_schedule(1.0, dann), 0.99991, 1e-5);
  EXPECT_NEAR(lambda_schedule(0.5, dann), 0.98661, 1e-5);
  EXPECT_NEAR(lambda_schedule(1.0, dann), 2.0 / (1.0 + std::exp(-10.0)) - 1.0, 1e-15);
}

TEST(LambdaSchedule, ProgressIsClamped) {
  const auto dann = LambdaSchedule::dann();
  EXPECT_EQ(lambda_schedule(-3.0, dann), 0.0);
  EXPECT_EQ(lambda_schedule(7.0, dann), lambda_schedule(1.0, dann));
}

TEST(LambdaSchedule, ConstantAndParsing) {
  EXPECT_EQ(lambda_schedule(0.3, LambdaSchedule::constant(0.25)), 0.25);
  EXPECT_EQ(LambdaSchedule::parse("dann").kind, LambdaSchedule::Kind::dann);
  EXPECT_EQ(LambdaSchedule::parse("const:0.5").value, 0.5);
  EXPECT_EQ(LambdaSchedule::parse(LambdaSchedule::constant(0.1).str()).value, 0.1);
  EXPECT_THROW(LambdaSchedule::parse("const:"), ConfigError);
  EXPECT_THROW(LambdaSchedule::parse("const:1x"), ConfigError);
  EXPECT_THROW(LambdaSchedule::parse("linear"), ConfigError);
}

// ---------------------------------------------------------------- combined objective

TEST(CombinedObjective, EqualsDomainMinusGram) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    Toy toy = Toy::make(rng);
    Tape tape;
    Pass p = forward(tape, toy);
    const double ld = p.losses.l_d->item(), lg = p.losses.l_g->item();
    EXPECT_EQ(p.losses.l_D->item(), ld - lg);
    Optimizers o(toy, 1e-3);
    ParamGroups g = groups_for(toy, p, o);
    const LossReport r = adversarial_step(tape, p.losses, g, 0.5, {});
    EXPECT_NEAR(r.l_D, r.l_d - r.l_g, 1e-12);
    EXPECT_GE(r.l_g, 0.0);
    EXPECT_GE(r.l_d, 0.0);
  }
}

TEST(CombinedObjective, AblatedTermsDropOut) {
  Rng rng(16);
  Toy toy = Toy::make(rng);
  Tape tape;
  Pass only_g = forward(tape, toy, false, false, true);
  EXPECT_EQ(only_g.losses.l_D->item(), -only_g.losses.l_g->item());
  Pass only_d = forward(tape, toy, false, true, false);
  EXPECT_EQ(only_d.losses.l_D->item(), only_d.losses.l_d->item());
  Pass none = forward(tape, toy, true, false, false);
  EXPECT_FALSE(none.losses.l_D.has_value());
}

// ---------------------------------------------------------------- routing

TEST(Routing, SignedGradientsMatchRawTapeGradients) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Toy toy = Toy::make(rng);
    Tape tape;
    Pass p = forward(tape, toy);
    Optimizers o(toy, 1e-3);
    const ParamGroups g = groups_for(toy, p, o);
    const double lambda = 0.1 + rng.uniform();
    const RoutedGradients r = route_gradients(tape, p.losses, g, lambda, {});
    const Gradients gc = tape.backward(*p.losses.l_c), gd = tape.backward(*p.losses.l_D);
    const auto ce = gradients_of(gc, p.enc), de = gradients_of(gd, p.enc);
    const auto da = gradients_of(gd, p.afa), dd = gradients_of(gd, p.disc);
    for (std::size_t i = 0; i < ce.size(); ++i)
      for (std::size_t j = 0; j < ce[i].size(); ++j) EXPECT_EQ(r.encoder[i][j], ce[i][j] - lambda * de[i][j]);
    for (std::size_t i = 0; i < da.size(); ++i)
      for (std::size_t j = 0; j < da[i].size(); ++j) EXPECT_EQ(r.afa[i][j], lambda * da[i][j]);
    for (std::size_t i = 0; i < dd.size(); ++i)
      for (std::size_t j = 0; j < dd[i].size(); ++j) EXPECT_EQ(r.discriminator[i][j], lambda * dd[i][j]);
  }
}

TEST(Routing, UpdateDirectionsFollowTheMinMax) {
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    Toy toy = Toy::make(rng);
    Tape tape;
    Pass p = forward(tape, toy, false);
    Optimizers o(toy, 1e-3);
    const ParamGroups g = groups_for(toy, p, o);
    const RoutedGradients r = route_gradients(tape, p.losses, g, 0.7, {});
    const Gradients gd = tape.backward(*p.losses.l_D);
    // optimizers descend the routed gradient, so the update direction is its negation
    EXPECT_LE(dot(r.encoder, gradients_of(gd, p.enc)), 0.0);
    EXPECT_GE(dot(r.afa, gradients_of(gd, p.afa)), 0.0);
    EXPECT_GE(dot(r.discriminator, gradients_of(gd, p.disc)), 0.0);
  }
}

TEST(Routing, ClassificationLossNeverReachesPerturbation) {
  Rng rng(19);
  Toy toy = Toy::make(rng);
  Tape tape;
  Pass p = forward(tape, toy, true, false, false);
  Optimizers o(toy, 1e-3);
  ParamGroups g = groups_for(toy, p, o);
  // the raw tape gradient is nonzero; the routing must drop it
  double raw = 0.0;
  for (const auto& t : gradients_of(tape.backward(*p.losses.l_c), p.afa))
    for (double v : t.values()) raw += std::abs(v);
  EXPECT_GT(raw, 0.0);
  const RoutedGradients r = route_gradients(tape, p.losses, g, 1.0, {});
  EXPECT_TRUE(r.afa.empty());
  const auto before = snapshot(tensor_ptrs(toy.afa));
  adversarial_step(tape, p.losses, g, 1.0, {});
  EXPECT_TRUE(same(before, tensor_ptrs(toy.afa)));
  EXPECT_EQ(o.afa.steps(), 0u);

  const RoutedGradients lc = route_gradients(tape, p.losses, g, 1.0, {.afa_learns_from_classification = true});
  ASSERT_FALSE(lc.afa.empty());
  EXPECT_GT(dot(lc.afa, lc.afa), 0.0);
}

TEST(Routing, ZeroLambdaGatesTheAdversary) {
  Rng rng(20);
  for (int trial = 0; trial < 5; ++trial) {
    Toy toy = Toy::make(rng);
    Toy reference = toy;
    const auto afa_before = snapshot(tensor_ptrs(toy.afa));
    const auto disc_before = snapshot(tensor_ptrs(toy.disc));

    Tape tape;
    Pass p = forward(tape, toy);
    Optimizers o(toy, 1e-2);
    ParamGroups g = groups_for(toy, p, o);
    adversarial_step(tape, p.losses, g, 0.0, {});
    EXPECT_TRUE(same(afa_before, tensor_ptrs(toy.afa)));
    EXPECT_TRUE(same(disc_before, tensor_ptrs(toy.disc)));
    EXPECT_EQ(o.afa.steps(), 0u);
    EXPECT_EQ(o.disc.steps(), 0u);
    EXPECT_EQ(o.enc.steps(), 1u);

    Tape ref_tape;
    Pass q = forward(ref_tape, reference, true, false, false);
    Optimizers ro(reference, 1e-2);
    ParamGroups rg = groups_for(reference, q, ro);
    adversarial_step(ref_tape, q.losses, rg, 0.0, {});
    const auto ref_enc = snapshot(tensor_ptrs(reference.encoder.params));
    EXPECT_TRUE(same(ref_enc, tensor_ptrs(toy.encoder.params)));
  }
}

TEST(Routing, EncoderAscentDoesNotDecreaseObjective) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Toy toy = Toy::make(rng);
    const double before = l_D_of(toy);
    Tape tape;
    Pass p = forward(tape, toy, false);
    Optimizers o(toy, 1e-6);
    ParamGroups g = groups_for(toy, p, o);
    g.afa.frozen = true;
    g.discriminator.frozen = true;
    adversarial_step(tape, p.losses, g, 1.0, {});
    EXPECT_GE(l_D_of(toy) - before, -1e-12);
  }
}

TEST(Routing, AdversaryDescentDoesNotIncreaseObjective) {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    Toy toy = Toy::make(rng);
    const double before = l_D_of(toy);
    Tape tape;
    Pass p = forward(tape, toy, false);
    Optimizers o(toy, 1e-6);
    ParamGroups g = groups_for(toy, p, o);
    g.encoder.frozen = true;
    adversarial_step(tape, p.losses, g, 1.0, {});
    EXPECT_LE(l_D_of(toy) - before, 1e-12);
  }
}

TEST(Routing, IdentityPerturbationKeepsDomainLossAtChance) {
  Rng rng(23);
  Toy toy = Toy::make(rng, true);
  Optimizers o(toy, 0.05);
  for (int step = 0; step < 30; ++step) {
    Tape tape;
    Pass p = forward(tape, toy);
    EXPECT_EQ(p.losses.l_g->item(), 0.0);
    ParamGroups g = groups_for(toy, p, o);
    g.afa.frozen = true;
    const LossReport r = adversarial_step(tape, p.losses, g, 1.0, {.iteration = std::size_t(step)});
    EXPECT_GE(r.l_d, kLn2 - 1e-6);
  }
}

TEST(Routing, NonFiniteLossAbortsWithIteration) {
  Rng rng(24);
  Toy toy = Toy::make(rng);
  Tape tape;
  Pass p = forward(tape, toy);
  Optimizers o(toy, 1e-3);
  ParamGroups g = groups_for(toy, p, o);
  p.losses.l_g = Tensor::scalar(std::nan(""));
  const auto before = snapshot(tensor_ptrs(toy.encoder.params));
  try {
    adversarial_step(tape, p.losses, g, 1.0, {.iteration = 42});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
  }
  EXPECT_TRUE(same(before, tensor_ptrs(toy.encoder.params)));
}
