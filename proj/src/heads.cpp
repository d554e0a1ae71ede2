#include "afa/heads.hpp"

#include <cmath>

namespace afa {

HeadKind HeadKind::parse(const std::string& name) {
  if (name == "matching") return matching();
  if (name == "proto") return proto();
  if (name == "tpn") return tpn();
  throw ConfigError("unknown head '" + name + "' (expected matching|proto|tpn)");
}

std::string HeadKind::name() const {
  switch (type) {
    case Type::matching:
      return "matching";
    case Type::proto:
      return "proto";
    case Type::tpn:
      return "tpn";
  }
  return "?";
}

void HeadKind::validate() const {
  if (type != Type::tpn) return;
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("tpn alpha must lie in [0, 1)");
  if (sigma && !(*sigma > 0.0)) throw ConfigError("tpn sigma must be positive");
}

namespace {

void check_features(const char* head, const Tensor& support, const Tensor& query,
                    std::span<const std::size_t> labels, std::size_t ways) {
  if (support.rank() != 2 || query.rank() != 2 || support.dim(1) != query.dim(1)) {
    throw ShapeError(std::string(head) + ": embeddings must be [rows x D], got " + shape_str(support.shape()) +
                     " and " + shape_str(query.shape()));
  }
  if (labels.size() != support.dim(0)) throw ShapeError(std::string(head) + ": one label per support row required");
  for (auto l : labels) {
    if (l >= ways) throw ShapeError(std::string(head) + ": support label out of range");
  }
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t ways, std::size_t rows) {
  Tensor y({rows, ways});
  for (std::size_t i = 0; i < labels.size(); ++i) y.at(i, labels[i]) = 1.0;
  return y;
}

}  // namespace

Tensor matching_head(Tape& tape, const Tensor& support, const Tensor& query, std::span<const std::size_t> support_labels,
                     std::size_t ways) {
  check_features("matching_head", support, query, support_labels, ways);
  Tensor qn = l2_normalize_rows(tape, query);
  Tensor sn = l2_normalize_rows(tape, support);
  Tensor attention = softmax_rows(tape, matmul(tape, qn, transpose(tape, sn)));
  return matmul(tape, attention, one_hot(support_labels, ways, support.dim(0)));
}

Tensor proto_head(Tape& tape, const Tensor& support, const Tensor& query, std::span<const std::size_t> support_labels,
                  std::size_t ways) {
  check_features("proto_head", support, query, support_labels, ways);
  std::vector<double> counts(ways, 0.0);
  for (auto l : support_labels) counts[l] += 1.0;
  Tensor avg({ways, support.dim(0)});
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    avg.at(support_labels[i], i) = 1.0 / counts[support_labels[i]];
  }
  for (std::size_t c = 0; c < ways; ++c) {
    if (counts[c] == 0.0) throw ShapeError("proto_head: class without support samples");
  }
  Tensor prototypes = matmul(tape, avg, support);
  return softmax_rows(tape, scale(tape, pairwise_sq_dist(tape, query, prototypes), -1.0));
}

Tensor tpn_head(Tape& tape, const Tensor& support, const Tensor& query, std::span<const std::size_t> support_labels,
                std::size_t ways, double alpha, std::optional<double> sigma) {
  check_features("tpn_head", support, query, support_labels, ways);
  HeadKind::tpn(alpha, sigma).validate();
  const std::size_t ns = support.dim(0), total = ns + query.dim(0);
  Tensor z = concat_rows(tape, support, query);
  Tensor d2 = pairwise_sq_dist(tape, z, z);

  Tensor bandwidth;  // sigma^2
  if (sigma) {
    bandwidth = Tensor::scalar(*sigma * *sigma);
  } else {
    std::vector<std::size_t> upper;
    for (std::size_t i = 0; i < total; ++i)
      for (std::size_t j = i + 1; j < total; ++j) upper.push_back(i * total + j);
    // Lower median of squared distances == square of the lower-median distance.
    bandwidth = add_scalar(tape, lower_median(tape, gather(tape, d2, upper)), 1e-12);
  }
  Tensor offdiag = Tensor::ones({total, total});
  for (std::size_t i = 0; i < total; ++i) offdiag.at(i, i) = 0.0;
  Tensor w = mul(tape, exp(tape, scale(tape, div_by(tape, d2, bandwidth), -0.5)), offdiag);

  Tensor inv_sqrt_deg = pow_scalar(tape, add_scalar(tape, row_sum(tape, w), 1e-12), -0.5);
  Tensor outer = matmul(tape, reshape(tape, inv_sqrt_deg, {total, 1}), reshape(tape, inv_sqrt_deg, {1, total}));
  Tensor s = mul(tape, w, outer);
  Tensor system = sub(tape, Tensor::identity(total), scale(tape, s, alpha));
  Tensor f = solve(tape, system, one_hot(support_labels, ways, total));
  return row_normalize(tape, slice_rows(tape, f, ns, total), 1e-12);
}

Tensor classify(Tape& tape, const HeadKind& head, const Tensor& support, const Tensor& query,
                std::span<const std::size_t> support_labels, std::size_t ways) {
  switch (head.type) {
    case HeadKind::Type::matching:
      return matching_head(tape, support, query, support_labels, ways);
    case HeadKind::Type::proto:
      return proto_head(tape, support, query, support_labels, ways);
    case HeadKind::Type::tpn:
      return tpn_head(tape, support, query, support_labels, ways, head.alpha, head.sigma);
  }
  throw ConfigError("unknown head kind");
}

Tensor episode_loss(Tape& tape, const Tensor& probs, std::span<const std::size_t> labels) {
  return nll_probs(tape, probs, labels, 1e-7);
}

double episode_accuracy(const Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw ShapeError("episode_accuracy: probabilities " + shape_str(probs.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < probs.dim(1); ++j) {
      if (probs.at(i, j) > probs.at(i, best)) best = j;
    }
    hit += best == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace afa
