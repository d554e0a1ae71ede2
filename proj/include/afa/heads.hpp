#pragma once

#include <optional>
#include <string>
#include <vector>

#include "afa/ops.hpp"

namespace afa {

/// One n-way k-shot task. `support` / `query` hold either raw images
/// [rows x C x H x W] or embeddings [rows x D]; rows are grouped by class.
struct Episode {
  std::size_t ways = 0;
  std::size_t shots = 0;
  std::size_t queries = 0;
  Tensor support;
  Tensor query;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
  /// Dataset sample ids, for leak checks.
  std::vector<std::size_t> support_ids;
  std::vector<std::size_t> query_ids;
  std::size_t domain = 0;
};

struct HeadKind {
  enum class Type { matching, proto, tpn };
  Type type = Type::matching;
  double alpha = 0.99;
  /// Affinity bandwidth; unset means the per-episode lower-median pairwise distance.
  std::optional<double> sigma;

  static HeadKind matching() { return {Type::matching, 0.99, std::nullopt}; }
  static HeadKind proto() { return {Type::proto, 0.99, std::nullopt}; }
  static HeadKind tpn(double alpha = 0.99, std::optional<double> sigma = std::nullopt) {
    return {Type::tpn, alpha, sigma};
  }
  static HeadKind parse(const std::string& name);
  std::string name() const;
  void validate() const;
};

/// Cosine attention over support embeddings, summed per class.
Tensor matching_head(Tape& tape, const Tensor& support, const Tensor& query, std::span<const std::size_t> support_labels,
                     std::size_t ways);

/// Softmax of negative squared distance to class-mean prototypes.
Tensor proto_head(Tape& tape, const Tensor& support, const Tensor& query, std::span<const std::size_t> support_labels,
                  std::size_t ways);

/// Closed-form label propagation F = (I - alpha S)^-1 Y over support and query
/// embeddings, with query rows normalized into probabilities.
Tensor tpn_head(Tape& tape, const Tensor& support, const Tensor& query, std::span<const std::size_t> support_labels,
                std::size_t ways, double alpha, std::optional<double> sigma);

/// Dispatches on the head kind. Returns [queries x ways] probabilities.
Tensor classify(Tape& tape, const HeadKind& head, const Tensor& support, const Tensor& query,
                std::span<const std::size_t> support_labels, std::size_t ways);

/// Mean negative log probability of the true class (log floor 1e-7).
Tensor episode_loss(Tape& tape, const Tensor& probs, std::span<const std::size_t> labels);

/// Argmax accuracy; ties go to the lowest class index.
double episode_accuracy(const Tensor& probs, std::span<const std::size_t> labels);

}  // namespace afa
