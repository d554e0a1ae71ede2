#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "afa/adversary.hpp"
#include "afa/data.hpp"
#include "afa/encoder.hpp"
#include "afa/heads.hpp"

namespace afa {

/// Which parts of the adversarial machinery are active. Named variants are
/// "none", "no_dd", "no_lg", "nonlinear", "no_afa"; flags combine with '+'
/// (e.g. "no_dd+no_lg").
struct Ablation {
  bool afa = true;
  bool discriminator = true;
  bool gram = true;
  bool nonlinear = false;

  static Ablation parse(const std::string& text);
  std::string name() const;
  bool adversarial() const { return afa && (discriminator || gram); }
  bool operator==(const Ablation&) const = default;
};

/// How the perturbation layers learn when the discriminator is ablated.
enum class NoDdMode { neg_lg, lc };

struct ExperimentConfig {
  // Data: a saved dataset directory, a CSV file, or (when empty) the built-in
  // synthetic benchmark generated from `seed`.
  std::string data_path;
  std::size_t samples_per_class = 60;

  EncoderConfig encoder;
  HeadKind head = HeadKind::matching();
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries = 16;

  std::size_t pretrain_iterations = 300;
  std::size_t pretrain_batch = 64;
  std::size_t iterations = 2000;
  double lr = 1e-3;
  LambdaSchedule lambda = LambdaSchedule::dann();
  Ablation ablation;
  NoDdMode no_dd_mode = NoDdMode::neg_lg;
  bool shared_bn_stats = false;
  bool from_scratch = false;
  std::size_t heldout_every = 100;

  std::size_t trials = 200;
  std::vector<std::size_t> eval_shots = {1, 5};
  /// Worker threads for evaluation; 0 means one per hardware thread.
  std::size_t threads = 0;

  std::uint64_t seed = 0;
  std::string out_dir = "runs";

  void validate() const;
  /// Fingerprint of every field that influences results (excludes out_dir, threads).
  std::uint64_t hash() const;
};

std::string to_json(const ExperimentConfig& config);
/// Unknown keys are rejected; absent keys keep their defaults.
ExperimentConfig config_from_json(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Dataset named by the config, or the synthetic benchmark for its seed.
Dataset load_experiment_data(const ExperimentConfig& config);

struct TrialStats {
  std::vector<double> accuracies;
  double mean = 0.0;
  double std = 0.0;  // population
  double half_width = 0.0;
};

/// Mean, population std and 95% half-width 1.96 std / sqrt(T).
TrialStats trial_stats(std::vector<double> accuracies);

/// Everything needed to resume or evaluate a model.
struct Checkpoint {
  std::string stage;  // "init", "pretrain" or "meta-train"
  Encoder encoder;
  std::optional<LinearHead> linear_head;
  std::optional<AfaParams> afa;
  std::optional<DomainDiscriminator> discriminator;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  /// Names of every allocated trainable tensor.
  std::vector<std::string> parameter_names();
  std::size_t parameter_count();
};

/// Rounds every tensor to f32 in place, then writes manifest.json plus one AFAT
/// file per tensor (running statistics included).
void save_checkpoint(Checkpoint& checkpoint, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Fresh weights for the config (AFA and discriminator only when the ablation uses them).
Checkpoint init_checkpoint(const ExperimentConfig& config, const Dataset& data);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;
  double final_loss = 0.0;
  /// Accuracy of the final update's batch, measured before the update.
  double final_accuracy = 0.0;
};

/// Cross-entropy training of encoder + linear head on base classes of the first
/// domain. Writes pretrain_losses.jsonl and checkpoint/ under `out` when non-empty.
PretrainResult run_pretrain(const ExperimentConfig& config, const Dataset& data, const std::filesystem::path& out = {});

struct HeldoutCheck {
  std::size_t iteration = 0;
  double accuracy = 0.0;
  double running_max = 0.0;
};

struct MetaTrainResult {
  Checkpoint checkpoint;
  std::vector<LossReport> history;
  std::vector<HeldoutCheck> heldout;
  double cpu_seconds = 0.0;
};

/// Episodic adversarial training on base classes of the first domain, starting
/// from `init` (or fresh weights when null). Writes metrics.jsonl,
/// heldout.jsonl and checkpoint/ under `out` when non-empty.
MetaTrainResult run_meta_train(const ExperimentConfig& config, const Dataset& data, const Checkpoint* init,
                               const std::filesystem::path& out = {});

/// Accuracy of one evaluated episode given its query probabilities.
using TrialScorer = std::function<double(const Episode&)>;

/// Runs `trials` novel-class episodes on `domain` across a worker pool. Each
/// trial draws from its own RNG substream and results are merged by index.
TrialStats run_trials(const Dataset& data, std::size_t domain, std::size_t ways, std::size_t shots,
                      std::size_t queries, std::size_t trials, std::uint64_t seed, std::size_t threads,
                      const TrialScorer& scorer);

/// Evaluates the checkpoint's original stream (perturbation inactive, running
/// batch-norm statistics). Writes eval_<domain>_<k>shot.jsonl and a summary
/// JSON under `out` when non-empty.
TrialStats run_eval(const ExperimentConfig& config, const Dataset& data, const Checkpoint& checkpoint,
                    std::size_t domain, std::size_t shots, const std::filesystem::path& out = {});

/// Re-derives TrialStats from a per-trial JSONL file.
TrialStats replay_trials(const std::filesystem::path& jsonl);

struct AblationTable {
  std::vector<std::string> variants;
  std::vector<std::string> domains;
  std::vector<std::size_t> shots;
  /// stats[variant][domain * shots.size() + shot]
  std::vector<std::vector<TrialStats>> stats;

  const TrialStats& at(const std::string& variant, const std::string& domain, std::size_t shot) const;
  /// Mean accuracy over every target cell of one variant.
  double target_mean(const std::string& variant) const;
  /// Rows are variants, columns domain x shot, cells "mean +- half-width" in percent.
  std::string tsv() const;
};

/// Pretrains once, then meta-trains and evaluates each variant on every domain
/// except the first. Writes ablation.tsv and ablation.json under `out`.
AblationTable run_ablation_suite(const ExperimentConfig& config, const Dataset& data,
                                 const std::vector<std::string>& variants = {"none", "no_dd", "no_lg", "nonlinear",
                                                                              "no_afa"},
                                 const std::filesystem::path& out = {});

struct GradCheckInstance {
  TensorProgram program;
  std::vector<Tensor> params;
  std::vector<std::string> names;
};

/// One differentiable path checked by finite differences.
struct GradCheckPath {
  std::string name;
  std::function<GradCheckInstance(Rng&)> make;
};

struct GradCheckEntry {
  std::string path;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;
  double seconds = 0.0;
  bool passed() const;
  std::string json() const;
};

/// L_c for each head, L_d, L_g and the combined objective on tiny encoders.
std::vector<GradCheckPath> standard_gradcheck_paths();

GradCheckReport run_gradcheck(std::uint64_t seed, const std::vector<GradCheckPath>& paths,
                              std::size_t instances = 20, double tolerance = 1e-4);

}  // namespace afa
