#include "afa/cli.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "afa/harness.hpp"

namespace afa {

namespace {

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string head;
  std::string ablation;
  std::string lambda;
  std::size_t trials = 0;
  std::size_t iters = 0;
  std::size_t pretrain_iters = 0;
  std::size_t shots = 0;
  std::size_t ways = 0;
  std::size_t threads = 0;
  bool shared_bn_stats = false;
  bool from_scratch = false;
  std::string no_dd_mode;
  std::string data;
  std::string checkpoint;
  std::string domain;
};

struct Options {
  CLI::Option* seed = nullptr;
  CLI::Option* trials = nullptr;
  CLI::Option* iters = nullptr;
  CLI::Option* pretrain_iters = nullptr;
  CLI::Option* shots = nullptr;
  CLI::Option* ways = nullptr;
  CLI::Option* threads = nullptr;
};

void add_common(CLI::App* cmd, Flags& f, Options& o) {
  cmd->add_option("--config", f.config, "JSON experiment config; flags override its values");
  o.seed = cmd->add_option("--seed", f.seed, "Master seed");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--data", f.data, "Dataset directory or CSV file (default: synthetic benchmark)");
  cmd->add_option("--head", f.head, "matching | proto | tpn");
  cmd->add_option("--ablation", f.ablation, "none | no_dd | no_lg | nonlinear | no_afa");
  cmd->add_option("--lambda", f.lambda, "dann | const:VALUE");
  cmd->add_option("--no-dd-mode", f.no_dd_mode, "neg_lg | lc");
  o.trials = cmd->add_option("--trials", f.trials, "Evaluation episodes per setting");
  o.iters = cmd->add_option("--iters", f.iters, "Meta-training iterations");
  o.pretrain_iters = cmd->add_option("--pretrain-iters", f.pretrain_iters, "Pretraining iterations");
  o.shots = cmd->add_option("--shots", f.shots, "Support samples per class");
  o.ways = cmd->add_option("--ways", f.ways, "Classes per episode");
  o.threads = cmd->add_option("--threads", f.threads, "Evaluation worker threads (0: all cores)");
  cmd->add_flag("--shared-bn-stats", f.shared_bn_stats, "Normalize the augmented stream with original batch stats");
  cmd->add_flag("--from-scratch", f.from_scratch, "Skip pretraining");
}

ExperimentConfig build_config(const Flags& f, const Options& o, bool eval_command) {
  ExperimentConfig c;
  if (!f.config.empty()) c = load_config(f.config);
  if (o.seed->count()) c.seed = f.seed;
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.data.empty()) c.data_path = f.data;
  if (!f.head.empty()) c.head = HeadKind::parse(f.head);
  if (!f.ablation.empty()) c.ablation = Ablation::parse(f.ablation);
  if (!f.lambda.empty()) c.lambda = LambdaSchedule::parse(f.lambda);
  if (!f.no_dd_mode.empty()) {
    if (f.no_dd_mode == "lc") {
      c.no_dd_mode = NoDdMode::lc;
    } else if (f.no_dd_mode == "neg_lg") {
      c.no_dd_mode = NoDdMode::neg_lg;
    } else {
      throw ConfigError("--no-dd-mode must be neg_lg or lc");
    }
  }
  if (o.trials->count()) c.trials = f.trials;
  if (o.iters->count()) c.iterations = f.iters;
  if (o.pretrain_iters->count()) c.pretrain_iterations = f.pretrain_iters;
  if (o.shots->count()) {
    c.shots = f.shots;
    if (eval_command) c.eval_shots = {f.shots};
  }
  if (o.ways->count()) c.ways = f.ways;
  if (o.threads->count()) c.threads = f.threads;
  if (f.shared_bn_stats) c.shared_bn_stats = true;
  if (f.from_scratch) c.from_scratch = true;
  c.validate();
  return c;
}

void write_config(const ExperimentConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.json");
  os << to_json(c) << '\n';
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Adversarial feature augmentation for cross-domain few-shot classification"};
  app.require_subcommand(1);
  Flags f;
  std::map<CLI::App*, Options> options;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark dataset");
  CLI::App* pretrain = app.add_subcommand("pretrain", "Cross-entropy pretraining on base classes");
  CLI::App* meta = app.add_subcommand("meta-train", "Episodic adversarial meta-training");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on novel-class episodes");
  CLI::App* ablate = app.add_subcommand("ablate", "Train and evaluate every ablation variant");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss path");
  const auto commands = {gen, pretrain, meta, eval, ablate, gradcheck};
  for (CLI::App* cmd : commands) add_common(cmd, f, options[cmd]);
  meta->add_option("--checkpoint", f.checkpoint, "Initial checkpoint directory");
  eval->add_option("--checkpoint", f.checkpoint, "Checkpoint directory to evaluate");
  eval->add_option("--domain", f.domain, "Domain name (default: every domain except the first)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  ExperimentConfig config;
  try {
    CLI::App* chosen = app.get_subcommands().front();
    config = build_config(f, options.at(chosen), chosen == eval);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    const std::filesystem::path out = config.out_dir;
    if (gen->parsed()) {
      GeneratorSpec spec = GeneratorSpec::default_benchmark(config.seed);
      spec.samples_per_class = config.samples_per_class;
      spec.height = config.encoder.height;
      spec.width = config.encoder.width;
      const Dataset data = gen_synthetic(spec);
      save_dataset(data, out);
      std::cout << "wrote " << data.sample_count() << " samples to " << out.string() << "\n";
      return 0;
    }
    if (gradcheck->parsed()) {
      const GradCheckReport report = run_gradcheck(config.seed, standard_gradcheck_paths());
      std::filesystem::create_directories(out);
      std::ofstream(out / "gradcheck.json") << report.json() << '\n';
      for (const auto& e : report.entries) {
        std::cout << (e.passed ? "PASS " : "FAIL ") << e.path << " max_rel_error=" << e.max_rel_error
                  << " instances=" << e.instances << (e.passed ? "" : " worst=" + e.worst_parameter) << "\n";
      }
      std::cout << "report: " << (out / "gradcheck.json").string() << "\n";
      return report.passed() ? 0 : 2;
    }
    if (eval->parsed() && f.checkpoint.empty()) {
      std::cerr << "error: eval requires --checkpoint DIR\n";
      return 2;
    }

    const Dataset data = load_experiment_data(config);
    write_config(config, out);
    if (pretrain->parsed()) {
      const PretrainResult r = run_pretrain(config, data, out);
      std::cout << "pretrain: final loss " << r.final_loss << ", batch accuracy " << r.final_accuracy << "\n";
    } else if (meta->parsed()) {
      std::optional<Checkpoint> init;
      if (!f.checkpoint.empty()) {
        init = load_checkpoint(f.checkpoint);
      } else if (!config.from_scratch) {
        init = run_pretrain(config, data, out / "pretrain").checkpoint;
      }
      const MetaTrainResult r = run_meta_train(config, data, init ? &*init : nullptr, out);
      const auto& last = r.history.back();
      std::cout << "meta-train: " << r.history.size() << " iterations in " << r.cpu_seconds << " s cpu, final L_c "
                << last.l_c << ", L_D " << last.l_D << "\n";
    } else if (eval->parsed()) {
      const Checkpoint ckpt = load_checkpoint(f.checkpoint);
      std::vector<std::size_t> domains;
      if (!f.domain.empty()) {
        domains.push_back(data.domain_index(f.domain));
      } else {
        for (std::size_t d = 1; d < data.domains(); ++d) domains.push_back(d);
        if (domains.empty()) domains.push_back(0);
      }
      for (auto d : domains)
        for (auto k : config.eval_shots) {
          const TrialStats s = run_eval(config, data, ckpt, d, k, out);
          std::printf("%s %zu-way %zu-shot: %.2f +- %.2f%% over %zu trials\n", data.domain_names[d].c_str(),
                      config.ways, k, 100.0 * s.mean, 100.0 * s.half_width, s.accuracies.size());
        }
    } else if (ablate->parsed()) {
      const AblationTable t = run_ablation_suite(config, data, {"none", "no_dd", "no_lg", "nonlinear", "no_afa"}, out);
      std::cout << t.tsv();
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace afa
