#include "afa/harness.hpp"

#include <time.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "afa/tensor_io.hpp"

namespace afa {

using nlohmann::json;

namespace {

double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(text);
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  return os;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

Ablation Ablation::parse(const std::string& text) {
  Ablation a;
  if (text == "none" || text.empty()) return a;
  for (const auto& token : split(text, '+')) {
    if (token == "no_dd") {
      a.discriminator = false;
    } else if (token == "no_lg") {
      a.gram = false;
    } else if (token == "nonlinear") {
      a.nonlinear = true;
    } else if (token == "no_afa") {
      a.afa = false;
    } else {
      throw ConfigError("unknown ablation '" + token + "' (expected none|no_dd|no_lg|nonlinear|no_afa)");
    }
  }
  if (!a.afa && (a.nonlinear || !a.discriminator || !a.gram)) {
    throw ConfigError("no_afa cannot be combined with other ablations");
  }
  return a;
}

std::string Ablation::name() const {
  if (!afa) return "no_afa";
  std::vector<std::string> parts;
  if (!discriminator) parts.push_back("no_dd");
  if (!gram) parts.push_back("no_lg");
  if (nonlinear) parts.push_back("nonlinear");
  if (parts.empty()) return "none";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

void ExperimentConfig::validate() const {
  encoder.validate();
  head.validate();
  if (ways < 2) throw ConfigError("ways must be at least 2");
  if (shots < 1 || queries < 1) throw ConfigError("shots and queries must be positive");
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (pretrain_batch < 1) throw ConfigError("pretrain_batch must be positive");
  if (trials < 2) throw ConfigError("trials must be at least 2");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive and finite");
  if (heldout_every < 1) throw ConfigError("heldout_every must be positive");
  if (eval_shots.empty()) throw ConfigError("eval_shots must not be empty");
  for (auto k : eval_shots) {
    if (k < 1) throw ConfigError("eval_shots entries must be positive");
  }
  if (samples_per_class < 1) throw ConfigError("samples_per_class must be positive");
}

namespace {

const char* no_dd_mode_name(NoDdMode m) { return m == NoDdMode::lc ? "lc" : "neg_lg"; }

json config_json(const ExperimentConfig& c) {
  json head = {{"type", c.head.name()}, {"alpha", c.head.alpha}};
  head["sigma"] = c.head.sigma ? json(*c.head.sigma) : json(nullptr);
  return {{"data_path", c.data_path},
          {"samples_per_class", c.samples_per_class},
          {"encoder",
           {{"in_channels", c.encoder.in_channels},
            {"height", c.encoder.height},
            {"width", c.encoder.width},
            {"channels", c.encoder.channels}}},
          {"head", head},
          {"ways", c.ways},
          {"shots", c.shots},
          {"queries", c.queries},
          {"pretrain_iterations", c.pretrain_iterations},
          {"pretrain_batch", c.pretrain_batch},
          {"iterations", c.iterations},
          {"lr", c.lr},
          {"lambda", c.lambda.str()},
          {"ablation", c.ablation.name()},
          {"no_dd_mode", no_dd_mode_name(c.no_dd_mode)},
          {"shared_bn_stats", c.shared_bn_stats},
          {"from_scratch", c.from_scratch},
          {"heldout_every", c.heldout_every},
          {"trials", c.trials},
          {"eval_shots", c.eval_shots},
          {"threads", c.threads},
          {"seed", c.seed},
          {"out_dir", c.out_dir}};
}

template <class T>
void read_field(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* s) { return k == s; }) == keys.end()) {
      throw ConfigError("unknown config key '" + where + k + "'");
    }
  }
}

}  // namespace

std::uint64_t ExperimentConfig::hash() const {
  json j = config_json(*this);
  j.erase("out_dir");
  j.erase("threads");
  return fnv1a(j.dump());
}

std::string to_json(const ExperimentConfig& config) { return config_json(config).dump(2); }

ExperimentConfig config_from_json(const std::string& text, ExperimentConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j,
             {"data_path", "samples_per_class", "encoder", "head", "ways", "shots", "queries", "pretrain_iterations",
              "pretrain_batch", "iterations", "lr", "lambda", "ablation", "no_dd_mode", "shared_bn_stats",
              "from_scratch", "heldout_every", "trials", "eval_shots", "threads", "seed", "out_dir"},
             "");
  try {
    read_field(j, "data_path", c.data_path);
    read_field(j, "samples_per_class", c.samples_per_class);
    if (j.contains("encoder")) {
      const json& e = j.at("encoder");
      check_keys(e, {"in_channels", "height", "width", "channels"}, "encoder.");
      read_field(e, "in_channels", c.encoder.in_channels);
      read_field(e, "height", c.encoder.height);
      read_field(e, "width", c.encoder.width);
      read_field(e, "channels", c.encoder.channels);
    }
    if (j.contains("head")) {
      const json& h = j.at("head");
      if (h.is_string()) {
        c.head = HeadKind::parse(h.get<std::string>());
      } else {
        check_keys(h, {"type", "alpha", "sigma"}, "head.");
        if (h.contains("type")) c.head = HeadKind::parse(h.at("type").get<std::string>());
        read_field(h, "alpha", c.head.alpha);
        if (h.contains("sigma")) {
          c.head.sigma = h.at("sigma").is_null() ? std::nullopt : std::optional<double>(h.at("sigma").get<double>());
        }
      }
    }
    read_field(j, "ways", c.ways);
    read_field(j, "shots", c.shots);
    read_field(j, "queries", c.queries);
    read_field(j, "pretrain_iterations", c.pretrain_iterations);
    read_field(j, "pretrain_batch", c.pretrain_batch);
    read_field(j, "iterations", c.iterations);
    read_field(j, "lr", c.lr);
    if (j.contains("lambda")) c.lambda = LambdaSchedule::parse(j.at("lambda").get<std::string>());
    if (j.contains("ablation")) c.ablation = Ablation::parse(j.at("ablation").get<std::string>());
    if (j.contains("no_dd_mode")) {
      const auto m = j.at("no_dd_mode").get<std::string>();
      if (m == "lc") {
        c.no_dd_mode = NoDdMode::lc;
      } else if (m == "neg_lg") {
        c.no_dd_mode = NoDdMode::neg_lg;
      } else {
        throw ConfigError("no_dd_mode must be 'neg_lg' or 'lc'");
      }
    }
    read_field(j, "shared_bn_stats", c.shared_bn_stats);
    read_field(j, "from_scratch", c.from_scratch);
    read_field(j, "heldout_every", c.heldout_every);
    read_field(j, "trials", c.trials);
    read_field(j, "eval_shots", c.eval_shots);
    read_field(j, "threads", c.threads);
    read_field(j, "seed", c.seed);
    read_field(j, "out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json(ss.str(), std::move(base));
}

Dataset load_experiment_data(const ExperimentConfig& config) {
  Dataset data;
  if (config.data_path.empty()) {
    GeneratorSpec spec = GeneratorSpec::default_benchmark(config.seed);
    spec.samples_per_class = config.samples_per_class;
    spec.height = config.encoder.height;
    spec.width = config.encoder.width;
    spec.channels = config.encoder.in_channels;
    data = gen_synthetic(spec);
  } else {
    const std::filesystem::path path(config.data_path);
    if (std::filesystem::is_directory(path)) {
      data = load_dataset(path);
    } else if (path.extension() == ".csv") {
      data = ingest_csv(path);
      if (data.novel.empty() && data.classes() >= 2) {
        std::tie(data.base, data.novel) = split_base_novel(data.classes(), std::max<std::size_t>(1, data.classes() * 3 / 5));
      }
    } else {
      throw ConfigError("data_path must be a dataset directory or a .csv file: " + config.data_path);
    }
  }
  if (data.channels != config.encoder.in_channels || data.height != config.encoder.height ||
      data.width != config.encoder.width) {
    throw ConfigError("dataset samples are " + std::to_string(data.channels) + "x" + std::to_string(data.height) + "x" +
                      std::to_string(data.width) + " but the encoder expects " +
                      std::to_string(config.encoder.in_channels) + "x" + std::to_string(config.encoder.height) + "x" +
                      std::to_string(config.encoder.width));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Trial statistics

TrialStats trial_stats(std::vector<double> accuracies) {
  if (accuracies.empty()) throw ConfigError("trial_stats: no trials");
  TrialStats s;
  double total = 0.0;
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0)) throw NumericError("trial_stats: accuracy outside [0, 1]");
    total += a;
  }
  const double t = static_cast<double>(accuracies.size());
  s.mean = total / t;
  double sq = 0.0;
  for (double a : accuracies) sq += (a - s.mean) * (a - s.mean);
  s.std = std::sqrt(sq / t);
  s.half_width = 1.96 * s.std / std::sqrt(t);
  s.accuracies = std::move(accuracies);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::vector<ParamRef> checkpoint_refs(Checkpoint& c) {
  std::vector<ParamRef> refs = c.encoder.params.refs();
  if (c.linear_head) {
    auto r = c.linear_head->refs();
    refs.insert(refs.end(), r.begin(), r.end());
  }
  if (c.afa) {
    auto r = c.afa->refs();
    refs.insert(refs.end(), r.begin(), r.end());
  }
  if (c.discriminator) {
    auto r = c.discriminator->refs();
    refs.insert(refs.end(), r.begin(), r.end());
  }
  return refs;
}

std::vector<ParamRef> stat_refs(Encoder& e) {
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < e.stats.size(); ++i) {
    const std::string prefix = "encoder.block" + std::to_string(i);
    refs.push_back({prefix + ".running_mean", &e.stats[i].mean});
    refs.push_back({prefix + ".running_var", &e.stats[i].var});
  }
  return refs;
}

std::string file_name(const std::string& name) { return name + ".afat"; }

}  // namespace

std::vector<std::string> Checkpoint::parameter_names() {
  std::vector<std::string> out;
  for (const auto& r : checkpoint_refs(*this)) out.push_back(r.name);
  return out;
}

std::size_t Checkpoint::parameter_count() {
  std::size_t n = 0;
  for (const auto& r : checkpoint_refs(*this)) n += r.tensor->size();
  return n;
}

void save_checkpoint(Checkpoint& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tensors = json::object();
  auto write = [&](const ParamRef& r) {
    round_to_f32(*r.tensor);
    save_tensor_file(dir / file_name(r.name), *r.tensor);
    tensors[r.name] = file_name(r.name);
  };
  for (const auto& r : checkpoint_refs(c)) write(r);
  for (const auto& r : stat_refs(c.encoder)) write(r);
  json m = {{"format", "afa-checkpoint"},
            {"version", 1},
            {"stage", c.stage},
            {"seed", c.seed},
            {"config_hash", c.config_hash},
            {"encoder",
             {{"in_channels", c.encoder.config.in_channels},
              {"height", c.encoder.config.height},
              {"width", c.encoder.config.width},
              {"channels", c.encoder.config.channels}}},
            {"linear_head_classes", c.linear_head ? json(c.linear_head->bias.size()) : json(nullptr)},
            {"afa", c.afa ? json(c.afa->kind == AfaKind::linear ? "linear" : "nonlinear") : json(nullptr)},
            {"discriminator", c.discriminator.has_value()},
            {"tensors", tensors}};
  auto os = open_out(dir / "manifest.json");
  os << m.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw Error("cannot open checkpoint manifest " + path.string());
  try {
    const json m = json::parse(is);
    if (m.at("format") != "afa-checkpoint") throw FormatError(path.string() + ": not a checkpoint manifest");
    Checkpoint c;
    c.stage = m.at("stage").get<std::string>();
    c.seed = m.at("seed").get<std::uint64_t>();
    c.config_hash = m.at("config_hash").get<std::uint64_t>();
    const json& e = m.at("encoder");
    EncoderConfig ec;
    ec.in_channels = e.at("in_channels").get<std::size_t>();
    ec.height = e.at("height").get<std::size_t>();
    ec.width = e.at("width").get<std::size_t>();
    ec.channels = e.at("channels").get<std::vector<std::size_t>>();
    Rng skeleton(0);
    c.encoder = init_encoder(ec, skeleton);
    if (!m.at("linear_head_classes").is_null()) {
      c.linear_head = init_linear_head(ec.out_channels(), m.at("linear_head_classes").get<std::size_t>(), skeleton);
    }
    if (!m.at("afa").is_null()) {
      c.afa = m.at("afa") == "nonlinear" ? init_afa_nonlinear(ec.channels, skeleton) : identity_afa(ec.channels);
    }
    if (m.at("discriminator").get<bool>()) c.discriminator = init_discriminator(ec.out_channels());
    const json& tensors = m.at("tensors");
    std::vector<ParamRef> refs = checkpoint_refs(c);
    for (const auto& r : stat_refs(c.encoder)) refs.push_back(r);
    if (tensors.size() != refs.size()) {
      throw FormatError(path.string() + ": expected " + std::to_string(refs.size()) + " tensors, manifest lists " +
                        std::to_string(tensors.size()));
    }
    for (const auto& r : refs) {
      if (!tensors.contains(r.name)) throw FormatError(path.string() + ": missing tensor " + r.name);
      Tensor t = load_tensor_file(dir / tensors.at(r.name).get<std::string>());
      if (t.shape() != r.tensor->shape()) {
        throw FormatError(r.name + ": stored shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(r.tensor->shape()));
      }
      *r.tensor = std::move(t);
    }
    return c;
  } catch (const json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
}

namespace {

Rng init_rng(const ExperimentConfig& config, const char* what) { return Rng(config.seed).split("init").split(what); }

void ensure_afa(Checkpoint& c, const ExperimentConfig& config) {
  if (!config.ablation.afa) {
    c.afa.reset();
    c.discriminator.reset();
    return;
  }
  const AfaKind kind = config.ablation.nonlinear ? AfaKind::nonlinear : AfaKind::linear;
  if (!c.afa || c.afa->kind != kind) {
    Rng rng = init_rng(config, config.ablation.nonlinear ? "afa-nonlinear" : "afa");
    c.afa = config.ablation.nonlinear ? init_afa_nonlinear(config.encoder.channels, rng)
                                      : init_afa(config.encoder.channels, rng);
  }
  if (config.ablation.discriminator) {
    if (!c.discriminator) c.discriminator = init_discriminator(config.encoder.out_channels());
  } else {
    c.discriminator.reset();
  }
}

void check_base_pool(const Dataset& data) {
  if (data.base.empty()) throw ConfigError("dataset has no base classes");
  if (data.domains() == 0) throw ConfigError("dataset has no domains");
}

}  // namespace

Checkpoint init_checkpoint(const ExperimentConfig& config, const Dataset& data) {
  config.validate();
  check_base_pool(data);
  Checkpoint c;
  c.stage = "init";
  c.seed = config.seed;
  c.config_hash = config.hash();
  Rng enc_rng = init_rng(config, "encoder");
  c.encoder = init_encoder(config.encoder, enc_rng);
  ensure_afa(c, config);
  return c;
}

// ---------------------------------------------------------------------------
// Pretraining

PretrainResult run_pretrain(const ExperimentConfig& config, const Dataset& data, const std::filesystem::path& out) {
  config.validate();
  check_base_pool(data);
  PretrainResult result;
  Checkpoint& c = result.checkpoint;
  c.stage = "pretrain";
  c.seed = config.seed;
  c.config_hash = config.hash();
  Rng enc_rng = init_rng(config, "encoder");
  c.encoder = init_encoder(config.encoder, enc_rng);
  Rng head_rng = init_rng(config, "linear-head");
  c.linear_head = init_linear_head(config.encoder.out_channels(), data.base.size(), head_rng);

  // Flat index over every base-class sample of the first domain.
  std::vector<std::pair<std::size_t, std::size_t>> pool;  // (base label, row)
  for (std::size_t b = 0; b < data.base.size(); ++b) {
    const Cell& cell = data.cells[0][data.base[b]];
    for (std::size_t r = 0; r < cell.count(); ++r) pool.emplace_back(b, r);
  }
  if (pool.empty()) throw ConfigError("base classes have no samples in domain '" + data.domain_names[0] + "'");
  const std::size_t img = data.channels * data.height * data.width;

  AdamConfig adam{config.lr};
  AdamState enc_opt = AdamState::for_params(tensor_ptrs(c.encoder.params), adam);
  AdamState head_opt = AdamState::for_params(tensor_ptrs(*c.linear_head), adam);
  std::ofstream log;
  if (!out.empty()) log = open_out(out / "pretrain_losses.jsonl");

  const Rng batches = Rng(config.seed).split("pretrain");
  for (std::size_t it = 0; it < config.pretrain_iterations; ++it) {
    Rng rng = batches.split(it);
    const std::size_t n = config.pretrain_batch;
    Tensor x({n, data.channels, data.height, data.width});
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto [label, row] = pool[rng.below(pool.size())];
      const Cell& cell = data.cells[0][data.base[label]];
      std::copy_n(cell.images.values().begin() + row * img, img, x.values().begin() + i * img);
      labels[i] = label;
    }
    Tape tape;
    EncoderParams enc_b = bind(tape, c.encoder.params);
    LinearHead head_b = bind(tape, *c.linear_head);
    Tensor logits = pretrain_forward(tape, x, enc_b, c.encoder.stats, head_b, {});
    Tensor loss = softmax_cross_entropy(tape, logits, labels);
    const double l = loss[0];
    if (!std::isfinite(l)) throw NumericError("non-finite pretraining loss at iteration " + std::to_string(it));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < logits.dim(1); ++k) {
        if (logits.at(i, k) > logits.at(i, best)) best = k;
      }
      hit += best == labels[i] ? 1 : 0;
    }
    const Gradients grads = tape.backward(loss);
    adam_step(tensor_ptrs(c.encoder.params), gradients_of(grads, enc_b), enc_opt);
    adam_step(tensor_ptrs(*c.linear_head), gradients_of(grads, head_b), head_opt);
    result.losses.push_back(l);
    result.final_loss = l;
    result.final_accuracy = static_cast<double>(hit) / static_cast<double>(n);
    if (log) log << json{{"iter", it}, {"loss", l}, {"accuracy", result.final_accuracy}}.dump() << '\n';
  }
  if (!out.empty()) {
    save_checkpoint(c, out / "checkpoint");
  } else {
    for (auto& r : checkpoint_refs(c)) round_to_f32(*r.tensor);
    for (auto& r : stat_refs(c.encoder)) round_to_f32(*r.tensor);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Meta-training

namespace {

Tensor episode_images(const Episode& ep) {
  Tape scratch;
  return concat_rows(scratch, ep.support, ep.query);
}

}  // namespace

MetaTrainResult run_meta_train(const ExperimentConfig& config, const Dataset& data, const Checkpoint* init,
                               const std::filesystem::path& out) {
  config.validate();
  check_base_pool(data);
  const double cpu_start = thread_cpu_seconds();
  MetaTrainResult result;
  Checkpoint& c = result.checkpoint;
  if (init) {
    if (init->encoder.config.channels != config.encoder.channels ||
        init->encoder.config.in_channels != config.encoder.in_channels) {
      throw ConfigError("checkpoint encoder layout does not match the config");
    }
    c.encoder = init->encoder;
    c.afa = init->afa;
    c.discriminator = init->discriminator;
  } else {
    Rng enc_rng = init_rng(config, "encoder");
    c.encoder = init_encoder(config.encoder, enc_rng);
  }
  ensure_afa(c, config);
  c.stage = "meta-train";
  c.seed = config.seed;
  c.config_hash = config.hash();

  const Ablation& ab = config.ablation;
  AdamConfig adam{config.lr};
  AdamState enc_opt = AdamState::for_params(tensor_ptrs(c.encoder.params), adam);
  AdamState afa_opt, disc_opt;
  if (c.afa) afa_opt = AdamState::for_params(tensor_ptrs(*c.afa), adam);
  if (c.discriminator) disc_opt = AdamState::for_params(tensor_ptrs(*c.discriminator), adam);

  std::ofstream metrics, heldout_log;
  if (!out.empty()) {
    metrics = open_out(out / "metrics.jsonl");
    heldout_log = open_out(out / "heldout.jsonl");
  }
  const ForwardOptions train_opts{Mode::train, config.shared_bn_stats, true};
  const Rng episodes = Rng(config.seed).split("meta-train");
  const Rng heldout_episodes = Rng(config.seed).split("heldout");
  double running_max = 0.0;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    Rng rng = episodes.split(it);
    const Episode ep = sample_episode(data, Pool::base, 0, config.ways, config.shots, config.queries, rng);
    const Tensor x = episode_images(ep);
    const std::size_t ns = ep.support.dim(0), total = x.dim(0);

    Tape tape;
    EncoderParams enc_b = bind(tape, c.encoder.params);
    std::optional<AfaParams> afa_b;
    std::optional<DomainDiscriminator> disc_b;
    if (c.afa) afa_b = bind(tape, *c.afa);
    if (c.discriminator) disc_b = bind(tape, *c.discriminator);

    DualFeatures dual = forward_dual(tape, x, enc_b, c.encoder.stats, afa_b ? &*afa_b : nullptr, train_opts);
    const Tensor& feats = dual.f_a ? *dual.f_a : dual.f_o;
    Tensor probs = classify(tape, config.head, slice_rows(tape, feats, 0, ns), slice_rows(tape, feats, ns, total),
                            ep.support_labels, ep.ways);
    EpisodeLosses losses;
    losses.l_c = episode_loss(tape, probs, ep.query_labels);
    std::vector<double> site_gram;
    if (ab.adversarial()) {
      if (ab.discriminator) losses.l_d = domain_loss(tape, dual.f_o, *dual.f_a, *disc_b);
      if (ab.gram) losses.l_g = total_gram_loss(tape, dual, &site_gram);
      combine_adversarial(tape, losses);
    }
    const double acc_domain = disc_b ? domain_accuracy(dual.f_o, *dual.f_a, *disc_b) : 0.0;

    ParamGroups groups;
    groups.encoder = make_group(c.encoder.params, enc_b, &enc_opt);
    if (c.afa) groups.afa = make_group(*c.afa, *afa_b, &afa_opt);
    if (c.discriminator) groups.discriminator = make_group(*c.discriminator, *disc_b, &disc_opt);
    const double progress = static_cast<double>(it) / static_cast<double>(config.iterations);
    const double lambda = ab.adversarial() ? lambda_schedule(progress, config.lambda) : 0.0;
    StepOptions step;
    step.iteration = it;
    step.afa_learns_from_classification = ab.afa && !ab.discriminator && config.no_dd_mode == NoDdMode::lc;
    LossReport report = adversarial_step(tape, losses, groups, lambda, step);
    report.acc_domain = acc_domain;
    report.site_gram = std::move(site_gram);
    if (metrics) {
      metrics << json{{"iter", it},       {"L_c", report.l_c},       {"L_d", report.l_d},
                      {"L_g", report.l_g}, {"L_D", report.l_D},       {"lambda", report.lambda},
                      {"acc_domain", report.acc_domain}}
                     .dump()
              << '\n';
    }
    result.history.push_back(std::move(report));

    if (c.discriminator && (it + 1) % config.heldout_every == 0) {
      Rng hr = heldout_episodes.split(it);
      const Episode hep = sample_episode(data, Pool::base, 0, config.ways, config.shots, config.queries, hr);
      Tape scratch;
      auto stats = c.encoder.stats;
      DualFeatures hd = forward_dual(scratch, episode_images(hep), c.encoder.params, stats, &*c.afa,
                                     {Mode::train, config.shared_bn_stats, false});
      HeldoutCheck check;
      check.iteration = it;
      check.accuracy = domain_accuracy(hd.f_o, *hd.f_a, *c.discriminator);
      running_max = std::max(running_max, check.accuracy);
      check.running_max = running_max;
      result.heldout.push_back(check);
      if (heldout_log) {
        heldout_log << json{{"iter", it}, {"acc_domain", check.accuracy}, {"running_max", running_max}}.dump()
                    << '\n';
      }
    }
  }
  if (!out.empty()) {
    save_checkpoint(c, out / "checkpoint");
  } else {
    for (auto& r : checkpoint_refs(c)) round_to_f32(*r.tensor);
    for (auto& r : stat_refs(c.encoder)) round_to_f32(*r.tensor);
  }
  result.cpu_seconds = thread_cpu_seconds() - cpu_start;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

TrialStats run_trials(const Dataset& data, std::size_t domain, std::size_t ways, std::size_t shots,
                      std::size_t queries, std::size_t trials, std::uint64_t seed, std::size_t threads,
                      const TrialScorer& scorer) {
  if (trials < 1) throw ConfigError("at least one trial is required");
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, trials);
  const Rng root = Rng(seed).split("eval").split(domain).split(shots);
  std::vector<double> acc(trials, 0.0);
  std::vector<std::exception_ptr> errors(trials);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < trials; t = next++) {
      try {
        Rng rng = root.split(t);
        const Episode ep = sample_episode(data, Pool::novel, domain, ways, shots, queries, rng);
        acc[t] = scorer(ep);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return trial_stats(std::move(acc));
}

TrialStats run_eval(const ExperimentConfig& config, const Dataset& data, const Checkpoint& checkpoint,
                    std::size_t domain, std::size_t shots, const std::filesystem::path& out) {
  config.validate();
  if (domain >= data.domains()) throw ConfigError("domain index out of range");
  const Encoder& enc = checkpoint.encoder;
  const TrialScorer scorer = [&](const Episode& ep) {
    Tape tape;
    auto stats = enc.stats;
    Tensor f = forward_original(tape, episode_images(ep), enc.params, stats, {Mode::eval, false, false});
    const std::size_t ns = ep.support.dim(0);
    Tensor probs = classify(tape, config.head, slice_rows(tape, f, 0, ns), slice_rows(tape, f, ns, f.dim(0)),
                            ep.support_labels, ep.ways);
    return episode_accuracy(probs, ep.query_labels);
  };
  TrialStats stats =
      run_trials(data, domain, config.ways, shots, config.queries, config.trials, config.seed, config.threads, scorer);
  if (!out.empty()) {
    const std::string stem = "eval_" + data.domain_names[domain] + "_" + std::to_string(shots) + "shot";
    {
      auto os = open_out(out / (stem + ".jsonl"));
      for (std::size_t t = 0; t < stats.accuracies.size(); ++t) {
        os << json{{"trial", t}, {"accuracy", stats.accuracies[t]}}.dump() << '\n';
      }
    }
    auto os = open_out(out / (stem + "_summary.json"));
    os << json{{"domain", data.domain_names[domain]},
               {"shots", shots},
               {"ways", config.ways},
               {"trials", stats.accuracies.size()},
               {"mean", stats.mean},
               {"std", stats.std},
               {"half_width", stats.half_width}}
              .dump(2)
       << '\n';
  }
  return stats;
}

TrialStats replay_trials(const std::filesystem::path& jsonl) {
  std::ifstream is(jsonl);
  if (!is) throw Error("cannot open " + jsonl.string());
  std::vector<double> acc;
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.at("trial").get<std::size_t>() != row) throw FormatError(jsonl.string() + ": trials out of order");
      acc.push_back(j.at("accuracy").get<double>());
    } catch (const json::exception& e) {
      throw FormatError(jsonl.string() + ": line " + std::to_string(row + 1) + ": " + e.what());
    }
    ++row;
  }
  return trial_stats(std::move(acc));
}

// ---------------------------------------------------------------------------
// Ablation suite

const TrialStats& AblationTable::at(const std::string& variant, const std::string& domain, std::size_t shot) const {
  const auto v = std::find(variants.begin(), variants.end(), variant);
  const auto d = std::find(domains.begin(), domains.end(), domain);
  const auto s = std::find(shots.begin(), shots.end(), shot);
  if (v == variants.end() || d == domains.end() || s == shots.end()) {
    throw ConfigError("ablation table has no cell " + variant + "/" + domain + "/" + std::to_string(shot) + "-shot");
  }
  return stats[v - variants.begin()][(d - domains.begin()) * shots.size() + (s - shots.begin())];
}

double AblationTable::target_mean(const std::string& variant) const {
  const auto v = std::find(variants.begin(), variants.end(), variant);
  if (v == variants.end()) throw ConfigError("ablation table has no variant " + variant);
  double total = 0.0;
  for (const auto& s : stats[v - variants.begin()]) total += s.mean;
  return total / static_cast<double>(stats[v - variants.begin()].size());
}

std::string AblationTable::tsv() const {
  std::ostringstream os;
  os << "variant";
  for (const auto& d : domains)
    for (auto k : shots) os << '\t' << d << '_' << k << "shot";
  os << '\n';
  char cell[64];
  for (std::size_t v = 0; v < variants.size(); ++v) {
    os << variants[v];
    for (const auto& s : stats[v]) {
      std::snprintf(cell, sizeof cell, "%.2f +- %.2f", 100.0 * s.mean, 100.0 * s.half_width);
      os << '\t' << cell;
    }
    os << '\n';
  }
  return os.str();
}

AblationTable run_ablation_suite(const ExperimentConfig& config, const Dataset& data,
                                 const std::vector<std::string>& variants, const std::filesystem::path& out) {
  config.validate();
  if (data.domains() < 2) throw ConfigError("ablation suite needs at least one target domain");
  AblationTable table;
  for (std::size_t d = 1; d < data.domains(); ++d) table.domains.push_back(data.domain_names[d]);
  table.shots = config.eval_shots;

  std::optional<PretrainResult> pre;
  if (!config.from_scratch) pre = run_pretrain(config, data, out.empty() ? out : out / "pretrain");
  for (const auto& name : variants) {
    ExperimentConfig vc = config;
    vc.ablation = Ablation::parse(name);
    const auto dir = out.empty() ? out : out / vc.ablation.name();
    table.variants.push_back(vc.ablation.name());
    std::vector<TrialStats> row;
    MetaTrainResult trained = run_meta_train(vc, data, pre ? &pre->checkpoint : nullptr, dir);
    for (std::size_t d = 1; d < data.domains(); ++d)
      for (auto k : config.eval_shots) row.push_back(run_eval(vc, data, trained.checkpoint, d, k, dir));
    table.stats.push_back(std::move(row));
  }
  if (!out.empty()) {
    auto tsv = open_out(out / "ablation.tsv");
    tsv << table.tsv();
    json cells = json::array();
    for (std::size_t v = 0; v < table.variants.size(); ++v)
      for (std::size_t d = 0; d < table.domains.size(); ++d)
        for (std::size_t s = 0; s < table.shots.size(); ++s) {
          const auto& st = table.stats[v][d * table.shots.size() + s];
          cells.push_back({{"variant", table.variants[v]},
                           {"domain", table.domains[d]},
                           {"shots", table.shots[s]},
                           {"mean", st.mean},
                           {"half_width", st.half_width}});
        }
    auto js = open_out(out / "ablation.json");
    js << json{{"seed", config.seed}, {"config_hash", config.hash()}, {"cells", cells}}.dump(2) << '\n';
  }
  return table;
}

// ---------------------------------------------------------------------------
// Gradient checks

bool GradCheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

std::string GradCheckReport::json() const {
  nlohmann::json paths = nlohmann::json::array();
  for (const auto& e : entries) {
    paths.push_back({{"path", e.path},
                     {"instances", e.instances},
                     {"coordinates", e.coordinates},
                     {"max_rel_error", e.max_rel_error},
                     {"worst_parameter", e.worst_parameter},
                     {"passed", e.passed}});
  }
  return nlohmann::json{{"passed", passed()}, {"tolerance", tolerance}, {"seconds", seconds}, {"paths", paths}}.dump(2);
}

namespace {

/// Tiny dual-stream model used by every standard path.
struct ToyProblem {
  Encoder encoder;
  AfaParams afa;
  DomainDiscriminator discriminator;
  Tensor x;
  std::vector<std::size_t> support_labels, query_labels;
  std::size_t ways = 2, support_rows = 0;
};

ToyProblem make_toy(Rng& rng, bool nonlinear) {
  ToyProblem p;
  EncoderConfig ec;
  ec.in_channels = 2;
  ec.height = 4;
  ec.width = 4;
  ec.channels = {3, 3};
  p.ways = 2 + rng.below(2);
  const std::size_t shots = 2, queries = 2;
  p.encoder = init_encoder(ec, rng);
  for (auto& b : p.encoder.params.blocks) {
    for (auto& v : b.bn_scale.values()) v = rng.normal(1.0, 0.2);
    for (auto& v : b.bn_shift.values()) v = rng.normal(0.0, 0.2);
  }
  p.afa = nonlinear ? init_afa_nonlinear(ec.channels, rng) : init_afa(ec.channels, rng);
  p.discriminator = init_discriminator(ec.out_channels());
  for (auto& v : p.discriminator.weight.values()) v = rng.normal(0.0, 1.0);
  p.discriminator.bias[0] = rng.normal(0.0, 0.5);
  p.support_rows = p.ways * shots;
  const std::size_t rows = p.ways * (shots + queries);
  p.x = Tensor({rows, ec.in_channels, ec.height, ec.width});
  for (std::size_t c = 0; c < p.ways; ++c) {
    for (std::size_t s = 0; s < shots; ++s) p.support_labels.push_back(c);
    for (std::size_t q = 0; q < queries; ++q) p.query_labels.push_back(c);
  }
  const std::size_t img = ec.in_channels * ec.height * ec.width;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t label = r < p.support_rows ? p.support_labels[r] : p.query_labels[r - p.support_rows];
    for (std::size_t i = 0; i < img; ++i) {
      p.x[r * img + i] = rng.normal(0.5 * static_cast<double>(label) * ((i % 3) == 0 ? 1.0 : -1.0), 1.0);
    }
  }
  return p;
}

template <class P>
void assign(P& params, std::span<const Tensor> values, std::size_t& offset) {
  for (auto& r : params.refs()) *r.tensor = values[offset++];
}

template <class P>
void append(P& params, GradCheckInstance& inst) {
  for (auto& r : params.refs()) {
    inst.params.push_back(*r.tensor);
    inst.names.push_back(r.name);
  }
}

enum class Objective { classification, domain, gram, combined };

GradCheckInstance toy_instance(Rng& rng, Objective objective, HeadKind head, bool nonlinear) {
  auto toy = std::make_shared<ToyProblem>(make_toy(rng, nonlinear));
  GradCheckInstance inst;
  append(toy->encoder.params, inst);
  append(toy->afa, inst);
  const bool uses_disc = objective == Objective::domain || objective == Objective::combined;
  if (uses_disc) append(toy->discriminator, inst);
  const double lambda = 0.7;
  inst.program = [toy, objective, head, uses_disc, lambda](Tape& tape, std::span<const Tensor> values) {
    std::size_t offset = 0;
    EncoderParams enc = toy->encoder.params;
    AfaParams afa = toy->afa;
    DomainDiscriminator disc = toy->discriminator;
    assign(enc, values, offset);
    assign(afa, values, offset);
    if (uses_disc) assign(disc, values, offset);
    auto stats = toy->encoder.stats;
    DualFeatures dual = forward_dual(tape, toy->x, enc, stats, &afa, {Mode::train, false, false});
    const std::size_t ns = toy->support_rows, total = toy->x.dim(0);
    auto classification = [&] {
      Tensor probs = classify(tape, head, slice_rows(tape, *dual.f_a, 0, ns), slice_rows(tape, *dual.f_a, ns, total),
                              toy->support_labels, toy->ways);
      return episode_loss(tape, probs, toy->query_labels);
    };
    switch (objective) {
      case Objective::classification:
        return classification();
      case Objective::domain:
        return domain_loss(tape, dual.f_o, *dual.f_a, disc);
      case Objective::gram:
        return total_gram_loss(tape, dual);
      case Objective::combined: {
        EpisodeLosses l;
        l.l_d = domain_loss(tape, dual.f_o, *dual.f_a, disc);
        l.l_g = total_gram_loss(tape, dual);
        combine_adversarial(tape, l);
        return sub(tape, classification(), scale(tape, *l.l_D, lambda));
      }
    }
    throw Error("unknown objective");
  };
  return inst;
}

}  // namespace

std::vector<GradCheckPath> standard_gradcheck_paths() {
  auto path = [](std::string name, Objective o, HeadKind h, bool nonlinear = false) {
    return GradCheckPath{std::move(name), [o, h, nonlinear](Rng& rng) { return toy_instance(rng, o, h, nonlinear); }};
  };
  return {path("L_c/matching", Objective::classification, HeadKind::matching()),
          path("L_c/proto", Objective::classification, HeadKind::proto()),
          path("L_c/tpn", Objective::classification, HeadKind::tpn()),
          path("L_d", Objective::domain, HeadKind::matching()),
          path("L_g", Objective::gram, HeadKind::matching()),
          path("L_g/nonlinear", Objective::gram, HeadKind::matching(), true),
          path("combined", Objective::combined, HeadKind::matching())};
}

GradCheckReport run_gradcheck(std::uint64_t seed, const std::vector<GradCheckPath>& paths, std::size_t instances,
                              double tolerance) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckReport report;
  report.tolerance = tolerance;
  const Rng root = Rng(seed).split("gradcheck");
  for (const auto& path : paths) {
    GradCheckEntry entry;
    entry.path = path.name;
    const Rng path_rng = root.split(path.name);
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = path_rng.split(i);
      GradCheckInstance inst = path.make(rng);
      Rng coords = rng.split("coords");
      const GradCheckResult r = grad_check(inst.program, inst.params, coords);
      entry.coordinates += r.coordinates_checked;
      if (r.max_rel_error > entry.max_rel_error || entry.instances == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, r.max_rel_error);
        entry.worst_parameter =
            r.param_index < inst.names.size() ? inst.names[r.param_index] : "param" + std::to_string(r.param_index);
      }
      ++entry.instances;
    }
    entry.passed = entry.max_rel_error <= tolerance;
    report.entries.push_back(std::move(entry));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace afa
