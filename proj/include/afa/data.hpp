#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "afa/heads.hpp"
#include "afa/rng.hpp"
#include "afa/tensor.hpp"

namespace afa {

/// Pixel-level domain transform: y = gain * (mixing x) + offset + texture + noise.
struct DomainSpec {
  std::string name;
  std::array<double, 9> mixing = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 3> gain = {1, 1, 1};
  std::array<double, 3> offset = {0, 0, 0};
  double noise_std = 0.0;
  double texture_freq = 0.0;
  double texture_amp = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  static DomainSpec identity(std::string name = "identity") { return DomainSpec{std::move(name)}; }
};

struct ClassSpec {
  enum class Family { blob, stripe, ring, checker };
  std::size_t id = 0;
  Family family = Family::blob;
  double orientation = 0.0;  // radians
  double scale = 0.5;
  double frequency = 2.0;
  std::array<double, 3> color = {1, 1, 1};

  void validate() const;
};

const char* family_name(ClassSpec::Family f);

struct GeneratorSpec {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<ClassSpec> classes;
  std::vector<DomainSpec> domains;
  std::size_t samples_per_class = 60;
  std::size_t n_base = 0;
  std::uint64_t seed = 0;

  /// 16 classes (10 base / 6 novel), a source domain and two targets of increasing shift.
  static GeneratorSpec default_benchmark(std::uint64_t seed);
};

/// Samples of one class in one domain.
struct Cell {
  Tensor images;                  // [count x C x H x W]
  std::vector<std::size_t> ids;  // globally unique sample ids
  std::string file;               // relative path in a saved dataset
  std::size_t count() const { return ids.size(); }
};

struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
  std::uint64_t seed = 0;
  /// cells[domain][class]; count 0 when a class is absent from a domain.
  std::vector<std::vector<Cell>> cells;

  std::size_t classes() const { return class_names.size(); }
  std::size_t domains() const { return domain_names.size(); }
  std::size_t sample_count() const;
  std::size_t domain_index(const std::string& name) const;
};

/// Deterministic rendering of one class pattern (before any domain transform).
Tensor render_class(const ClassSpec& cls, std::size_t channels, std::size_t height, std::size_t width, Rng& rng);
/// Applies a domain transform to a [C x H x W] image.
Tensor apply_domain(const Tensor& image, const DomainSpec& domain, Rng& rng);

/// Renders every (domain, class, sample). Values are rounded to f32 so an
/// in-memory dataset equals its saved copy.
Dataset gen_synthetic(const GeneratorSpec& spec);

/// Disjoint split by class id order: first n_base ids are base classes.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_base_novel(std::size_t classes, std::size_t n_base);

/// Writes manifest.json plus one AFAT tensor per non-empty cell.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Loads and validates a saved dataset (files exist, shapes match, split disjoint).
Dataset load_dataset(const std::filesystem::path& dir);

enum class Pool { base, novel };

/// n classes from the pool; per class k support and q query samples drawn
/// without replacement from one domain. Labels are relabelled 0..n-1.
Episode sample_episode(const Dataset& data, Pool pool, std::size_t domain, std::size_t ways, std::size_t shots,
                       std::size_t queries, Rng& rng);

struct CsvSchema {
  std::string label_column = "label";
  std::string domain_column = "domain";
  /// Leading classes (first-appearance order) used as the base pool; all when unset.
  std::optional<std::size_t> n_base;
};

/// Reads a headered CSV; every column other than label/domain is a numeric
/// feature. Each row becomes a [F x 1 x 1] sample.
Dataset ingest_csv(const std::filesystem::path& path, const CsvSchema& schema = {});

}  // namespace afa
