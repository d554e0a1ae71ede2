#include "afa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "afa/tensor_io.hpp"

namespace afa {

using nlohmann::json;

void DomainSpec::validate() const {
  const auto& m = mixing;
  const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
                     m[2] * (m[3] * m[7] - m[4] * m[6]);
  if (std::abs(det) < 1e-3) throw ConfigError("domain '" + name + "': mixing matrix is singular (|det| < 1e-3)");
  if (!(noise_std >= 0.0)) throw ConfigError("domain '" + name + "': negative noise std");
  if (!(texture_freq >= 0.0)) throw ConfigError("domain '" + name + "': negative texture frequency");
}

void ClassSpec::validate() const {
  if (!(scale > 0.05 && scale <= 2.0)) throw ConfigError("class " + std::to_string(id) + ": scale out of bounds");
  if (!(frequency > 0.0 && frequency <= 8.0)) {
    throw ConfigError("class " + std::to_string(id) + ": frequency out of bounds");
  }
  for (double c : color) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("class " + std::to_string(id) + ": color outside [0, 1]");
  }
}

const char* family_name(ClassSpec::Family f) {
  switch (f) {
    case ClassSpec::Family::blob:
      return "blob";
    case ClassSpec::Family::stripe:
      return "stripe";
    case ClassSpec::Family::ring:
      return "ring";
    case ClassSpec::Family::checker:
      return "checker";
  }
  return "?";
}

GeneratorSpec GeneratorSpec::default_benchmark(std::uint64_t seed) {
  GeneratorSpec spec;
  spec.seed = seed;
  spec.samples_per_class = 60;
  spec.n_base = 10;
  Rng rng = Rng(seed).split("class-specs");
  constexpr ClassSpec::Family families[] = {ClassSpec::Family::blob, ClassSpec::Family::stripe,
                                            ClassSpec::Family::ring, ClassSpec::Family::checker};
  for (std::size_t i = 0; i < 16; ++i) {
    ClassSpec c;
    c.id = i;
    c.family = families[i % 4];
    const double variant = static_cast<double>(i / 4);
    c.orientation = variant * std::numbers::pi / 4.0 + 0.3 * static_cast<double>(i % 4);
    c.frequency = 1.5 + 0.75 * variant;
    c.scale = 0.35 + 0.1 * variant;
    for (auto& v : c.color) v = 0.25 + 0.75 * rng.uniform();
    spec.classes.push_back(c);
  }

  DomainSpec source = DomainSpec::identity("source");
  source.noise_std = 0.05;
  source.seed = 1;

  DomainSpec near{"near"};
  near.mixing = {0.8, 0.15, 0.05, 0.1, 0.8, 0.1, 0.05, 0.15, 0.8};
  near.gain = {1.2, 0.85, 1.1};
  near.offset = {0.1, -0.1, 0.05};
  near.noise_std = 0.1;
  near.texture_freq = 2.0;
  near.texture_amp = 0.1;
  near.seed = 2;

  DomainSpec far{"far"};
  far.mixing = {0.2, 0.7, 0.1, 0.1, 0.2, 0.7, 0.7, 0.1, 0.2};
  far.gain = {1.6, 0.6, 1.3};
  far.offset = {0.3, -0.2, 0.25};
  far.noise_std = 0.15;
  far.texture_freq = 3.0;
  far.texture_amp = 0.25;
  far.seed = 3;

  spec.domains = {source, near, far};
  return spec;
}

std::size_t Dataset::sample_count() const {
  std::size_t n = 0;
  for (const auto& row : cells)
    for (const auto& c : row) n += c.count();
  return n;
}

std::size_t Dataset::domain_index(const std::string& name) const {
  for (std::size_t i = 0; i < domain_names.size(); ++i) {
    if (domain_names[i] == name) return i;
  }
  throw ConfigError("unknown domain '" + name + "'");
}

Tensor render_class(const ClassSpec& cls, std::size_t channels, std::size_t height, std::size_t width, Rng& rng) {
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  const double phase2 = 2.0 * std::numbers::pi * rng.uniform();
  const double cx = rng.uniform() * 0.5 - 0.25;
  const double cy = rng.uniform() * 0.5 - 0.25;
  const double theta = cls.orientation + rng.normal(0.0, 0.1);
  const double amp = 0.8 + 0.4 * rng.uniform();
  const double ct = std::cos(theta), st = std::sin(theta);
  const double pi = std::numbers::pi;

  Tensor img({channels, height, width});
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(width) - 1.0 - cx;
      const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(height) - 1.0 - cy;
      const double a = u * ct + v * st;
      const double b = -u * st + v * ct;
      double p = 0.0;
      switch (cls.family) {
        case ClassSpec::Family::blob: {
          const double s = cls.scale, s2 = 0.5 * cls.scale;
          p = std::exp(-(a * a / (s * s) + b * b / (s2 * s2)));
          break;
        }
        case ClassSpec::Family::stripe:
          p = 0.5 + 0.5 * std::sin(pi * cls.frequency * a + phase);
          break;
        case ClassSpec::Family::ring:
          p = 0.5 + 0.5 * std::cos(pi * cls.frequency * std::sqrt(a * a + b * b) + phase);
          break;
        case ClassSpec::Family::checker:
          p = 0.5 + 0.5 * std::sin(pi * cls.frequency * a + phase) * std::sin(pi * cls.frequency * b + phase2);
          break;
      }
      for (std::size_t c = 0; c < channels; ++c) {
        img[(c * height + y) * width + x] = amp * cls.color[c % 3] * p;
      }
    }
  return img;
}

Tensor apply_domain(const Tensor& image, const DomainSpec& domain, Rng& rng) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("apply_domain: expected a [3 x H x W] image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  const double psi = std::numbers::pi * rng.uniform();
  const double tphase = 2.0 * std::numbers::pi * rng.uniform();
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      double texture = 0.0;
      if (domain.texture_amp != 0.0) {
        const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
        const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
        texture = domain.texture_amp *
                  std::sin(std::numbers::pi * domain.texture_freq * (u * std::cos(psi) + v * std::sin(psi)) + tphase);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double mixed = 0.0;
        for (std::size_t k = 0; k < 3; ++k) mixed += domain.mixing[c * 3 + k] * image[k * hw + p];
        double val = domain.gain[c] * mixed + domain.offset[c] + texture;
        if (domain.noise_std > 0.0) val += rng.normal(0.0, domain.noise_std);
        out[c * hw + p] = val;
      }
    }
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_base_novel(std::size_t classes,
                                                                               std::size_t n_base) {
  if (n_base == 0 || n_base >= classes) {
    throw ConfigError("n_base must lie in [1, " + std::to_string(classes) + "), got " + std::to_string(n_base));
  }
  std::vector<std::size_t> base, novel;
  for (std::size_t i = 0; i < classes; ++i) (i < n_base ? base : novel).push_back(i);
  return {base, novel};
}

Dataset gen_synthetic(const GeneratorSpec& spec) {
  if (spec.classes.size() < 10) throw ConfigError("synthetic data needs at least 10 classes");
  if (spec.domains.size() < 2) throw ConfigError("synthetic data needs at least 2 domains");
  if (spec.channels != 3) throw ConfigError("synthetic images have 3 channels");
  if (spec.samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
  for (const auto& c : spec.classes) c.validate();
  for (const auto& d : spec.domains) d.validate();

  Dataset data;
  data.channels = spec.channels;
  data.height = spec.height;
  data.width = spec.width;
  data.seed = spec.seed;
  for (const auto& c : spec.classes) {
    data.class_names.push_back(std::string(family_name(c.family)) + "_" + std::to_string(c.id));
  }
  for (const auto& d : spec.domains) data.domain_names.push_back(d.name);
  std::tie(data.base, data.novel) = split_base_novel(spec.classes.size(), spec.n_base);

  const Rng root(spec.seed);
  const Rng render_root = root.split("render");
  const Rng domain_root = root.split("domain");
  const std::size_t per = spec.samples_per_class, img = spec.channels * spec.height * spec.width;
  data.cells.resize(spec.domains.size());
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    const Rng drng = domain_root.split(d).split(spec.domains[d].seed);
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      Cell cell;
      cell.images = Tensor({per, spec.channels, spec.height, spec.width});
      for (std::size_t i = 0; i < per; ++i) {
        // The class render depends only on (class, index), so domains share the underlying pattern.
        Rng rr = render_root.split(c).split(i);
        Rng nr = drng.split(c).split(i);
        Tensor raw = render_class(spec.classes[c], spec.channels, spec.height, spec.width, rr);
        Tensor shifted = apply_domain(raw, spec.domains[d], nr);
        std::copy(shifted.values().begin(), shifted.values().end(), cell.images.values().begin() + i * img);
        cell.ids.push_back((d * spec.classes.size() + c) * per + i);
      }
      round_to_f32(cell.images);
      cell.file = "d" + std::to_string(d) + "_c" + std::to_string(c) + ".afat";
      data.cells[d].push_back(std::move(cell));
    }
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json cells = json::array();
  for (std::size_t d = 0; d < data.cells.size(); ++d)
    for (std::size_t c = 0; c < data.cells[d].size(); ++c) {
      const Cell& cell = data.cells[d][c];
      if (cell.count() == 0) continue;
      const std::string file = cell.file.empty() ? "d" + std::to_string(d) + "_c" + std::to_string(c) + ".afat" : cell.file;
      save_tensor_file(dir / file, cell.images);
      cells.push_back({{"domain", d}, {"class", c}, {"count", cell.count()}, {"file", file}, {"ids", cell.ids}});
    }
  json manifest = {{"format", "afa-dataset"},
                   {"version", 1},
                   {"image_shape", {data.channels, data.height, data.width}},
                   {"classes", data.class_names},
                   {"base", data.base},
                   {"novel", data.novel},
                   {"domains", data.domain_names},
                   {"seed", data.seed},
                   {"cells", cells}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw Error("cannot open dataset manifest " + path.string());
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  try {
    if (m.at("format") != "afa-dataset") throw FormatError(path.string() + ": not a dataset manifest");
    Dataset data;
    const auto shape = m.at("image_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw FormatError(path.string() + ": image_shape must have 3 entries");
    data.channels = shape[0];
    data.height = shape[1];
    data.width = shape[2];
    data.class_names = m.at("classes").get<std::vector<std::string>>();
    data.domain_names = m.at("domains").get<std::vector<std::string>>();
    data.base = m.at("base").get<std::vector<std::size_t>>();
    data.novel = m.at("novel").get<std::vector<std::size_t>>();
    data.seed = m.value("seed", std::uint64_t{0});
    std::set<std::size_t> base(data.base.begin(), data.base.end());
    for (auto c : data.novel) {
      if (base.count(c)) throw FormatError(path.string() + ": class " + std::to_string(c) + " is both base and novel");
    }
    data.cells.assign(data.domains(), std::vector<Cell>(data.classes()));
    for (const auto& entry : m.at("cells")) {
      const auto d = entry.at("domain").get<std::size_t>();
      const auto c = entry.at("class").get<std::size_t>();
      if (d >= data.domains() || c >= data.classes()) throw FormatError(path.string() + ": cell index out of range");
      Cell& cell = data.cells[d][c];
      cell.file = entry.at("file").get<std::string>();
      cell.ids = entry.at("ids").get<std::vector<std::size_t>>();
      if (!std::filesystem::exists(dir / cell.file)) {
        throw FormatError(path.string() + ": referenced file " + cell.file + " does not exist");
      }
      cell.images = load_tensor_file(dir / cell.file);
      const Shape expect = {cell.ids.size(), data.channels, data.height, data.width};
      if (cell.images.shape() != expect) {
        throw FormatError(cell.file + ": shape " + shape_str(cell.images.shape()) + " does not match declared " +
                          shape_str(expect));
      }
    }
    return data;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Episode sample_episode(const Dataset& data, Pool pool, std::size_t domain, std::size_t ways, std::size_t shots,
                       std::size_t queries, Rng& rng) {
  const auto& classes = pool == Pool::base ? data.base : data.novel;
  const char* pool_name = pool == Pool::base ? "base" : "novel";
  if (domain >= data.domains()) throw ConfigError("domain index " + std::to_string(domain) + " out of range");
  if (ways == 0 || shots == 0 || queries == 0) throw ConfigError("ways, shots and queries must be positive");
  if (classes.size() < ways) {
    throw ConfigError(std::string(pool_name) + " pool has " + std::to_string(classes.size()) + " classes, " +
                      std::to_string(ways) + "-way episodes need more");
  }
  const auto picked = rng.choose(classes.size(), ways);
  const std::size_t img = data.channels * data.height * data.width;
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries = queries;
  ep.domain = domain;
  ep.support = Tensor({ways * shots, data.channels, data.height, data.width});
  ep.query = Tensor({ways * queries, data.channels, data.height, data.width});
  for (std::size_t label = 0; label < ways; ++label) {
    const std::size_t cls = classes[picked[label]];
    const Cell& cell = data.cells[domain][cls];
    if (cell.count() < shots + queries) {
      throw ConfigError("class '" + data.class_names[cls] + "' has " + std::to_string(cell.count()) +
                        " samples in domain '" + data.domain_names[domain] + "', episode needs " +
                        std::to_string(shots + queries));
    }
    const auto rows = rng.choose(cell.count(), shots + queries);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const bool sup = j < shots;
      Tensor& dst = sup ? ep.support : ep.query;
      const std::size_t slot = sup ? label * shots + j : label * queries + (j - shots);
      std::copy_n(cell.images.values().begin() + rows[j] * img, img, dst.values().begin() + slot * img);
      (sup ? ep.support_labels : ep.query_labels).push_back(label);
      (sup ? ep.support_ids : ep.query_ids).push_back(cell.ids[rows[j]]);
    }
  }
  return ep;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

Dataset ingest_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  std::optional<std::size_t> label_col, domain_col;
  std::vector<std::size_t> feature_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == schema.label_column) {
      label_col = i;
    } else if (header[i] == schema.domain_column) {
      domain_col = i;
    } else {
      feature_cols.push_back(i);
    }
  }
  if (!label_col || !domain_col) {
    throw FormatError(path.string() + ": header must contain '" + schema.label_column + "' and '" +
                      schema.domain_column + "' columns");
  }
  if (feature_cols.empty()) throw FormatError(path.string() + ": no feature columns");

  std::map<std::string, std::size_t> class_index, domain_index;
  Dataset data;
  data.channels = feature_cols.size();
  data.height = data.width = 1;
  std::vector<std::vector<std::vector<double>>> values;  // [domain][class] flat features
  std::vector<std::vector<std::vector<std::size_t>>> ids;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                        " fields, header has " + std::to_string(header.size()));
    }
    auto intern = [](std::map<std::string, std::size_t>& idx, std::vector<std::string>& names, const std::string& v) {
      auto [it, inserted] = idx.emplace(v, names.size());
      if (inserted) names.push_back(v);
      return it->second;
    };
    const std::size_t cls = intern(class_index, data.class_names, fields[*label_col]);
    const std::size_t dom = intern(domain_index, data.domain_names, fields[*domain_col]);
    values.resize(data.domains());
    ids.resize(data.domains());
    for (auto& v : values) v.resize(data.classes());
    for (auto& v : ids) v.resize(data.classes());
    for (std::size_t col : feature_cols) {
      const std::string& cell = fields[col];
      double v = 0.0;
      std::size_t used = 0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
        throw FormatError(path.string() + ": row " + std::to_string(row) + ", column '" + header[col] +
                          "': non-numeric value '" + cell + "'");
      }
      values[dom][cls].push_back(v);
    }
    ids[dom][cls].push_back(row - 1);
  }
  if (data.classes() == 0) throw FormatError(path.string() + ": no data rows (empty manifest)");

  const std::size_t n_base = schema.n_base.value_or(data.classes());
  if (n_base == data.classes()) {
    for (std::size_t i = 0; i < data.classes(); ++i) data.base.push_back(i);
  } else {
    std::tie(data.base, data.novel) = split_base_novel(data.classes(), n_base);
  }
  data.cells.assign(data.domains(), std::vector<Cell>(data.classes()));
  for (std::size_t d = 0; d < data.domains(); ++d)
    for (std::size_t c = 0; c < data.classes(); ++c) {
      Cell& cell = data.cells[d][c];
      cell.ids = ids[d][c];
      if (cell.ids.empty()) continue;
      cell.images = Tensor({cell.ids.size(), data.channels, 1, 1}, values[d][c]);
      round_to_f32(cell.images);
      cell.file = "d" + std::to_string(d) + "_c" + std::to_string(c) + ".afat";
    }
  return data;
}

}  // namespace afa
