#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "afa/data.hpp"
#include "afa/tensor_io.hpp"
#include "oracles.hpp"

using namespace afa;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("afa_test_episodes_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

GeneratorSpec small_spec(std::uint64_t seed, std::size_t per_class = 24) {
  GeneratorSpec spec = GeneratorSpec::default_benchmark(seed);
  spec.samples_per_class = per_class;
  return spec;
}

void expect_same_data(const Dataset& a, const Dataset& b) {
  ASSERT_EQ(a.domains(), b.domains());
  ASSERT_EQ(a.classes(), b.classes());
  EXPECT_EQ(a.base, b.base);
  EXPECT_EQ(a.novel, b.novel);
  for (std::size_t d = 0; d < a.domains(); ++d)
    for (std::size_t c = 0; c < a.classes(); ++c) {
      const Cell &x = a.cells[d][c], &y = b.cells[d][c];
      ASSERT_EQ(x.ids, y.ids);
      ASSERT_EQ(x.images.shape(), y.images.shape());
      for (std::size_t i = 0; i < x.images.size(); ++i) ASSERT_EQ(x.images[i], y.images[i]);
    }
}

std::string write_file(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
  return path.string();
}

}  // namespace

// ---------------------------------------------------------------- specs

TEST(DomainSpec, SingularMixingRejected) {
  DomainSpec d = DomainSpec::identity();
  d.mixing = {1, 2, 3, 2, 4, 6, 0, 0, 1};
  EXPECT_THROW(d.validate(), ConfigError);
  d = DomainSpec::identity();
  d.noise_std = -0.1;
  EXPECT_THROW(d.validate(), ConfigError);
  EXPECT_NO_THROW(DomainSpec::identity().validate());
}

TEST(ClassSpec, BoundsChecked) {
  ClassSpec c;
  EXPECT_NO_THROW(c.validate());
  c.scale = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ClassSpec{};
  c.frequency = 9.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ClassSpec{};
  c.color = {0.5, 1.5, 0.5};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(DefaultBenchmark, LayoutAndIncreasingShift) {
  const GeneratorSpec spec = GeneratorSpec::default_benchmark(1);
  EXPECT_EQ(spec.classes.size(), 16u);
  EXPECT_EQ(spec.n_base, 10u);
  ASSERT_EQ(spec.domains.size(), 3u);
  EXPECT_EQ(spec.domains[0].name, "source");
  EXPECT_EQ(spec.domains[2].name, "far");
  EXPECT_LT(spec.domains[1].noise_std, spec.domains[2].noise_std);
  EXPECT_EQ(spec.samples_per_class, 60u);
  EXPECT_EQ(spec.height, 16u);
  for (const auto& c : spec.classes) EXPECT_NO_THROW(c.validate());
  for (const auto& d : spec.domains) EXPECT_NO_THROW(d.validate());
}

// ---------------------------------------------------------------- rendering

TEST(Render, IdentityDomainReproducesRawRender) {
  const GeneratorSpec spec = GeneratorSpec::default_benchmark(3);
  Rng r1(5), r2(5), dr(9);
  const Tensor raw = render_class(spec.classes[2], 3, 16, 16, r1);
  const Tensor again = render_class(spec.classes[2], 3, 16, 16, r2);
  const Tensor shifted = apply_domain(raw, DomainSpec::identity(), dr);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    ASSERT_EQ(raw[i], again[i]);
    ASSERT_EQ(shifted[i], raw[i]);
  }
}

TEST(Render, ApplyDomainRequiresThreeChannels) {
  Rng rng(1);
  EXPECT_THROW(apply_domain(Tensor({2, 4, 4}), DomainSpec::identity(), rng), ShapeError);
}

TEST(Render, GainMixingOffsetArithmetic) {
  Tensor img({3, 1, 1}, {1.0, 2.0, 3.0});
  DomainSpec d = DomainSpec::identity();
  d.mixing = {0, 1, 0, 0, 0, 1, 1, 0, 0};
  d.gain = {2.0, 1.0, 0.5};
  d.offset = {0.1, 0.2, 0.3};
  Rng rng(1);
  const Tensor y = apply_domain(img, d, rng);
  EXPECT_DOUBLE_EQ(y[0], 2.0 * 2.0 + 0.1);
  EXPECT_DOUBLE_EQ(y[1], 1.0 * 3.0 + 0.2);
  EXPECT_DOUBLE_EQ(y[2], 0.5 * 1.0 + 0.3);
}

TEST(Render, NoiseMonotonicallyIncreasesShift) {
  const GeneratorSpec spec = GeneratorSpec::default_benchmark(4);
  double previous = -1.0;
  for (double noise : {0.0, 0.05, 0.1, 0.2, 0.4}) {
    DomainSpec d = spec.domains[1];
    d.noise_std = noise;
    double total = 0.0;
    for (std::size_t i = 0; i < 120; ++i) {
      Rng render(1000 + i), shift(2000 + i);
      const Tensor src = render_class(spec.classes[i % spec.classes.size()], 3, 16, 16, render);
      const Tensor dst = apply_domain(src, d, shift);
      double acc = 0.0;
      for (std::size_t p = 0; p < src.size(); ++p) acc += (dst[p] - src[p]) * (dst[p] - src[p]);
      total += std::sqrt(acc) / double(src.size());
    }
    EXPECT_GT(total, previous) << "noise " << noise;
    previous = total;
  }
}

// ---------------------------------------------------------------- generation

TEST(GenSynthetic, DeterministicAndCountsMatch) {
  const Dataset a = gen_synthetic(small_spec(7, 12));
  const Dataset b = gen_synthetic(small_spec(7, 12));
  expect_same_data(a, b);
  EXPECT_EQ(a.sample_count(), 16u * 3u * 12u);
  std::set<std::size_t> ids;
  for (const auto& dom : a.cells)
    for (const auto& cell : dom) ids.insert(cell.ids.begin(), cell.ids.end());
  EXPECT_EQ(ids.size(), a.sample_count());
}

TEST(GenSynthetic, DifferentSeedsDiffer) {
  const Dataset a = gen_synthetic(small_spec(7, 4));
  const Dataset b = gen_synthetic(small_spec(8, 4));
  EXPECT_GT(max_abs_diff(a.cells[0][0].images, b.cells[0][0].images), 1e-3);
}

TEST(GenSynthetic, ChannelSwapPermutesMeans) {
  GeneratorSpec spec = small_spec(9, 10);
  DomainSpec swap = DomainSpec::identity("swap");
  swap.mixing = {0, 0, 1, 1, 0, 0, 0, 1, 0};  // out0 = in2, out1 = in0, out2 = in1
  swap.seed = 5;
  spec.domains = {DomainSpec::identity("source"), swap};
  const Dataset data = gen_synthetic(spec);
  for (std::size_t c = 0; c < data.classes(); ++c) {
    const Tensor& src = data.cells[0][c].images;
    const Tensor& dst = data.cells[1][c].images;
    const auto ms = oracle::channel_moments(src), md = oracle::channel_moments(dst);
    EXPECT_NEAR(md[0].first, ms[2].first, 1e-12);
    EXPECT_NEAR(md[1].first, ms[0].first, 1e-12);
    EXPECT_NEAR(md[2].first, ms[1].first, 1e-12);
  }
}

TEST(GenSynthetic, PreconditionsEnforced) {
  GeneratorSpec spec = small_spec(1, 4);
  spec.classes.resize(9);
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  spec = small_spec(1, 4);
  spec.domains.resize(1);
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
}

TEST(GenSynthetic, SaveLoadRoundTrip) {
  const fs::path dir = scratch_dir("roundtrip");
  const Dataset data = gen_synthetic(small_spec(11, 6));
  save_dataset(data, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  const Dataset back = load_dataset(dir);
  expect_same_data(data, back);
  EXPECT_EQ(back.domain_names, data.domain_names);
  EXPECT_EQ(back.class_names, data.class_names);
  fs::remove_all(dir);
}

TEST(GenSynthetic, LoadDetectsMissingAndMisshapenFiles) {
  const fs::path dir = scratch_dir("broken");
  const Dataset data = gen_synthetic(small_spec(12, 4));
  save_dataset(data, dir);
  const fs::path victim = dir / data.cells[1][3].file;
  save_tensor_file(victim, Tensor({4, 3, 8, 8}));
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove(victim);
  try {
    load_dataset(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(data.cells[1][3].file), std::string::npos);
  }
  fs::remove_all(dir);
}

// ---------------------------------------------------------------- split

TEST(SplitBaseNovel, LastIdsAreNovel) {
  const auto [base, novel] = split_base_novel(10, 6);
  EXPECT_EQ(base, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(novel, (std::vector<std::size_t>{6, 7, 8, 9}));
  std::set<std::size_t> all(base.begin(), base.end());
  for (auto n : novel) EXPECT_TRUE(all.insert(n).second);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(split_base_novel(10, 6), split_base_novel(10, 6));
}

TEST(SplitBaseNovel, OutOfRangeRejected) {
  EXPECT_THROW(split_base_novel(10, 10), ConfigError);
  EXPECT_THROW(split_base_novel(10, 0), ConfigError);
}

// ---------------------------------------------------------------- episodes

class EpisodeSampling : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new Dataset(gen_synthetic(small_spec(13, 24))); }
  static void TearDownTestSuite() { delete data_; }
  static Dataset* data_;
};
Dataset* EpisodeSampling::data_ = nullptr;

TEST_F(EpisodeSampling, FiveWaySixteenQueryRowCounts) {
  for (std::size_t k : {1u, 5u}) {
    Rng rng(k);
    const Episode ep = sample_episode(*data_, Pool::novel, 2, 5, k, 16, rng);
    EXPECT_EQ(ep.support.dim(0), 5 * k);
    EXPECT_EQ(ep.query.dim(0), 80u);
    EXPECT_EQ(ep.support_labels.size(), 5 * k);
    EXPECT_EQ(ep.query_labels.size(), 80u);
  }
}

TEST_F(EpisodeSampling, DisjointSingleDomainRelabelled) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t domain = rng.below(3), ways = 2 + rng.below(4), k = 1 + rng.below(5), q = 1 + rng.below(8);
    const Pool pool = trial % 2 ? Pool::base : Pool::novel;
    const Episode ep = sample_episode(*data_, pool, domain, ways, k, q, rng);
    EXPECT_EQ(ep.domain, domain);
    std::set<std::size_t> sup(ep.support_ids.begin(), ep.support_ids.end());
    std::set<std::size_t> qry(ep.query_ids.begin(), ep.query_ids.end());
    EXPECT_EQ(sup.size(), ways * k);
    EXPECT_EQ(qry.size(), ways * q);
    for (auto id : qry) EXPECT_FALSE(sup.count(id)) << "sample " << id << " leaked";

    // every id belongs to the episode's domain and the pool, with a consistent class per label
    const auto& allowed = pool == Pool::base ? data_->base : data_->novel;
    std::vector<std::size_t> class_of_label(ways, SIZE_MAX);
    auto check = [&](std::size_t id, std::size_t label) {
      bool found = false;
      for (std::size_t c : allowed) {
        const auto& ids = data_->cells[domain][c].ids;
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) continue;
        found = true;
        if (class_of_label[label] == SIZE_MAX) class_of_label[label] = c;
        EXPECT_EQ(class_of_label[label], c);
      }
      EXPECT_TRUE(found) << "sample " << id << " outside domain/pool";
    };
    for (std::size_t i = 0; i < ep.support_ids.size(); ++i) {
      EXPECT_EQ(ep.support_labels[i], i / k);
      check(ep.support_ids[i], ep.support_labels[i]);
    }
    for (std::size_t i = 0; i < ep.query_ids.size(); ++i) {
      EXPECT_EQ(ep.query_labels[i], i / q);
      check(ep.query_ids[i], ep.query_labels[i]);
    }
    std::set<std::size_t> distinct(class_of_label.begin(), class_of_label.end());
    EXPECT_EQ(distinct.size(), ways);
  }
}

TEST_F(EpisodeSampling, RowsCarryTheirSampleImages) {
  Rng rng(22);
  const Episode ep = sample_episode(*data_, Pool::base, 1, 3, 2, 2, rng);
  const std::size_t img = 3 * 16 * 16;
  for (std::size_t i = 0; i < ep.support_ids.size(); ++i) {
    bool matched = false;
    for (const auto& cell : data_->cells[1]) {
      const auto it = std::find(cell.ids.begin(), cell.ids.end(), ep.support_ids[i]);
      if (it == cell.ids.end()) continue;
      const std::size_t r = std::size_t(it - cell.ids.begin());
      matched = std::equal(cell.images.values().begin() + r * img, cell.images.values().begin() + (r + 1) * img,
                           ep.support.values().begin() + i * img);
    }
    EXPECT_TRUE(matched);
  }
}

TEST_F(EpisodeSampling, SameSeedSameEpisode) {
  Rng a(5), b(5);
  const Episode x = sample_episode(*data_, Pool::novel, 0, 5, 1, 16, a);
  const Episode y = sample_episode(*data_, Pool::novel, 0, 5, 1, 16, b);
  EXPECT_EQ(x.support_ids, y.support_ids);
  EXPECT_EQ(x.query_ids, y.query_ids);
}

TEST_F(EpisodeSampling, InsufficientDataDescribed) {
  Rng rng(1);
  EXPECT_THROW(sample_episode(*data_, Pool::novel, 0, 7, 1, 1, rng), ConfigError);
  try {
    sample_episode(*data_, Pool::novel, 0, 5, 10, 16, rng);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("episode needs 26"), std::string::npos);
  }
  EXPECT_THROW(sample_episode(*data_, Pool::base, 3, 5, 1, 1, rng), ConfigError);
}

// ---------------------------------------------------------------- tensor files

TEST(TensorFiles, ImageRoundTripWithinFloatPrecision) {
  Rng rng(31);
  const fs::path dir = scratch_dir("afat");
  const Tensor img = oracle::random_tensor(rng, {3, 16, 16});
  save_tensor_file(dir / "img.afat", img);
  const Tensor back = load_tensor_file(dir / "img.afat");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1e-6);

  const Tensor batch = oracle::random_tensor(rng, {4, 3, 5, 7});
  save_tensor_file(dir / "batch.afat", batch);
  EXPECT_EQ(load_tensor_file(dir / "batch.afat").shape(), batch.shape());
  fs::remove_all(dir);
}

TEST(TensorFiles, TruncatedFileRejected) {
  const fs::path dir = scratch_dir("truncated");
  save_tensor_file(dir / "t.afat", Tensor({3, 4, 4}, 1.0));
  fs::resize_file(dir / "t.afat", fs::file_size(dir / "t.afat") - 3);
  EXPECT_THROW(load_tensor_file(dir / "t.afat"), FormatError);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------- CSV

TEST(IngestCsv, RowBecomesFeatureColumn) {
  const fs::path dir = scratch_dir("csv_one");
  const auto path = write_file(dir / "one.csv", "a,b,c,d,label,domain\n1,2,3,4,classA,dom0\n");
  const Dataset data = ingest_csv(path);
  ASSERT_EQ(data.sample_count(), 1u);
  const Tensor& img = data.cells[0][0].images;
  EXPECT_EQ(img.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(img[3], 4.0);
  EXPECT_EQ(data.class_names[0], "classA");
  EXPECT_EQ(data.domain_names[0], "dom0");
  fs::remove_all(dir);
}

TEST(IngestCsv, HeaderOnlyIsEmptyManifestError) {
  const fs::path dir = scratch_dir("csv_empty");
  const auto path = write_file(dir / "empty.csv", "x,y,label,domain\n");
  try {
    ingest_csv(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("empty manifest"), std::string::npos);
  }
  EXPECT_THROW(ingest_csv(write_file(dir / "nothing.csv", "")), FormatError);
  fs::remove_all(dir);
}

TEST(IngestCsv, HundredRowsCounted) {
  const fs::path dir = scratch_dir("csv_hundred");
  std::string text = "f0,f1,f2,label,domain\n";
  for (int i = 0; i < 100; ++i) {
    text += std::to_string(i) + "," + std::to_string(i * 0.5) + ",-1.25,c" + std::to_string(i % 7) + ",d" +
            std::to_string(i % 2) + "\n";
  }
  const Dataset data = ingest_csv(write_file(dir / "hundred.csv", text), {.n_base = 4});
  EXPECT_EQ(data.sample_count(), 100u);
  EXPECT_EQ(data.classes(), 7u);
  EXPECT_EQ(data.domains(), 2u);
  EXPECT_EQ(data.base.size(), 4u);
  EXPECT_EQ(data.novel.size(), 3u);
  fs::remove_all(dir);
}

TEST(IngestCsv, ParseErrorsNameTheRow) {
  const fs::path dir = scratch_dir("csv_bad");
  const auto ragged = write_file(dir / "ragged.csv", "a,b,label,domain\n1,2,x,d\n1,2,3,x,d\n");
  const auto text = write_file(dir / "text.csv", "a,b,label,domain\n1,2,x,d\n1,2,x,d\n1,oops,x,d\n");
  for (const auto& [path, needle] : {std::pair{ragged, std::string("row 2")}, std::pair{text, std::string("row 3")}}) {
    try {
      ingest_csv(path);
      FAIL() << "expected FormatError for " << path;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(ingest_csv(write_file(dir / "nolabel.csv", "a,b\n1,2\n")), FormatError);
  fs::remove_all(dir);
}
