#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace afa {

/// Counter-based generator: draw i of a stream is a pure function of
/// (key, i), so substreams derived with split() never interact.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5851f42d4c957f2dULL)) {}

  /// Independent substream; does not advance this generator.
  Rng split(std::uint64_t purpose) const;
  Rng split(std::string_view purpose) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  /// k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> choose(std::size_t n, std::size_t k);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t z);

 private:
  Rng(std::uint64_t key, int) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// 64-bit FNV-1a, used for purpose strings and config hashes.
std::uint64_t fnv1a(std::string_view text);

}  // namespace afa
