#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fewshot {

// Deterministic generator with a fixed algorithm (splitmix64 core) so that
// identical seeds give identical draws on every platform and toolchain.
// std::mt19937 would be portable too, but the std distributions are not
// bit-specified, so all sampling helpers live here instead.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();

  // Unbiased draw from [0, n) via rejection sampling. n must be > 0.
  uint64_t below(uint64_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double next_f64();

  // Standard normal via Box-Muller; caches the second value of each pair.
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // Moves k uniformly chosen distinct elements (in draw order) to the front.
  // Equivalent to the first k steps of a Fisher-Yates shuffle.
  template <typename T>
  void partial_shuffle(std::vector<T>& v, size_t k) {
    const size_t n = v.size();
    if (k > n) k = n;
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + static_cast<size_t>(below(n - i));
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a master seed and a stream tag.
// Same (master, tag) pair always yields the same seed; distinct tags give
// unrelated streams, which keeps e.g. episode sampling stable when the
// number of training batches changes.
uint64_t derive_seed(uint64_t master, std::string_view tag);

}  // namespace fewshot
