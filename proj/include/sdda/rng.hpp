// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string_view>
#include <vector>

namespace sdda {

// FNV-1a over raw bytes. Used for stream-seed derivation and buffer checksums.
inline uint64_t fnv1a(const void* data, size_t len,
                      uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

// Derives an independent stream seed from a base seed and a tag. Streams with
// distinct tags never share state, so adding a consumer does not perturb the
// draws of existing ones.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
  uint64_t h = fnv1a(tag);
  h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h ? h : 1;
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t n) {
  uint64_t h = derive_seed(base, tag);
  h ^= n + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h ? h : 1;
}

// mt19937_64 with explicit value mappings (no std distributions), so streams
// are bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the spare draw is cached so values come in deterministic pairs.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    has_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n), unbiased via rejection.
  uint64_t below(uint64_t n) {
    const uint64_t max = std::numeric_limits<uint64_t>::max();
    const uint64_t limit = max - max % n;
    uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

  // Uniform integer in [lo, hi], inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<size_t>(below(i))]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sdda
