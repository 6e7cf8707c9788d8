#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fsvi/errors.hpp"

namespace fsvi {

// splitmix64 — used to turn (master seed, purpose tag) pairs into well-mixed
// stream seeds so that distinct concerns (init, batching, MC noise, context
// draws, coreset selection, eval) never share a stream.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(const std::string& tag) {
  // FNV-1a, then one splitmix round to spread the low entropy of short tags.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return splitmix64(h);
}

// Deterministic random stream: xoshiro256** with explicit Gaussian/integer
// draw algorithms, so sequences are identical across platforms and standard
// library versions (std::normal_distribution makes no such promise).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) {
    // Seed four lanes of xoshiro256** via splitmix64 (the reference method).
    std::uint64_t x = seed;
    for (auto& lane : s_) {
      x = splitmix64(x + 0x9e3779b97f4a7c15ULL);
      lane = x == 0 ? 0x1234567887654321ULL : x;
    }
  }

  RngStream(std::uint64_t master_seed, const std::string& tag)
      : RngStream(splitmix64(master_seed ^ hash_tag(tag))) {}

  std::uint64_t next_u64() {
    // xoshiro256** step.
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1): 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ConfigError("RngStream::uniform_int: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via the polar (Marsaglia) method — platform-independent.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double scale = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * scale;
    has_spare_ = true;
    return u * scale;
  }

  void fill_normal(double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = normal();
  }

  // Fisher–Yates permutation of {0, ..., n-1}.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = uniform_int(i);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  // k distinct indices from {0, ..., n-1}, order random.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) {
      throw ConfigError("sample_without_replacement: k=" + std::to_string(k) +
                        " exceeds n=" + std::to_string(n));
    }
    // Partial Fisher–Yates over an index vector.
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + uniform_int(n - i);
      std::swap(p[i], p[j]);
    }
    p.resize(k);
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fsvi
