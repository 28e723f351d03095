#pragma once

// Seeded random streams.
//
// Every random draw in the library comes from an `Rng`, which wraps
// std::mt19937_64 (whose output sequence is fixed by the C++ standard) and
// implements its own distribution transforms, because the std:: distributions
// are implementation-defined and would break cross-platform reproducibility.
//
// Child seeds are derived from a single root seed:
//
//   child(root, tag, i0, i1) = mix(mix(mix(root ^ fnv1a(tag)) ^ i0') ^ i1')
//
// where mix is the splitmix64 finaliser and ik' = splitmix64 increment-scaled
// index. Each purpose (simulation, split, bootstrap m, init m, ...) gets its
// own tag so streams never overlap by construction.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace stabreg {

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t i0 = 0,
                                    std::uint64_t i1 = 0) noexcept {
  constexpr std::uint64_t golden = 0x9e3779b97f4a7c15ULL;
  std::uint64_t s = splitmix64_mix(root ^ fnv1a64(tag));
  s = splitmix64_mix(s ^ ((i0 + 1) * golden));
  s = splitmix64_mix(s ^ ((i1 + 1) * golden));
  return s;
}

/// Root seed plus the purpose-scoped derivation rule above.
struct SeedFamily {
  std::uint64_t root = 0;

  std::uint64_t child(std::string_view tag, std::uint64_t i0 = 0, std::uint64_t i1 = 0) const noexcept {
    return derive_seed(root, tag, i0, i1);
  }
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased by rejection. n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = engine_();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Fisher-Yates, back to front.
  template <class T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  /// k distinct values from [0, n) via partial Fisher-Yates; order is the draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_index(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace stabreg
