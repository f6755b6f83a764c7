#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string_view>
#include <vector>

namespace fedqsn::rng {

// All randomness in the library flows through these primitives instead of
// <random> distributions, whose output is implementation-defined. Identical
// seeds must reproduce identical bits on every platform and toolchain.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Order-sensitive seed combinator: mix(mix(s,a),b) != mix(mix(s,b),a).
constexpr std::uint64_t mix(std::uint64_t seed, std::uint64_t v) {
  return splitmix64(seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2)));
}

constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t a) { return mix(seed, a); }
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix(mix(seed, a), b);
}
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                               std::uint64_t c) {
  return mix(mix(mix(seed, a), b), c);
}

/// Maps 64 random bits to a double in [0, 1).
constexpr double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Sequential counter-based generator seeded once; next() walks a splitmix64
/// stream.
class SplitMix {
 public:
  explicit SplitMix(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  /// Uniform double in [0, 1).
  double unit() { return to_unit(next()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  /// Uniform integer in [0, n). Lemire multiply-shift; n must be > 0.
  std::uint64_t bounded(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * static_cast<unsigned __int128>(n)) >> 64);
  }

  /// Standard normal via Box-Muller. Consumes exactly two uniforms per call.
  double normal() {
    double u1 = 1.0 - unit();  // (0, 1], keeps log() finite
    double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Gamma(alpha, 1) via Marsaglia-Tsang squeeze; alpha > 0.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      double u = unit();
      while (u <= 0.0) u = unit();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = unit();
      while (u <= 0.0) u = unit();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  /// Symmetric Dirichlet(alpha) sample of dimension k; entries sum to 1.
  std::vector<double> dirichlet(double alpha, std::size_t k) {
    std::vector<double> draws(k);
    double total = 0.0;
    for (auto& g : draws) {
      g = gamma(alpha);
      total += g;
    }
    while (total <= 0.0) {  // essentially unreachable, but keeps the output normalized
      for (auto& g : draws) {
        g = gamma(alpha);
        total += g;
      }
    }
    for (auto& g : draws) g /= total;
    return draws;
  }

 private:
  std::uint64_t state_;
};

/// Deterministic Fisher-Yates permutation of {0, ..., n-1}.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  SplitMix gen(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(gen.bounded(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace fedqsn::rng
