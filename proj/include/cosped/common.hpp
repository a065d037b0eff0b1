#pragma once

// Shared low-level utilities: deterministic random streams, content digests,
// and a few small helpers used across the library.
//
// Reproducibility contract: every stochastic routine in this project draws
// from an Rng constructed out of (master seed, purpose tag, optional index).
// The standard library's distribution objects are implementation-defined, so
// sampling transforms (uniform doubles, normals, shuffles, categorical draws)
// are implemented here by hand on top of std::mt19937_64, which *is* fully
// specified by the standard. Two runs with the same seed therefore produce
// bit-identical streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cosped {

// ---------------------------------------------------------------------------
// Hashing / digests
// ---------------------------------------------------------------------------

// 64-bit FNV-1a. Used both for deriving purpose-tagged seeds and for
// content digests of weight blobs and canonical config text.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Digest a span of doubles by their little-endian byte representation.
// (This machine is little-endian; we memcpy through uint64 to stay
// byte-order explicit.)
inline std::uint64_t fnv1a64_doubles(std::span<const double> xs,
                                     std::uint64_t h = 0xcbf29ce484222325ull) {
  for (double x : xs) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    h = fnv1a64(bytes, 8, h);
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

// splitmix64 finalizer; good avalanche, cheap.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derive a child seed from (seed, purpose tag, index). Distinct tags give
// statistically independent streams, so adding a new consumer of randomness
// never perturbs existing ones.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t index = 0) {
  std::uint64_t h = fnv1a64(tag);
  h = splitmix64(h ^ splitmix64(seed));
  h = splitmix64(h ^ splitmix64(index + 0x517cc1b727220a95ull));
  return h;
}

// ---------------------------------------------------------------------------
// Rng: deterministic sampling primitives
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform double in [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive. Uses rejection sampling
  // to avoid modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  // Standard normal via Box-Muller. The pair's second output is deliberately
  // discarded: a one-draw-one-output rule keeps stream accounting trivial.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample an index from unnormalized non-negative weights by walking the CDF.
  int categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w))
        throw std::invalid_argument("Rng::categorical: weights must be finite and non-negative");
      total += w;
    }
    if (total <= 0.0)
      throw std::invalid_argument("Rng::categorical: total weight must be positive");
    const double r = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size() - 1);  // r landed on the rounding edge
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------------

// Number of worker threads to use. Defaults to 1; the COSPED_THREADS
// environment variable overrides.
inline int worker_threads() {
  if (const char* env = std::getenv("COSPED_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

// Probabilities below this are clamped before taking logs, so single-token
// log-probabilities are bounded below by log(1e-12). The same constant feeds
// both the loss stack and the perplexity metric; they must never drift apart.
inline constexpr double kMinTokenProb = 1e-12;

inline double min_log_prob() {
  static const double v = std::log(kMinTokenProb);
  return v;
}

// argmax with lowest-index tie-breaking (strict inequality keeps the first).
inline int argmax_index(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("argmax_index: empty input");
  int best = 0;
  for (int i = 1; i < static_cast<int>(xs.size()); ++i) {
    if (xs[static_cast<std::size_t>(i)] > xs[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

}  // namespace cosped
