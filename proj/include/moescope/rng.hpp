#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace moescope {

/**
 * Deterministic 64-bit random number generator with documented sampling
 * transforms.
 *
 * Reproducibility across platforms and implementations is part of the file
 * format contract: a generator spec plus a seed must yield byte-identical
 * traces everywhere. The C++ standard pins the engine sequences but not the
 * distribution algorithms, so everything here is spelled out explicitly:
 *
 * Core generator: SplitMix64 (Steele, Lea, Flood 2014). State advances by
 * the golden-ratio increment and each output is a finalizer mix of the new
 * state, i.e. a counter-based generator:
 *
 *     state += 0x9E3779B97F4A7C15
 *     z = state
 *     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
 *     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
 *     output = z ^ (z >> 31)
 *
 * Derived transforms (all consume outputs in the order written):
 *   - u01():        (next() >> 11) * 2^-53, uniform in [0, 1)
 *   - sign():       top bit of next(); 1 -> +1, 0 -> -1
 *   - index(n):     high 64 bits of next() * n (Lemire range reduction)
 *   - normal():     Box-Muller, z = sqrt(-2 ln(1-u1)) * cos(2 pi u2),
 *                   two u01() per variate, the sine branch is discarded
 *   - gamma(a):     Marsaglia-Tsang squeeze for a >= 1; for a < 1,
 *                   gamma(a + 1) * (1 - u01())^(1/a)
 *   - dirichlet(a): E gamma(a) variates divided by their sum; if every
 *                   variate underflows to zero the whole draw is retried
 *
 * Independent streams are derived from a master seed by mixing the stream
 * index through the same finalizer: derive_stream(seed, i) feeds
 * seed + (i + 1) * 0x9E3779B97F4A7C15 through the mix above and uses the
 * result as the new state.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Raw SplitMix64 output.
  std::uint64_t next() {
    state_ += kGolden;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Seed for an independent stream, mixed from a master seed and index.
  static std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + (index + 1) * kGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random mantissa bits.
  double u01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Rademacher sign from the top bit: +1 or -1.
  int sign() { return (next() >> 63) ? 1 : -1; }

  /// Uniform integer in [0, n) via 128-bit multiply range reduction.
  std::uint64_t index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  /// Bernoulli(p) coin.
  bool coin(double p) { return u01() < p; }

  /// Standard normal via Box-Muller (cosine branch only).
  double normal() {
    double u1 = u01();
    double u2 = u01();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) *
           std::cos(2.0 * kPi * u2);
  }

  /// Gamma(alpha, 1) variate, alpha > 0.
  double gamma(double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
    if (alpha < 1.0) {
      double g = gamma(alpha + 1.0);
      double u = 1.0 - u01();  // (0, 1], keeps pow() away from 0^x
      return g * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / (3.0 * std::sqrt(d));
    for (;;) {
      double x = normal();
      double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      double v = t * t * t;
      double u = u01();
      double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v)))
        return d * v;
    }
  }

  /// Symmetric Dirichlet(alpha) draw of the given dimension.
  std::vector<double> dirichlet(double alpha, int dim) {
    if (dim < 1) throw std::invalid_argument("dirichlet dimension must be positive");
    std::vector<double> w(static_cast<std::size_t>(dim));
    for (;;) {
      double total = 0.0;
      for (auto& v : w) {
        v = gamma(alpha);
        total += v;
      }
      if (total > 0.0) {
        for (auto& v : w) v /= total;
        return w;
      }
    }
  }

  /**
   * Draw k distinct indices by sequential renormalization: each round picks
   * one index with probability proportional to its remaining weight, then
   * removes it. A pick scans the cumulative sum for the first index whose
   * prefix total exceeds u01() * remaining_total. If the remaining total
   * reaches zero before k picks (weights concentrated on fewer than k
   * entries), the leftover slots are filled uniformly among the unpicked
   * indices, one index(.) draw per slot. Result is in pick order.
   */
  std::vector<int> sample_without_replacement(const std::vector<double>& weights,
                                              int k) {
    const int n = static_cast<int>(weights.size());
    if (k < 1 || k > n)
      throw std::invalid_argument("sample size out of range");
    std::vector<double> w = weights;
    for (double v : w)
      if (!(v >= 0.0)) throw std::invalid_argument("negative weight");
    std::vector<int> picked;
    picked.reserve(static_cast<std::size_t>(k));
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (int round = 0; round < k; ++round) {
      double total = 0.0;
      for (int i = 0; i < n; ++i)
        if (!taken[static_cast<std::size_t>(i)]) total += w[static_cast<std::size_t>(i)];
      int choice = -1;
      if (total > 0.0) {
        double target = u01() * total;
        double cum = 0.0;
        int last_positive = -1;
        for (int i = 0; i < n; ++i) {
          if (taken[static_cast<std::size_t>(i)]) continue;
          double wi = w[static_cast<std::size_t>(i)];
          if (wi > 0.0) last_positive = i;
          cum += wi;
          if (cum > target) {
            choice = i;
            break;
          }
        }
        if (choice < 0) choice = last_positive;  // rounding pushed cum below total
      } else {
        // Uniform over the indices not yet picked.
        std::uint64_t r = index(static_cast<std::uint64_t>(n - round));
        for (int i = 0; i < n; ++i) {
          if (taken[static_cast<std::size_t>(i)]) continue;
          if (r == 0) {
            choice = i;
            break;
          }
          --r;
        }
      }
      taken[static_cast<std::size_t>(choice)] = 1;
      picked.push_back(choice);
    }
    return picked;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr double kPi = 3.14159265358979323846;

  std::uint64_t state_;
};

}  // namespace moescope
